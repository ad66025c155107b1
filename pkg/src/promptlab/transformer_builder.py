"""Explicit single-attention-layer transformers.

Family A: many narrow feed-forward layers (a floor quantizer stack, the
contextual attention head, then one gated layer per table entry).
Family B: one wide step layer, the attention head, one wide bump layer.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (AttentionHead, ContextualParams, build_contextual_head,
                        self_attn_layer, _jsonable)
from .boltzmann import PreconditionError
from .separation import Vocab, as_seq


class GateCollision(ValueError):
    pass


# floor cells are shifted down by this much so that grid points computed
# with rounding error still land in their own cell
CELL_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    delta: float
    d: int
    L: int

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        n = round(1 / self.delta)
        if abs(n * self.delta - 1) > 1e-12:
            raise ValueError(f"1/delta = {1 / self.delta} is not integral")
        if self.d < 1 or self.L < 0:
            raise ValueError("bad grid dimensions")

    @property
    def n(self):
        return round(1 / self.delta)

    @property
    def size(self):
        return self.n ** (self.d * self.L)

    @property
    def log_size(self):
        return self.d * self.L * math.log(self.n)

    def values(self, convention="floor"):
        k = np.arange(self.n)
        if convention == "floor":
            return k * self.delta
        if convention == "step":
            return (k + 1) * self.delta
        raise ValueError(f"unknown convention {convention!r}")

    def point(self, index, convention="floor"):
        """Grid matrix with the given mixed-radix index (first token most significant)."""
        vals = self.values(convention)
        digits = np.empty(self.d * self.L, dtype=np.int64)
        for p in range(self.d * self.L - 1, -1, -1):
            index, digits[p] = divmod(index, self.n)
        if index:
            raise IndexError("grid index out of range")
        # column-major: token by token
        return vals[digits].reshape(self.L, self.d).T.copy()

    def index_of(self, Zbar, convention="floor"):
        Zbar = np.asarray(Zbar, dtype=np.float64)
        k = np.rint(Zbar / self.delta).astype(np.int64)
        if convention == "step":
            k = k - 1
        idx = 0
        for digit in k.T.reshape(-1):
            idx = idx * self.n + int(digit)
        return idx

    def points(self, convention="floor"):
        for i in range(self.size):
            yield self.point(i, convention)

    def to_dict(self):
        return {"delta": self.delta, "d": self.d, "L": self.L}


@dataclass
class PiecewiseLinear:
    """At most three pieces on (-inf, b0), [b0, b1), [b1, inf); at least one constant."""
    breakpoints: tuple
    slopes: tuple
    intercepts: tuple

    def __post_init__(self):
        self.breakpoints = tuple(float(b) for b in self.breakpoints)
        self.slopes = tuple(float(s) for s in self.slopes)
        self.intercepts = tuple(float(c) for c in self.intercepts)
        if len(self.slopes) != len(self.breakpoints) + 1 or len(self.intercepts) != len(self.slopes):
            raise ValueError("piece count does not match breakpoints")
        if len(self.slopes) > 3:
            raise ValueError("at most three pieces")
        if list(self.breakpoints) != sorted(self.breakpoints):
            raise ValueError("breakpoints must be sorted")
        if not any(s == 0 for s in self.slopes):
            raise ValueError("need at least one constant piece")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        piece = np.searchsorted(np.asarray(self.breakpoints), t, side="right")
        s = np.asarray(self.slopes)[piece]
        c = np.asarray(self.intercepts)[piece]
        return np.where(s == 0, c, s * t + c)

    def to_dict(self):
        return {"breakpoints": list(self.breakpoints), "slopes": list(self.slopes),
                "intercepts": list(self.intercepts)}


def floor_cell_activation(delta):
    # phi(t) = -t on [0, delta), 0 elsewhere (cells shifted by CELL_TOL)
    return PiecewiseLinear((-CELL_TOL, delta - CELL_TOL), (0.0, -1.0, 0.0), (0.0, 0.0, 0.0))


def gate_activation(width):
    return PiecewiseLinear((-width, width), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0))


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class FFNLayer:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: object = "relu"
    residual: bool = True

    def __post_init__(self):
        self.W1 = np.atleast_2d(np.asarray(self.W1, dtype=np.float64))
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.W2 = np.atleast_2d(np.asarray(self.W2, dtype=np.float64))
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(-1)
        r, d = self.W1.shape
        if self.b1.shape != (r,) or self.W2.shape != (d, r) or self.b2.shape != (d,):
            raise ValueError("inconsistent FFN shapes")

    @property
    def width(self):
        return self.W1.shape[0]

    def __call__(self, Z):
        H = self.W1 @ Z + self.b1[:, None]
        H = relu(H) if self.activation == "relu" else self.activation(H)
        out = self.W2 @ H + self.b2[:, None]
        return Z + out if self.residual else out

    def to_dict(self):
        act = "relu" if self.activation == "relu" else {"plw": self.activation.to_dict()}
        return {"W1": self.W1.tolist(), "b1": self.b1.tolist(), "W2": self.W2.tolist(),
                "b2": self.b2.tolist(), "activation": act, "residual": self.residual}

    @classmethod
    def from_dict(cls, obj):
        act = obj["activation"]
        if act != "relu":
            p = act["plw"]
            act = PiecewiseLinear(tuple(p["breakpoints"]), tuple(p["slopes"]), tuple(p["intercepts"]))
        return cls(np.asarray(obj["W1"]), np.asarray(obj["b1"]), np.asarray(obj["W2"]),
                   np.asarray(obj["b2"]), act, obj.get("residual", True))


@dataclass
class TransformerNet:
    pre_ffn: list
    attn: AttentionHead
    post_ffn: list
    pos_enc: np.ndarray = None
    family: str = "none"
    meta: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.attn.d

    @property
    def depth(self):
        return len(self.pre_ffn) + len(self.post_ffn)

    @property
    def max_width(self):
        return max((l.width for l in self.pre_ffn + self.post_ffn), default=0)

    @property
    def neuron_count(self):
        return sum(l.width for l in self.pre_ffn + self.post_ffn)

    def to_dict(self):
        return {
            "family": self.family,
            "pos_enc": None if self.pos_enc is None else self.pos_enc.tolist(),
            "pre_ffn": [l.to_dict() for l in self.pre_ffn],
            "attn": self.attn.to_dict(),
            "post_ffn": [l.to_dict() for l in self.post_ffn],
            "meta": _jsonable(self.meta),
        }

    @classmethod
    def from_dict(cls, obj):
        pe = obj.get("pos_enc")
        return cls([FFNLayer.from_dict(l) for l in obj["pre_ffn"]],
                   AttentionHead.from_dict(obj["attn"]),
                   [FFNLayer.from_dict(l) for l in obj["post_ffn"]],
                   None if pe is None else np.asarray(pe, dtype=np.float64),
                   obj.get("family", "none"), obj.get("meta", {}))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def positional_encoding(d, L_total):
    if d < 1 or L_total < 1:
        raise ValueError("d and L_total must be positive")
    return np.tile(np.arange(L_total, dtype=np.float64), (d, 1))


def build_quant_stack(d, L_total, delta):
    n = round(1 / delta)
    if abs(n * delta - 1) > 1e-12:
        raise ValueError("1/delta must be integral")
    act = floor_cell_activation(delta)
    layers = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        for k in range(L_total * n):
            layers.append(FFNLayer(e[None, :], [-k * delta], e[:, None], np.zeros(d), act))
    return layers


def step_riser_count(L_total, delta):
    return L_total * round(1 / delta)


def build_step_ffn(d, L_total, delta, theta):
    """Wide ReLU layer snapping each entry up to the next multiple of delta.

    Each riser t contributes delta * (ReLU(z/theta - t delta/theta)
    - ReLU(z/theta - 1 - t delta/theta)). Not residual.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    n = round(1 / delta)
    if abs(n * delta - 1) > 1e-12:
        raise ValueError("1/delta must be integral")
    T = step_riser_count(L_total, delta)
    rows = 2 * d * T
    W1 = np.zeros((rows, d))
    b1 = np.zeros(rows)
    W2 = np.zeros((d, rows))
    r = 0
    for i in range(d):
        for t in range(T):
            W1[r, i] = 1.0 / theta
            b1[r] = -t * delta / theta
            W2[i, r] = delta
            W1[r + 1, i] = 1.0 / theta
            b1[r + 1] = -1.0 - t * delta / theta
            W2[i, r + 1] = -delta
            r += 2
    return FFNLayer(W1, b1, W2, np.zeros(d), "relu", residual=False)


def staircase(z, delta):
    """Limit of the step layer as theta -> 0: 0 below 0, else delta * ceil(z / delta)."""
    z = np.asarray(z, dtype=np.float64)
    return np.where(z <= 0, 0.0, delta * np.ceil(z / delta))


def _dedupe(entries):
    seen = {}
    out = []
    for a, t in entries:
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        key = a.tobytes()
        if key in seen:
            if not np.array_equal(seen[key], t):
                raise GateCollision("one context ID mapped to two different targets")
            continue
        seen[key] = t
        out.append((a, t))
    return out


def build_output_stack_A(h, grid_ext, id_table, gate_width=None, direction=None):
    """One gated layer per distinct table entry, gating on the projection onto `direction`.

    id_table holds (context-ID token, target token) pairs. Returns the
    ordered list of layers; the order guarantees that a token already
    sent to its target is never picked up by a later gate.
    """
    entries = _dedupe(id_table)
    if not entries:
        return []
    d = entries[0][0].size
    u = np.ones(d) / math.sqrt(d) if direction is None else np.asarray(direction, dtype=np.float64)
    centers = np.array([u @ a for a, _ in entries])
    srt = np.sort(centers)
    min_gap = float(np.min(np.diff(srt))) if len(srt) > 1 else math.inf
    if gate_width is None:
        gate_width = min_gap / 4 if math.isfinite(min_gap) else 0.5
    if not min_gap > 2 * gate_width:
        raise GateCollision(f"context IDs {min_gap:.3e} apart, gate width {gate_width:.3e}")
    # entry j must come before entry i when i's target sits inside j's gate
    n = len(entries)
    order_after = [[] for _ in range(n)]
    indeg = [0] * n
    for i, (_, t) in enumerate(entries):
        pt = u @ t
        for j in np.nonzero(np.abs(centers - pt) < gate_width)[0]:
            if j != i:
                order_after[j].append(i)
                indeg[i] += 1
    ready = sorted(i for i in range(n) if indeg[i] == 0)
    order = []
    while ready:
        j = ready.pop(0)
        order.append(j)
        for i in order_after[j]:
            indeg[i] -= 1
            if indeg[i] == 0:
                ready.append(i)
        ready.sort()
    if len(order) != n:
        raise GateCollision("target projections create a cyclic gate dependency")
    act = gate_activation(gate_width)
    layers = []
    for i in order:
        a, t = entries[i]
        layers.append(FFNLayer(u[None, :], [-centers[i]], (t - a)[:, None], np.zeros(d), act))
    return layers


def min_coordinate_gap(ids):
    A = np.stack(ids, axis=0)  # entries x d
    best = math.inf
    for i in range(A.shape[1]):
        v = np.sort(A[:, i])
        if v.size > 1:
            best = min(best, float(np.min(np.diff(v))))
    return best


def build_bump_ffn_B(h, id_table, K=None):
    """Single residual ReLU layer; each entry adds (target - ID) times a summed hat.

    Per coordinate the hat ReLU(Kx + 1) - 2 ReLU(Kx) + ReLU(Kx - 1) peaks at
    1 on the ID and vanishes once |x| >= 1/K, so averaging over the d
    coordinates gives exactly 1 on the ID.
    """
    entries = _dedupe(id_table)
    if not entries:
        raise ValueError("empty table")
    d = entries[0][0].size
    gap = min_coordinate_gap([a for a, _ in entries])
    if K is None:
        K = 2.0 / gap if math.isfinite(gap) else 1.0
    if K <= 0:
        raise ValueError("K must be positive")
    if math.isfinite(gap) and not K * gap > 1:
        raise GateCollision(f"K={K} too small for coordinate gap {gap:.3e}")
    rows = 3 * d * len(entries)
    W1 = np.zeros((rows, d))
    b1 = np.zeros(rows)
    W2 = np.zeros((d, rows))
    r = 0
    for a, t in entries:
        w = (t - a) / d
        for i in range(d):
            for off, coef in ((1.0, 1.0), (0.0, -2.0), (-1.0, 1.0)):
                W1[r, i] = K
                b1[r] = -K * a[i] + off
                W2[:, r] = coef * w
                r += 1
    layer = FFNLayer(W1, b1, W2, np.zeros(d), "relu", residual=True)
    return layer


def forward(net, Zp):
    Z = as_seq(Zp)
    if Z.shape[0] != net.d:
        raise ValueError(f"expected {net.d} rows, got {Z.shape[0]}")
    if net.pos_enc is not None:
        if net.pos_enc.shape != Z.shape:
            raise ValueError(f"expected shape {net.pos_enc.shape}, got {Z.shape}")
        Z = Z + net.pos_enc
    for layer in net.pre_ffn:
        Z = layer(Z)
    Z = self_attn_layer(Z, net.attn)
    for layer in net.post_ffn:
        Z = layer(Z)
    return Z


def _pre(net, Zp):
    Z = as_seq(Zp) + (net.pos_enc if net.pos_enc is not None else 0.0)
    for layer in net.pre_ffn:
        Z = layer(Z)
    return Z


def derived_head_params(tokens, L_total, **kw):
    """Contextual parameters measured from the quantized token set."""
    norms = np.linalg.norm(tokens, axis=0)
    nz = norms[norms > 0]
    n = tokens.shape[1]
    diff = tokens[:, :, None] - tokens[:, None, :]
    D = np.sqrt((diff * diff).sum(axis=0))
    eps = 0.999 * float(D[~np.eye(n, dtype=bool)].min()) if n > 1 else 1.0
    return ContextualParams(eps=eps, gamma_min=0.999 * float(nz.min()),
                            gamma_max=1.001 * float(norms.max()) + 1e-12,
                            vocab_size=n, L=max(L_total, 2), **kw)


def _table_inputs(h):
    return list(h.table_inputs())


def _build_core(h, grid, L_p, pre_ffn, head_params, seed, family):
    d, L = grid.d, grid.L
    L_total = L_p + L
    E = positional_encoding(d, L_total)
    inputs = _table_inputs(h)
    probe = TransformerNet(pre_ffn, AttentionHead(np.zeros((d, d)), np.eye(d), np.eye(d), np.eye(d)),
                           [], E, family)
    Ms = [_pre(probe, Zp) for Zp in inputs]
    tokens = np.unique(np.concatenate(Ms, axis=1).T, axis=0).T
    if head_params is None:
        head_params = derived_head_params(tokens, L_total)
    vocab = Vocab(tokens=tokens, membership=[])
    head, cert = build_contextual_head(vocab, head_params, s=d, rho=1, rng_seed=seed,
                                       allow_zero_token=True)
    ids = [self_attn_layer(M, head) for M in Ms]
    return E, inputs, head, cert, ids


def assemble_tau_A(h, grid, L_p, head_params=None, seed=0):
    d, L = grid.d, grid.L
    L_total = L_p + L
    quant = build_quant_stack(d, L_total, grid.delta)
    E, inputs, head, cert, ids = _build_core(h, grid, L_p, quant, head_params, seed, "A")
    table = []
    for Zp, Q in zip(inputs, ids):
        target = h(Zp)
        for j in range(L_p, L_total):
            table.append((Q[:, j], target[:, j]))
    q1 = np.asarray(cert["q1"])
    post = build_output_stack_A(h, Grid(grid.delta, d, L_total), table, direction=q1)
    meta = {"family": "A", "delta": grid.delta, "d": d, "L": L, "L_p": L_p, "seed": seed,
            "quant_layers": len(quant), "table_size": len(post), "head_certificate": cert}
    return TransformerNet(quant, head, post, E, "A", meta)


def default_theta(delta, values=None):
    """Largest power of two below delta/10 and below half of every positive offset
    of the given values above the riser beneath them."""
    cap = delta / 10
    if values is not None:
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        off = v - delta * np.floor(v / delta + 1e-12)
        off = off[off > 1e-12]
        if off.size:
            cap = min(cap, float(off.min()) / 2)
    return 2.0 ** math.floor(math.log2(cap))


def assemble_tau_B(h, grid, L_p, head_params=None, theta=None, K=None, seed=0):
    d, L = grid.d, grid.L
    L_total = L_p + L
    if theta is None:
        theta = default_theta(grid.delta)
    step = build_step_ffn(d, L_total, grid.delta, theta)
    E, inputs, head, cert, ids = _build_core(h, grid, L_p, [step], head_params, seed, "B")
    table = []
    for Zp, Q in zip(inputs, ids):
        target = h(Zp)
        for j in range(L_total):
            table.append((Q[:, j], target[:, j]))
    bump = build_bump_ffn_B(h, table, K)
    meta = {"family": "B", "delta": grid.delta, "d": d, "L": L, "L_p": L_p, "seed": seed,
            "theta": theta, "K": float(bump.W1.max()), "table_size": bump.width // (3 * d),
            "step_neurons": step.width, "bump_neurons": bump.width, "head_certificate": cert}
    return TransformerNet([step], head, [bump], E, "B", meta)
