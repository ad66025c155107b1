"""Single-head softmax attention and the contextual-mapping head.

Softmax always runs over the columns of the key sequence with
max-subtraction, so the huge logits of the unscaled construction stay
finite.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .boltzmann import PreconditionError
from .separation import (SeparationCert, as_seq, check_tokenwise, extract_vocab,
                         find_separating_unit_vector)
from .rng import stream


@dataclass
class AttentionHead:
    W_O: np.ndarray  # d x s
    W_V: np.ndarray  # s x d
    W_K: np.ndarray  # s x d
    W_Q: np.ndarray  # s x d
    rank_rho: int = 1
    certificate: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W_O = np.asarray(self.W_O, dtype=np.float64)
        self.W_V = np.asarray(self.W_V, dtype=np.float64)
        self.W_K = np.asarray(self.W_K, dtype=np.float64)
        self.W_Q = np.asarray(self.W_Q, dtype=np.float64)
        s, d = self.W_V.shape
        if self.W_O.shape != (d, s) or self.W_K.shape != (s, d) or self.W_Q.shape != (s, d):
            raise ValueError("inconsistent head shapes")

    @property
    def d(self):
        return self.W_V.shape[1]

    @property
    def s(self):
        return self.W_V.shape[0]

    def to_dict(self):
        def mat(M):
            return {"rows": M.shape[0], "cols": M.shape[1], "data": M.reshape(-1).tolist()}
        return {"W_O": mat(self.W_O), "W_V": mat(self.W_V), "W_K": mat(self.W_K),
                "W_Q": mat(self.W_Q), "rank_rho": self.rank_rho,
                "certificate": _jsonable(self.certificate)}

    @classmethod
    def from_dict(cls, obj):
        def mat(m):
            return np.asarray(m["data"], dtype=np.float64).reshape(m["rows"], m["cols"])
        return cls(mat(obj["W_O"]), mat(obj["W_V"]), mat(obj["W_K"]), mat(obj["W_Q"]),
                   obj.get("rank_rho", 1), obj.get("certificate", {}))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _check_shapes(x, Z, head):
    if Z.shape[0] != head.d or x.shape[0] != head.d:
        raise ValueError(f"shape mismatch: token dim {x.shape[0]}, seq dim {Z.shape[0]}, head d {head.d}")


def _log_weights(x, Z, head):
    return (head.W_K @ Z).T @ (head.W_Q @ x)


def attn_token(x, Z, head):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    Z = as_seq(Z)
    _check_shapes(x, Z, head)
    a = _log_weights(x, Z, head)
    w = np.exp(a - a.max())
    w /= w.sum()
    return (head.W_V @ Z) @ w


def self_attn_layer(Z, head):
    Z = as_seq(Z)
    if Z.shape[0] != head.d:
        raise ValueError("shape mismatch")
    A = (head.W_K @ Z).T @ (head.W_Q @ Z)  # keys x queries
    A = A - A.max(axis=0, keepdims=True)
    W = np.exp(A)
    W /= W.sum(axis=0, keepdims=True)
    return Z + head.W_O @ ((head.W_V @ Z) @ W)


def attention_values(Z, head):
    """Per-token attention contribution W_O attn(Z_k, Z) (the part added to the residual)."""
    Z = as_seq(Z)
    A = (head.W_K @ Z).T @ (head.W_Q @ Z)
    A = A - A.max(axis=0, keepdims=True)
    W = np.exp(A)
    W /= W.sum(axis=0, keepdims=True)
    return head.W_O @ ((head.W_V @ Z) @ W)


@dataclass(frozen=True)
class ContextualParams:
    eps: float
    gamma_min: float
    gamma_max: float
    vocab_size: int
    L: int
    delta_sep: float = None
    profile: str = "desk"          # desk | paper_faithful
    scale_factor: float = None     # None: pick the scale that puts the logit bound at logit_cap
    logit_cap: float = 10.0

    def __post_init__(self):
        if not self.gamma_max > self.gamma_min > 0:
            raise ValueError("need gamma_max > gamma_min > 0")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.profile not in ("desk", "paper_faithful"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.scale_factor is not None and not 0 < self.scale_factor <= 1:
            raise ValueError("scale_factor must lie in (0, 1]")
        if not 0 < self.logit_cap <= 20:
            raise ValueError("logit_cap must lie in (0, 20]")
        if self.L < 2:
            raise ValueError("sequence length must be at least 2")

    @property
    def delta(self):
        return 4 * math.log(self.L) if self.delta_sep is None else self.delta_sep


def contextual_constants(params, d):
    """Key-query scale and the resulting logit and gap bounds, all in log space where needed."""
    V = params.vocab_size
    kq_full = (V + 1) ** 4 * d * params.delta / (params.eps * params.gamma_min)
    if params.profile == "paper_faithful":
        c = 1.0
    else:
        c = min(1.0, params.logit_cap / (kq_full * params.gamma_max ** 2))
        if params.scale_factor is not None:
            c = min(c, params.scale_factor)
    kq = c * kq_full
    gmax = params.gamma_max
    gamma_logit = kq * gmax ** 2
    log_delta_prime = 2 * math.log(math.log(params.L)) - 2 * gamma_logit
    # (eps / (4 gmax)) * delta' / (kq * gmax)
    log_gap = math.log(params.eps / (4 * gmax)) + log_delta_prime - math.log(kq * gmax)
    kappa = gmax / params.gamma_min
    log_simplified = -5.0 / params.eps * V ** 4 * d * kappa * gmax * math.log(params.L)
    return {
        "scale": c,
        "kq_full": kq_full,
        "kq": kq,
        "gamma_logit": gamma_logit,
        "log_delta_prime": log_delta_prime,
        "log_gap_bound": log_gap,
        "gap_bound": math.exp(log_gap),
        "log_simplified_bound": log_simplified,
        "simplified_bound": math.exp(log_simplified),
        "psi_bound": params.eps / 4,
        "id_norm_bound": gmax + params.eps / 4,
        "delta_sep": params.delta,
    }


def build_contextual_head(vocab, params, s, rho=1, rng_seed=0, allow_zero_token=False):
    """Construct the contextual-mapping head. Returns (head, certificate).

    allow_zero_token exempts an all-zero token from the lower norm bound
    (the first column of a positionally encoded grid sequence can be 0).
    """
    tokens = vocab.tokens if hasattr(vocab, "tokens") else as_seq(vocab)
    d, nv = tokens.shape
    if not 1 <= rho <= min(d, s):
        raise ValueError(f"rank {rho} outside [1, min(d, s)={min(d, s)}]")
    norms = np.linalg.norm(tokens, axis=0)
    ok, bad = check_tokenwise([tokens], SeparationCert(params.gamma_min, params.gamma_max,
                                                        params.eps, "gamma_delta"))
    if ok:
        checked = tokens[:, norms > 0] if allow_zero_token else tokens
        if np.any(np.linalg.norm(checked, axis=0) <= params.gamma_min):
            ok, bad = False, {"condition": "norm", "detail": "token norm not above gamma_min"}
    if not ok:
        raise PreconditionError(f"vocabulary not separated: {bad}")
    if nv > params.vocab_size:
        raise PreconditionError("vocabulary larger than params.vocab_size")

    consts = contextual_constants(params, d)
    kq = consts["kq"]
    rng = stream(rng_seed, "contextual-head")

    pts = np.concatenate([tokens, np.zeros((d, 1))], axis=1)
    q1 = find_separating_unit_vector(pts, rng_seed=rng_seed)

    def unit(n):
        g = rng.standard_normal(n)
        return g / np.linalg.norm(g)

    eta = 1e-6 * math.sqrt(kq)
    u = unit(s)
    P = np.empty((s, rho))
    Pp = np.empty((s, rho))
    P[:, 0] = math.sqrt(kq) * u
    Pp[:, 0] = math.sqrt(kq) * u
    P[:, 1:] = rng.uniform(-eta, eta, size=(s, rho - 1))
    Pp[:, 1:] = rng.uniform(-eta, eta, size=(s, rho - 1))
    Qk = np.empty((d, rho))
    Qq = np.empty((d, rho))
    Qk[:, 0] = q1
    Qq[:, 0] = q1
    for i in range(1, rho):
        Qk[:, i] = unit(d)
        Qq[:, i] = unit(d)
    W_K = P @ Qk.T
    W_Q = Pp @ Qq.T

    # value / output: orthonormal p'' so that W_O p''_i = w_i exactly
    Pv, _ = np.linalg.qr(rng.standard_normal((s, rho)))
    Qv = np.empty((d, rho))
    Qv[:, 0] = q1
    for i in range(1, rho):
        Qv[:, i] = unit(d)
    W_V = Pv @ Qv.T
    basis, _ = np.linalg.qr(np.concatenate([q1[:, None], rng.standard_normal((d, rho - 1))], axis=1))
    if basis[:, 0] @ q1 < 0:
        basis[:, 0] *= -1
    w_norm = params.eps / (4 * rho * params.gamma_max)
    Wout = w_norm * basis[:, :rho]
    W_O = Wout @ Pv.T

    cert = dict(consts)
    cert.update({
        "profile": params.profile,
        "eps": params.eps,
        "gamma_min": params.gamma_min,
        "gamma_max": params.gamma_max,
        "vocab_size": params.vocab_size,
        "observed_vocab": int(nv),
        "L": params.L,
        "d": d,
        "s": s,
        "rho": rho,
        "p1_dot_p1prime": float(P[:, 0] @ Pp[:, 0]),
        "eta": eta,
        "wo_norm": w_norm,
        "q1": q1.tolist(),
        "min_token_norm": float(norms.min()),
        "zero_token": bool(np.any(norms == 0)),
        "seed": int(rng_seed),
    })
    head = AttentionHead(W_O, W_V, W_K, W_Q, rho, cert)
    return head, cert


def _validate_context_inputs(seqs):
    seqs = [as_seq(Z) for Z in seqs]
    for i, Z in enumerate(seqs):
        cols = {Z[:, k].tobytes() for k in range(Z.shape[1])}
        if len(cols) != Z.shape[1]:
            raise PreconditionError(f"sequence {i} has a duplicated token")
    return seqs


def context_ids(seqs, head, check=True):
    """Apply the attention layer to each sequence and record the attention norms.

    Returns (ids, info) with info["max_psi"] the largest attention
    contribution norm and info["psi_ok"] whether it stays below eps/4.
    """
    seqs = _validate_context_inputs(seqs)
    ids = []
    max_psi = 0.0
    for Z in seqs:
        psi = attention_values(Z, head)
        max_psi = max(max_psi, float(np.linalg.norm(psi, axis=0).max()))
        ids.append(Z + psi)
    eps = head.certificate.get("eps")
    info = {"max_psi": max_psi}
    if eps is not None:
        info["psi_bound"] = eps / 4
        info["psi_ok"] = max_psi < eps / 4
        if check and head.certificate.get("profile") == "paper_faithful" and not info["psi_ok"]:
            raise AssertionError(f"attention norm {max_psi} not below eps/4")
    return ids, info


def key_query_gaps(tokens, head):
    """min over v_a != v_b and v_c of |(W_K v_a - W_K v_b)^T W_Q v_c|."""
    K = head.W_K @ tokens
    Qm = head.W_Q @ tokens
    S = K.T @ Qm  # [a, c]
    n = tokens.shape[1]
    best = math.inf
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            best = min(best, float(np.abs(S[a] - S[b]).min()))
    return best


def prompt_decomposition(x, P, X, head):
    """Split attention over [P, X] into the prompt part and the input part.

    Returns (lam, attP, attX) with
    W_O attn(x, [P, X]) = lam * attP + (1 - lam) * attX.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    P = as_seq(P)
    X = as_seq(X)
    _check_shapes(x, P, head)
    _check_shapes(x, X, head)
    aP = _log_weights(x, P, head)
    aX = _log_weights(x, X, head)
    m = max(aP.max(), aX.max())
    sP = np.exp(aP - m).sum()
    sX = np.exp(aX - m).sum()
    lam = float(sP / (sP + sX))
    attP = head.W_O @ attn_token(x, P, head)
    attX = head.W_O @ attn_token(x, X, head)
    return lam, attP, attX
