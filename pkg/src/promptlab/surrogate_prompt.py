"""Grid quantization, the prompt-indexed surrogate, prompt search and memorization."""
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .boltzmann import PreconditionError
from .separation import as_seq
from .transformer_builder import (Grid, assemble_tau_A, assemble_tau_B, default_theta,
                                  forward)

DENSE_LIMIT = 10 ** 6
SEARCH_LIMIT = 10 ** 7


class VerificationError(RuntimeError):
    pass


def grid_quantize(Z, grid, convention="floor"):
    """Snap entries in [0, 1] to the grid.

    floor: cells [k delta, (k+1) delta) -> k delta, with 1 sent to 1 - delta.
    step:  cells (k delta, (k+1) delta] -> (k+1) delta, with 0 sent to delta.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if np.any(Z < 0) or np.any(Z > 1) or not np.all(np.isfinite(Z)):
        raise ValueError("entries must lie in [0, 1]")
    n = grid.n
    r = Z / grid.delta
    if convention == "floor":
        k = np.clip(np.floor(r + 1e-9), 0, n - 1)
    elif convention == "step":
        k = np.clip(np.ceil(r - 1e-9), 1, n)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return k * grid.delta


@dataclass
class QuantizedSeqFn:
    """Grid-to-grid sequence function, dense table or lazy rule with a cache."""
    grid: Grid
    rule: object = None
    table: dict = None
    convention: str = "floor"
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def representation(self):
        return "dense" if self.table is not None else "lazy"

    def __call__(self, Z):
        Zbar = grid_quantize(Z, self.grid, self.convention)
        idx = self.grid.index_of(Zbar, self.convention)
        if self.table is not None:
            return self.table[idx]
        if idx not in self._cache:
            self._cache[idx] = np.asarray(self.rule(Zbar), dtype=np.float64)
        return self._cache[idx]

    def table_inputs(self):
        return self.grid.points(self.convention)


def quantize_fn(f, grid, convention="floor"):
    def rule(Zbar):
        out = np.asarray(f(Zbar), dtype=np.float64)
        if np.any(out < 0) or np.any(out > 1):
            raise ValueError("function output outside [0, 1]")
        return grid_quantize(out, grid, convention)

    if grid.log_size <= math.log(DENSE_LIMIT):
        table = {i: rule(grid.point(i, convention)) for i in range(grid.size)}
        return QuantizedSeqFn(grid, rule, table, convention)
    return QuantizedSeqFn(grid, rule, None, convention)


def min_prompt_length(d, L, eps, C, alpha=1):
    if eps <= 0 or C <= 0 or d < 1 or L < 1:
        raise ValueError("parameters must be positive")
    if alpha < 1:
        raise ValueError("alpha must be at least 1")
    base = 2 * C * (d * L) ** (1.0 / alpha) / eps
    lam = base ** (d * L)
    val = L * lam
    # guard against float fuzz on exact integers
    r = round(val)
    return int(r) if abs(val - r) < 1e-9 * max(1.0, val) else int(math.ceil(val))


def delta_for(d, L, eps, C, alpha=1):
    """Grid step with C delta (dL)^(1/alpha) <= eps/2 and 1/delta integral."""
    inv = math.ceil(2 * C * (d * L) ** (1.0 / alpha) / eps - 1e-12)
    return 1.0 / max(inv, 1)


@dataclass
class PromptTable:
    grid: Grid  # grid over the L_p prompt columns
    prompts: list
    convention: str = "floor"

    def index(self, P):
        P = grid_quantize(P, self.grid, self.convention)
        for i, Q in enumerate(self.prompts):
            if np.array_equal(P, Q):
                return i
        raise KeyError("prompt not in table")


def select_prompt(table, target_id):
    if not 0 <= target_id < len(table.prompts):
        raise KeyError(f"unknown target id {target_id}")
    return table.prompts[target_id]


class Surrogate:
    """h over L_p + L columns: zero on the prompt columns, the indexed target on the rest."""

    def __init__(self, targets, grid_ext, L_p, table):
        self.targets = targets
        self.grid = grid_ext
        self.L_p = L_p
        self.table = table
        self.convention = table.convention
        self.input_grid = Grid(grid_ext.delta, grid_ext.d, grid_ext.L - L_p)

    def __call__(self, Zp):
        Zp = as_seq(Zp)
        d = self.grid.d
        out = np.zeros((d, self.grid.L))
        P = Zp[:, :self.L_p]
        try:
            i = self.table.index(P) if self.L_p else 0
        except KeyError:
            return out
        out[:, self.L_p:] = self.targets[i](Zp[:, self.L_p:])
        return out

    def table_inputs(self):
        for P in self.table.prompts:
            for Z in self.input_grid.points(self.convention):
                yield np.concatenate([P, Z], axis=1)


def build_surrogate(targets, grid, L_p):
    if not targets:
        raise ValueError("no targets")
    conv = targets[0].convention
    if L_p < 0:
        raise ValueError("L_p must be nonnegative")
    pgrid = Grid(grid.delta, grid.d, L_p)
    if L_p == 0:
        if len(targets) != 1:
            raise PreconditionError("without a prompt only one target can be indexed")
        prompts = [np.zeros((grid.d, 0))]
    else:
        if pgrid.log_size < math.log(len(targets)) - 1e-12:
            raise PreconditionError(f"L_p={L_p} indexes fewer than {len(targets)} targets")
        prompts = [pgrid.point(i, conv) for i in range(len(targets))]
    table = PromptTable(pgrid, prompts, conv)
    h = Surrogate(targets, Grid(grid.delta, grid.d, grid.L + L_p), L_p, table)
    return h, table


def alpha_norm(A, alpha):
    a = np.abs(np.asarray(A, dtype=np.float64)).reshape(-1)
    if math.isinf(alpha):
        return float(a.max())
    return float((a ** alpha).sum() ** (1.0 / alpha))


def d_alpha_mc(f1, f2, samples, alpha=1):
    """Monte-Carlo estimate of (E ||f1(X) - f2(X)||_alpha^alpha)^(1/alpha) on fixed samples."""
    vals = [alpha_norm(f1(X) - f2(X), alpha) ** alpha for X in samples]
    return float(np.mean(vals) ** (1.0 / alpha))


@dataclass
class Dataset:
    X: list
    Y: list

    def __post_init__(self):
        self.X = [as_seq(x) for x in self.X]
        self.Y = [as_seq(y) for y in self.Y]
        if len(self.X) != len(self.Y) or not self.X:
            raise ValueError("dataset needs matching, nonempty X and Y")
        shape = self.X[0].shape
        for x, y in zip(self.X, self.Y):
            if x.shape != shape or y.shape != shape:
                raise ValueError("all pairs must share the d x L shape")
            if np.any(x < 0) or np.any(x > 1) or np.any(y < 0) or np.any(y > 1):
                raise ValueError("entries must lie in [0, 1]")
        seen = {}
        for x, y in zip(self.X, self.Y):
            k = x.tobytes()
            if k in seen and not np.array_equal(seen[k], y):
                raise PreconditionError("inconsistent dataset: identical X with different Y")
            seen[k] = y

    @property
    def d(self):
        return self.X[0].shape[0]

    @property
    def L(self):
        return self.X[0].shape[1]

    def to_json(self):
        return json.dumps([{"X": x.reshape(-1).tolist(), "Y": y.reshape(-1).tolist(),
                            "d": x.shape[0], "L": x.shape[1]} for x, y in zip(self.X, self.Y)])

    @classmethod
    def from_json(cls, text):
        rows = json.loads(text)
        X = [np.asarray(r["X"], dtype=np.float64).reshape(r["d"], r["L"]) for r in rows]
        Y = [np.asarray(r["Y"], dtype=np.float64).reshape(r["d"], r["L"]) for r in rows]
        return cls(X, Y)


def prompt_loss(net, dataset, P, L_p, loss="sup", alpha=1):
    errs = []
    for X, Y in zip(dataset.X, dataset.Y):
        out = forward(net, np.concatenate([P, X], axis=1))[:, L_p:]
        errs.append(alpha_norm(out - Y, alpha))
    return max(errs) if loss == "sup" else float(np.mean(errs))


def grid_search_prompt(net, dataset, grid, L_p, loss="sup", alpha=1, convention="floor"):
    """Exhaustive search over on-grid prompts; ties go to the lexicographically first prompt."""
    if loss not in ("sup", "mean"):
        raise ValueError("loss must be 'sup' or 'mean'")
    pgrid = Grid(grid.delta, grid.d, L_p)
    if pgrid.log_size > math.log(SEARCH_LIMIT) + 1e-12:
        raise PreconditionError(f"search space {grid.n}^{grid.d * L_p} exceeds {SEARCH_LIMIT}")
    best, best_loss = None, math.inf
    vals = pgrid.values(convention)
    for digits in itertools.product(range(grid.n), repeat=grid.d * L_p):
        P = vals[list(digits)].reshape(L_p, grid.d).T if L_p else np.zeros((grid.d, 0))
        l = prompt_loss(net, dataset, P, L_p, loss, alpha)
        if l < best_loss:
            best, best_loss = P, l
    return best, best_loss


def _quantize_targets(Y, grid, convention):
    # outputs live on the same grid as inputs
    return grid_quantize(Y, grid, convention)


def memorize(dataset, eps, C, alpha=1, family="B", seed=0, head_params=None):
    if family not in ("A", "B"):
        raise ValueError("family must be 'A' or 'B'")
    d, L = dataset.d, dataset.L
    delta = delta_for(d, L, eps, C, alpha)
    grid = Grid(delta, d, L)
    conv = "floor" if family == "A" else "step"
    for X in dataset.X:
        if family == "A" and np.any(X >= 1):
            raise PreconditionError("family A needs inputs in [0, 1)")
        if family == "B" and np.any(X <= 0):
            raise PreconditionError("family B needs inputs in (0, 1]")
    # realizability: pairs sharing a cell must agree within eps/2
    cells = {}
    for X, Y in zip(dataset.X, dataset.Y):
        key = grid.index_of(grid_quantize(X, grid, conv), conv)
        if key in cells:
            if alpha_norm(cells[key] - Y, alpha) > eps / 2:
                raise PreconditionError("two inputs share a grid cell but their targets differ by more than eps/2")
        else:
            cells[key] = Y
    targets = {k: _quantize_targets(Y, grid, conv) for k, Y in cells.items()}

    def rule(Zbar):
        return targets.get(grid.index_of(Zbar, conv), np.zeros((d, L)))

    fbar = QuantizedSeqFn(grid, rule, None, conv)
    L_p = min_prompt_length(d, L, eps, C, alpha)
    h, table = build_surrogate([fbar], grid, L_p)
    if family == "A":
        net = assemble_tau_A(h, grid, L_p, head_params, seed)
    else:
        offsets = np.concatenate([X.reshape(-1) for X in dataset.X])
        theta = default_theta(delta, offsets)
        net = assemble_tau_B(h, grid, L_p, head_params, theta=theta, seed=seed)
    P = select_prompt(table, 0)
    errs = []
    for X, Y in zip(dataset.X, dataset.Y):
        out = forward(net, np.concatenate([P, X], axis=1))[:, L_p:]
        errs.append(alpha_norm(out - Y, alpha))
    max_err = max(errs)
    report = {
        "family": family,
        "delta": delta,
        "L_p": L_p,
        "L_p_from_delta": L * grid.n ** (d * L),
        "N": len(dataset.X),
        "d": d,
        "L": L,
        "eps": eps,
        "C": C,
        "alpha": alpha,
        "ffn_layers": net.depth,
        "neurons": net.neuron_count,
        "max_width": net.max_width,
        "table_size": net.meta["table_size"],
        "errors": errs,
        "max_error": max_err,
        "pass": max_err <= eps,
        "seed": seed,
    }
    if family == "A":
        report["quant_layers"] = net.meta["quant_layers"]
    else:
        report["theta"] = net.meta["theta"]
        report["step_neurons"] = net.meta["step_neurons"]
        report["bump_neurons"] = net.meta["bump_neurons"]
    if not max_err <= eps:
        raise VerificationError(f"memorization error {max_err} exceeds eps={eps}")
    return net, P, report
