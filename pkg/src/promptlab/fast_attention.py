"""Exact and low-rank (Taylor feature) attention for bounded-entry inputs.

Attention here is V softmax(K^T Q) with the softmax taken over each column,
so output column j is a convex combination of the columns of V.
"""
import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np

from .rng import stream

CSV_FIELDS = ("n", "d", "B", "method", "g", "m", "wall_time_s", "max_err", "certified")


class DegreeTooSmall(ArithmeticError):
    def __init__(self, column):
        super().__init__(f"nonpositive normalizer at column {column}; raise the degree")
        self.column = column


class CertificationFailure(RuntimeError):
    pass


def _check(Qp, Kp, Vp):
    Qp = np.asarray(Qp, dtype=np.float64)
    Kp = np.asarray(Kp, dtype=np.float64)
    Vp = np.asarray(Vp, dtype=np.float64)
    if Qp.ndim != 2 or Kp.ndim != 2 or Vp.ndim != 2:
        raise ValueError("inputs must be matrices")
    if Qp.shape[0] != Kp.shape[0] or Kp.shape[1] != Vp.shape[1]:
        raise ValueError(f"shape mismatch: Q {Qp.shape}, K {Kp.shape}, V {Vp.shape}")
    return Qp, Kp, Vp


def exact_attention(Qp, Kp, Vp, block=1024):
    Qp, Kp, Vp = _check(Qp, Kp, Vp)
    out = np.empty((Vp.shape[0], Qp.shape[1]))
    for s in range(0, Qp.shape[1], block):
        S = Kp.T @ Qp[:, s:s + block]
        S -= S.max(axis=0, keepdims=True)
        np.exp(S, out=S)
        S /= S.sum(axis=0, keepdims=True)
        out[:, s:s + block] = Vp @ S
    return out


def feature_dim(d, g):
    return math.comb(d + g, g)


@lru_cache(maxsize=64)
def _feature_plan(d, g):
    """Per degree: (parent index, variable index, scale) in graded lexicographic order."""
    levels = []
    pos = {(): 0}
    offset = 1
    for k in range(1, g + 1):
        tuples = list(combinations_with_replacement(range(d), k))
        parent = np.empty(len(tuples), dtype=np.int64)
        var = np.empty(len(tuples), dtype=np.int64)
        scale = np.empty(len(tuples))
        for i, t in enumerate(tuples):
            parent[i] = pos[t[:-1]]
            var[i] = t[-1]
            scale[i] = 1.0 / math.sqrt(t.count(t[-1]))
            pos[t] = offset + i
        levels.append((offset, parent, var, scale))
        offset += len(tuples)
    return levels, offset


def taylor_features(X, g):
    """Features of every column of X (d x n); returns an m x n array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if g < 0:
        raise ValueError("degree must be nonnegative")
    d, n = X.shape
    levels, m = _feature_plan(d, g)
    F = np.empty((m, n))
    F[0] = 1.0
    for offset, parent, var, scale in levels:
        F[offset:offset + parent.size] = F[parent] * X[var] * scale[:, None]
    return F


def taylor_feature_map(x, g):
    return taylor_features(np.asarray(x, dtype=np.float64).reshape(-1, 1), g)[:, 0]


def taylor_partial_sum(t, g):
    t = np.asarray(t, dtype=np.float64)
    term = np.ones_like(t)
    total = np.ones_like(t)
    for i in range(1, g + 1):
        term = term * t / i
        total = total + term
    return total


def required_degree(R, rel_tol):
    """Smallest g with R^(g+1)/(g+1)! <= rel_tol * exp(-R)."""
    if R < 0:
        raise ValueError("R must be nonnegative")
    if not 0 < rel_tol < 1:
        raise ValueError("rel_tol must lie in (0, 1)")
    if R == 0:
        return 0
    target = math.log(rel_tol) - R
    log_term = 0.0  # log of R^(g+1)/(g+1)!
    g = 0
    while True:
        log_term += math.log(R) - math.log(g + 1)
        if log_term <= target:
            return g
        g += 1
        if g > 100000:
            raise ArithmeticError("degree search did not converge")


def lowrank_attention(Qp, Kp, Vp, g, block_elems=1 << 23):
    """Attention through degree-g Taylor features without forming the n x n matrix."""
    Qp, Kp, Vp = _check(Qp, Kp, Vp)
    d = Qp.shape[0]
    m = feature_dim(d, g)
    chunk = max(16, block_elems // m)
    dv = Vp.shape[0]
    KV = np.zeros((dv + 1, m))
    for s in range(0, Kp.shape[1], chunk):
        Fk = taylor_features(Kp[:, s:s + chunk], g)
        Vs = Vp[:, s:s + chunk]
        KV[:dv] += Vs @ Fk.T
        KV[dv] += Fk.sum(axis=1)
    out = np.empty((dv, Qp.shape[1]))
    for s in range(0, Qp.shape[1], chunk):
        Fq = taylor_features(Qp[:, s:s + chunk], g)
        NU = KV @ Fq
        den = NU[dv]
        bad = np.nonzero(~(den > 0))[0]
        if bad.size:
            raise DegreeTooSmall(int(s + bad[0]))
        out[:, s:s + chunk] = NU[:dv] / den
    return out


@dataclass
class AptiInstance:
    Qp: np.ndarray
    Kp: np.ndarray
    Vp: np.ndarray
    B: float
    delta_F: float

    def __post_init__(self):
        self.Qp, self.Kp, self.Vp = _check(self.Qp, self.Kp, self.Vp)
        if self.Qp.shape[1] != self.Kp.shape[1]:
            raise ValueError("Q and K need the same number of columns")
        for name in ("Qp", "Kp", "Vp"):
            M = getattr(self, name)
            if M.size and np.abs(M).max() > self.B:
                raise ValueError(f"{name} has an entry above B={self.B}")
        if self.delta_F <= 0:
            raise ValueError("delta_F must be positive")

    @property
    def n(self):
        return self.Qp.shape[1]

    @property
    def d(self):
        return self.Qp.shape[0]


def random_instance(n, d, B, delta_F, seed, key=()):
    rng = stream(seed, "apti", n, d, repr(B), *key)
    Q = rng.uniform(-B, B, (d, n))
    K = rng.uniform(-B, B, (d, n))
    V = rng.uniform(-B, B, (d, n))
    return AptiInstance(Q, K, V, B, delta_F)


def solve_apti(inst, oracle_cutoff=8192, max_escalations=3):
    R = inst.d * inst.B ** 2
    g = required_degree(R, inst.delta_F / 4)
    cert = {"n": inst.n, "d": inst.d, "B": inst.B, "delta_F": inst.delta_F, "R": R,
            "g_rule": g, "escalations": 0, "oracle_run": False}
    for esc in range(max_escalations + 1):
        m = feature_dim(inst.d, g)
        Zt = lowrank_attention(inst.Qp, inst.Kp, inst.Vp, g)
        cert.update({"g": g, "m": m, "m_exceeds_n": m > inst.n, "escalations": esc})
        if inst.n > oracle_cutoff:
            cert.update({"certified": False, "max_err": None, "note": "above oracle cutoff"})
            return Zt, cert
        Z = exact_attention(inst.Qp, inst.Kp, inst.Vp)
        err = float(np.abs(Zt - Z).max()) if Z.size else 0.0
        cert.update({"oracle_run": True, "max_err": err, "certified": err <= inst.delta_F})
        if err <= inst.delta_F:
            return Zt, cert
        g = max(1, 2 * g)
    raise CertificationFailure(f"error {cert['max_err']} above {inst.delta_F} after escalation: {cert}")


@dataclass
class BenchRecord:
    n: int
    d: int
    B: float
    method: str
    g: int = None
    m: int = None
    wall_time_s: float = None
    max_err: float = None
    certified: bool = None
    seed: int = 0
    status: str = "ok"

    def csv_row(self):
        def f(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, float):
                return repr(v)
            return str(v)
        return [f(getattr(self, k)) for k in CSV_FIELDS]

    def to_dict(self):
        return asdict(self)


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def time_call(fn, reps=5):
    fn()  # warm cache
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def resolve_d(d_rule, n):
    kind, val = d_rule
    if kind == "fixed":
        return int(val)
    if kind == "c_log_n":
        return max(1, math.ceil(val * math.log(n)))
    raise ValueError(f"unknown d rule {kind!r}")


def phase_bench(n_list, B_list, d_rule=("fixed", 8), delta_F=1e-3, seeds=(0,),
                oracle_cutoff=8192, reps=5, max_features=200_000, methods=("exact", "lowrank")):
    if not n_list or not B_list or not seeds:
        raise ValueError("lists must be nonempty")
    records = []
    with _single_thread():
        for n in sorted(n_list):
            for B in sorted(B_list):
                for seed in seeds:
                    d = resolve_d(d_rule, n)
                    inst = random_instance(n, d, B, delta_F, seed)
                    Z = None
                    if "exact" in methods:
                        t = time_call(lambda: exact_attention(inst.Qp, inst.Kp, inst.Vp), reps)
                        records.append(BenchRecord(n, d, B, "exact", wall_time_s=t, seed=seed))
                    if "lowrank" not in methods:
                        continue
                    g = required_degree(d * B * B, delta_F / 4)
                    m = feature_dim(d, g)
                    rec = BenchRecord(n, d, B, "lowrank", g=g, m=m, seed=seed)
                    if m > max_features:
                        rec.status = f"skipped: feature dim {m} above budget {max_features}"
                        rec.certified = False
                        records.append(rec)
                        continue
                    try:
                        Zt = lowrank_attention(inst.Qp, inst.Kp, inst.Vp, g)
                        rec.wall_time_s = time_call(
                            lambda: lowrank_attention(inst.Qp, inst.Kp, inst.Vp, g), reps)
                        if n <= oracle_cutoff:
                            Z = exact_attention(inst.Qp, inst.Kp, inst.Vp)
                            rec.max_err = float(np.abs(Zt - Z).max())
                            rec.certified = rec.max_err <= delta_F
                        else:
                            rec.status = "not certified: above oracle cutoff"
                            rec.certified = False
                    except DegreeTooSmall as e:
                        rec.status = f"failed: {e}"
                        rec.certified = False
                    records.append(rec)
    return records


def loglog_slope(ns, ts):
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(ts, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def crossover(records, n):
    """Smallest B at size n where low-rank is slower than exact or could not run."""
    exact = {r.B: r.wall_time_s for r in records if r.n == n and r.method == "exact"}
    for r in sorted((r for r in records if r.n == n and r.method == "lowrank"), key=lambda r: r.B):
        te = exact.get(r.B)
        if r.wall_time_s is None or (te is not None and r.wall_time_s > te):
            return r.B
    return None


def records_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def records_to_jsonl(records):
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)
