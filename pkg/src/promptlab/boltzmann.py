"""Boltzmann operator, softmax and the partition / entropy pair.

All exponentials go through max-subtraction, logits in the constructed
heads reach magnitudes where a naive exp overflows.
"""
import math
from dataclasses import dataclass, field

import numpy as np


class PreconditionError(ValueError):
    """Raised when an input violates a documented precondition."""


def _as_vec(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        z = z.reshape(-1)
    if z.size == 0:
        raise ValueError("empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite entry")
    return z


def softmax(z):
    z = _as_vec(z)
    e = np.exp(z - z.max())
    return e / e.sum()


def log_partition(z):
    z = _as_vec(z)
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()))


def partition_entropy(z):
    """Return (log partition, Gibbs entropy of softmax(z))."""
    z = _as_vec(z)
    lz = log_partition(z)
    logp = z - lz
    p = np.exp(logp)
    s = float(-(p * logp).sum())
    return lz, max(s, 0.0)


def boltz(z):
    z = _as_vec(z)
    p = softmax(z)
    b = float(z @ p)
    # rounding can push the weighted mean a few ulps outside the range
    return min(max(b, float(z.min())), float(z.max()))


def boltz_grad(z):
    z = _as_vec(z)
    lz, s = partition_entropy(z)
    logp = z - lz
    return np.exp(logp) * (1.0 + logp + s)


def boltz_second_deriv(z, i):
    z = _as_vec(z)
    if not 0 <= i < z.size:
        raise IndexError(f"index {i} out of range for length {z.size}")
    lz, s = partition_entropy(z)
    p = math.exp(z[i] - lz)
    return p * ((1.0 - 2.0 * p) * (z[i] - lz + s + 1.0) + 1.0)


def fd_grad(f, z, h=1e-6):
    z = _as_vec(z)
    g = np.empty_like(z)
    for i in range(z.size):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2 * h)
    return g


def fd_second(f, z, i, h=1e-4):
    z = _as_vec(z)
    zp = z.copy()
    zm = z.copy()
    zp[i] += h
    zm[i] -= h
    return (f(zp) - 2 * f(z) + f(zm)) / (h * h)


def separation_log_bound(n, gamma):
    """log of ln^2(n) e^{-2 gamma}."""
    return 2 * math.log(math.log(n)) - 2 * gamma


@dataclass
class SeparationReport:
    passed: bool
    n: int
    gamma: float
    delta: float
    values: list
    min_gap: float
    log_min_gap: float
    bound: float
    log_bound: float
    vacuous: bool
    max_abs: float
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {
            "pass": self.passed,
            "n": self.n,
            "gamma": self.gamma,
            "delta": self.delta,
            "values": self.values,
            "min_gap": self.min_gap,
            "log_min_gap": self.log_min_gap,
            "bound": self.bound,
            "log_bound": self.log_bound,
            "vacuous": self.vacuous,
            "max_abs": self.max_abs,
            "failures": self.failures,
        }


def validate_separated(vectors, gamma, delta, cross=True):
    """Check the preconditions of check_boltz_separation.

    Raises PreconditionError naming the first failing condition.
    With cross=False only per-vector separation is enforced.
    """
    if len(vectors) < 2:
        raise PreconditionError("need at least two vectors")
    vecs = [_as_vec(v) for v in vectors]
    n = vecs[0].size
    if n < 2:
        raise PreconditionError("vector length must be at least 2")
    for k, v in enumerate(vecs):
        if v.size != n:
            raise PreconditionError(f"vector {k} has length {v.size}, expected {n}")
    if delta < 4 * math.log(n):
        raise PreconditionError(f"delta={delta} below 4 ln n={4 * math.log(n):.6g}")
    for k, v in enumerate(vecs):
        if np.max(np.abs(v)) >= gamma:
            raise PreconditionError(f"vector {k} has an entry with |z| >= gamma")
        s = np.sort(v)
        d = np.diff(s)
        if np.any(d == 0):
            raise PreconditionError(f"vector {k} has a duplicate entry")
        if np.any(d <= delta):
            raise PreconditionError(f"vector {k} entries not delta-separated")
    for a in range(len(vecs)):
        for b in range(a + 1, len(vecs)):
            if np.array_equal(np.sort(vecs[a]), np.sort(vecs[b])):
                raise PreconditionError(f"vectors {a} and {b}: no differing entry")
            if cross:
                diff = np.abs(vecs[a][:, None] - vecs[b][None, :])
                bad = (diff > 0) & (diff <= delta)
                if np.any(bad):
                    raise PreconditionError(
                        f"vectors {a} and {b}: entries neither equal nor delta-separated")
    return vecs


def check_boltz_separation(vectors, gamma, delta, cross=True):
    vecs = validate_separated(vectors, gamma, delta, cross=cross)
    n = vecs[0].size
    vals = [boltz(v) for v in vecs]
    log_bound = separation_log_bound(n, gamma)
    bound = math.exp(log_bound)
    vacuous = log_bound < math.log(1e-300)
    failures = []
    max_abs = max(abs(v) for v in vals)
    for k, v in enumerate(vals):
        if abs(v) > gamma:
            failures.append({"kind": "range", "i": k, "value": v})
    min_gap = math.inf
    for a in range(len(vals)):
        for b in range(a + 1, len(vals)):
            gap = abs(vals[a] - vals[b])
            min_gap = min(min_gap, gap)
            lg = math.log(gap) if gap > 0 else -math.inf
            if not lg > log_bound and not vacuous:
                failures.append({"kind": "gap", "i": a, "j": b, "gap": gap})
            elif vacuous and gap == 0:
                failures.append({"kind": "gap", "i": a, "j": b, "gap": gap})
    log_min_gap = math.log(min_gap) if min_gap > 0 else -math.inf
    return SeparationReport(
        passed=not failures, n=n, gamma=float(gamma), delta=float(delta),
        values=vals, min_gap=min_gap, log_min_gap=log_min_gap, bound=bound,
        log_bound=log_bound, vacuous=vacuous, max_abs=max_abs, failures=failures)


def random_separated_suite(rng, n, n_vectors, delta, gamma):
    """Draw vectors whose entries come from one shared delta-spaced pool.

    Returns None when no suite fits inside (-gamma, gamma).
    """
    spacing = delta * (1.0 + 0.25 * rng.random()) + 1e-9
    span = 2 * gamma * (1 - 1e-6)
    pool_size = int(math.floor(span / spacing)) + 1
    if pool_size < n:
        return None
    width = (pool_size - 1) * spacing
    lo = -width / 2 + (rng.random() - 0.5) * (span - width) * 0.98
    pool = lo + spacing * np.arange(pool_size)
    pool = pool[np.abs(pool) < gamma]
    if pool.size < n:
        return None
    max_vectors = math.comb(pool.size, n)
    count = min(n_vectors, max_vectors)
    chosen = set()
    out = []
    while len(out) < count:
        idx = tuple(sorted(rng.choice(pool.size, size=n, replace=False)))
        if idx in chosen:
            continue
        chosen.add(idx)
        v = pool[list(idx)]
        out.append(rng.permutation(v))
    return out
