"""Tokenwise separation, vocabularies and contextual-mapping checks.

Sequences are d x L arrays with tokens as columns. Norms are Euclidean.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream


class SearchFailure(RuntimeError):
    def __init__(self, attempts):
        super().__init__(f"no separating unit vector found after {attempts} attempts")
        self.attempts = attempts


@dataclass(frozen=True)
class SeparationCert:
    gamma_min: float
    gamma_max: float
    delta: float
    kind: str = "full"  # full | gamma_delta | delta_only

    def __post_init__(self):
        if self.kind not in ("full", "gamma_delta", "delta_only"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not self.gamma_max > self.gamma_min >= 0:
            raise ValueError("need gamma_max > gamma_min >= 0")


@dataclass
class Vocab:
    tokens: np.ndarray          # d x |V|, unique columns in first-seen order
    membership: list            # per sequence: sorted tuple of token indices

    @property
    def size(self):
        return self.tokens.shape[1]

    @property
    def d(self):
        return self.tokens.shape[0]


def as_seq(Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] < 1:
        raise ValueError(f"bad sequence shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("non-finite entry in sequence")
    return Z


def _stack(seqs):
    seqs = [as_seq(Z) for Z in seqs]
    if not seqs:
        raise ValueError("no sequences")
    d, L = seqs[0].shape
    for Z in seqs:
        if Z.shape != (d, L):
            raise ValueError(f"dimension mismatch: {Z.shape} vs {(d, L)}")
    return seqs


def _pairwise(A, B):
    # Euclidean distances between columns of A and columns of B
    diff = A[:, :, None] - B[:, None, :]
    return np.sqrt((diff * diff).sum(axis=0))


def check_tokenwise(seqs, cert):
    """Return (ok, violation) where violation describes the first failure or None."""
    seqs = _stack(seqs)
    if cert.kind in ("full", "gamma_delta"):
        for i, Z in enumerate(seqs):
            norms = np.linalg.norm(Z, axis=0)
            for k, nk in enumerate(norms):
                lo_ok = nk > cert.gamma_min or cert.kind == "gamma_delta"
                if not (lo_ok and nk < cert.gamma_max):
                    return False, {"condition": "norm", "seq": i, "col": k, "norm": float(nk)}
    T = np.concatenate(seqs, axis=1)
    L = seqs[0].shape[1]
    D = _pairwise(T, T)
    same = np.all(T[:, :, None] == T[:, None, :], axis=0)
    bad = (~same) & (D <= cert.delta)
    if np.any(bad):
        a, b = np.argwhere(bad)[0]
        return False, {"condition": "separation", "seq": int(a // L), "col": int(a % L),
                       "other_seq": int(b // L), "other_col": int(b % L), "dist": float(D[a, b])}
    return True, None


def extract_vocab(seqs):
    seqs = [as_seq(Z) for Z in seqs]
    index = {}
    cols = []
    membership = []
    for Z in seqs:
        mine = set()
        for k in range(Z.shape[1]):
            key = Z[:, k].tobytes()
            if key not in index:
                index[key] = len(cols)
                cols.append(Z[:, k].copy())
            mine.add(index[key])
        membership.append(tuple(sorted(mine)))
    tokens = np.stack(cols, axis=1) if cols else np.zeros((seqs[0].shape[0], 0))
    return Vocab(tokens=tokens, membership=membership)


def separation_lower_factor(n_points, d):
    return math.sqrt(8.0 / (math.pi * d)) / n_points ** 2


def _unique_points(points):
    # either a d x N array (columns are points) or a collection of d-vectors
    if isinstance(points, (list, tuple, set, frozenset)):
        if not points:
            raise ValueError("empty point set")
        P = np.stack([np.asarray(p, dtype=np.float64).reshape(-1) for p in points], axis=1)
    else:
        P = np.asarray(points, dtype=np.float64)
        if P.ndim == 1:
            P = P[:, None]
    if P.shape[1] == 0:
        raise ValueError("empty point set")
    _, idx = np.unique(P.T, axis=0, return_index=True)
    return P[:, np.sort(idx)]


def is_separating(u, P):
    """Check the two-sided bound for every pair of distinct columns of P."""
    n = P.shape[1]
    if n < 2:
        return True
    factor = separation_lower_factor(n, P.shape[0])
    iu = np.triu_indices(n, 1)
    diff = (P[:, :, None] - P[:, None, :])[:, iu[0], iu[1]]
    dist = np.linalg.norm(diff, axis=0)
    proj = np.abs(u @ diff)
    return bool(np.all(proj >= factor * dist) and np.all(proj <= dist * (1 + 1e-12)))


def find_separating_unit_vector(points, rng_seed=0, max_tries=None, return_attempts=False):
    P = _unique_points(points)
    d, n = P.shape
    if max_tries is None:
        max_tries = 10 * n * n
    rng = stream(rng_seed, "separating-vector")
    for attempt in range(1, max_tries + 1):
        g = rng.standard_normal(d)
        nrm = np.linalg.norm(g)
        if nrm == 0:
            continue
        u = g / nrm
        if is_separating(u, P):
            return (u, attempt) if return_attempts else u
    raise SearchFailure(max_tries)


@dataclass
class ContextualReport:
    passed: bool
    norm_ok: bool
    gap_ok: bool
    max_norm: float
    min_gap: float
    gamma: float
    delta: float
    worst_pair: tuple = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"pass": self.passed, "norm_ok": self.norm_ok, "gap_ok": self.gap_ok,
                "max_norm": self.max_norm, "min_gap": self.min_gap, "gamma": self.gamma,
                "delta": self.delta, "worst_pair": self.worst_pair, **self.extra}


def verify_contextual(ids, seqs, gamma, delta):
    ids = _stack(ids)
    seqs = _stack(seqs)
    if len(ids) != len(seqs) or ids[0].shape[1] != seqs[0].shape[1]:
        raise ValueError("ids and seqs do not match in shape")
    N, L = len(seqs), seqs[0].shape[1]
    vocab = extract_vocab(seqs)
    Q = np.concatenate(ids, axis=1)
    T = np.concatenate(seqs, axis=1)
    max_norm = float(np.linalg.norm(Q, axis=0).max())
    D = _pairwise(Q, Q)
    same_tok = np.all(T[:, :, None] == T[:, None, :], axis=0)
    seq_of = np.repeat(np.arange(N), L)
    mem = vocab.membership
    same_vocab = np.array([[mem[a] == mem[b] for b in seq_of] for a in seq_of])
    must_differ = (~same_vocab) | (~same_tok)
    np.fill_diagonal(must_differ, False)
    if np.any(must_differ):
        gaps = np.where(must_differ, D, np.inf)
        a, b = np.unravel_index(np.argmin(gaps), gaps.shape)
        min_gap = float(gaps[a, b])
        worst = (int(a // L), int(a % L), int(b // L), int(b % L))
    else:
        min_gap, worst = math.inf, None
    norm_ok = max_norm < gamma
    gap_ok = min_gap > delta
    return ContextualReport(passed=norm_ok and gap_ok, norm_ok=norm_ok, gap_ok=gap_ok,
                            max_norm=max_norm, min_gap=min_gap, gamma=float(gamma),
                            delta=float(delta), worst_pair=worst)
