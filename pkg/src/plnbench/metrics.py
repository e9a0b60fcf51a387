"""Held-out scoring, fold plans and paired statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .errors import ValidationError

FEATURELESS_EPS = 1e-8
EXACT_WILCOXON_MAX_N = 25


@dataclass(frozen=True)
class CvPlan:
    n_samples: int
    k: int
    assignment: np.ndarray
    seed: int

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def splits(self):
        for f in range(self.k):
            yield self.train_index(f), self.test_index(f)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for a (seed, key, ...) stream."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_folds(n: int, k: int, seed: int) -> CvPlan:
    """Deal a seeded permutation of ``range(n)`` round-robin into ``k`` folds."""
    if k < 2:
        raise ValidationError(f"need at least 2 folds (got k={k})")
    if k > n:
        raise ValidationError(f"fewer samples than folds (n={n}, k={k})")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[perm] = np.arange(n) % k
    return CvPlan(n_samples=n, k=k, assignment=assignment, seed=seed)


def poisson_deviance(y, mu) -> float:
    """Mean Poisson deviance ``(2/m) * sum(y log(y/mu) - (y - mu))``, with 0 log 0 = 0."""
    y = np.asarray(y, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    if y.shape != mu.shape:
        raise ValidationError(f"length mismatch: {y.size} observations, {mu.size} means")
    if y.size == 0:
        raise ValidationError("deviance needs at least one observation")
    if np.any(~(mu > 0)):
        raise ValidationError("predicted means must be strictly positive")
    if np.any(y < 0):
        raise ValidationError("observations must be nonnegative")
    pos = y > 0
    term = mu - y
    term[pos] += y[pos] * np.log(y[pos] / mu[pos])
    return float(2.0 * term.sum() / y.size)


def bregman_poisson(y, mu) -> np.ndarray:
    """Pointwise Bregman divergence of phi(u) = u log u - u (deviance / 2)."""
    y, mu = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(mu, dtype=float))
    out = mu - y
    pos = y > 0
    out[pos] += y[pos] * np.log(y[pos] / mu[pos])
    return out


def featureless_predict(train_y, train_offsets=None, test_offsets=None, n_test=None) -> np.ndarray:
    """Training-mean predictor, ignoring offsets.

    The number of predictions follows ``test_offsets`` (or ``n_test``).
    """
    train_y = np.asarray(train_y, dtype=float)
    if train_y.size == 0:
        raise ValidationError("featureless baseline needs training data")
    if test_offsets is not None:
        n_test = len(test_offsets)
    if n_test is None:
        raise ValidationError("pass test_offsets or n_test")
    value = max(float(train_y.mean()), FEATURELESS_EPS)
    return np.full(int(n_test), value)


def _signed_rank_null(ranks2: np.ndarray) -> np.ndarray:
    """Null pmf of the doubled positive-rank sum, by subset-sum convolution."""
    total = int(ranks2.sum())
    pmf = np.zeros(total + 1)
    pmf[0] = 1.0
    for r in ranks2.astype(int):
        shifted = np.zeros_like(pmf)
        shifted[r:] = pmf[: total + 1 - r]
        pmf = 0.5 * (pmf + shifted)
    return pmf


def paired_wilcoxon(diffs: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired differences.

    Zeros are dropped and tied magnitudes get mid-ranks. The null distribution
    is enumerated exactly for up to 25 nonzero differences; above that a normal
    approximation with tie-corrected variance and continuity correction is used.
    """
    d = np.asarray(diffs, dtype=float)
    if d.size and np.all(d == 0):
        return 1.0
    d = d[d != 0]
    n = d.size
    if n < 3:
        raise ValidationError(f"need at least 3 nonzero differences (got {n})")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(int)
        pmf = _signed_rank_null(ranks2)
        w2 = int(round(2 * w_plus))
        lower = pmf[: w2 + 1].sum()
        upper = pmf[w2:].sum()
        return float(min(1.0, 2.0 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (counts ** 3 - counts).sum() / 48.0
    if var <= 0:
        return 1.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(max(z, 0.0))))


def bh_adjust(pvals: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvals, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any(~((p >= 0) & (p <= 1))):
        raise ValidationError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    # q_(i) >= p_(i) holds exactly; the clip undoes rounding in p * m / m
    out[order] = np.clip(adjusted_sorted, p[order], 1.0)
    return out
