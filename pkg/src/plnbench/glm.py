"""l1-penalized Poisson regression with a regularization path and CV selection.

The objective for one target is ``(1/N) * NLL(b0, beta) + lam * |beta|_1`` with an
unpenalized intercept and ``log(s_i)`` as offset. Predictors are used on their
native ``ln(1 + y)`` scale, without standardization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import _kernels
from .data import CountMatrix
from .errors import ConvergenceError, ValidationError
from .metrics import FEATURELESS_EPS, CvPlan, make_folds, poisson_deviance

DEFAULT_N_LAMBDA = 50
DEFAULT_LAMBDA_MIN_RATIO = 0.01
MAX_NEWTON = 100
MAX_SWEEPS = 10_000
CD_TOL = 1e-12


@dataclass
class PoissonLassoFit:
    intercept: float
    coefs: np.ndarray
    lam: float
    converged: bool = True
    degenerate: bool = False

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.coefs))


@dataclass
class LambdaPath:
    lambdas: np.ndarray
    fits: List[PoissonLassoFit]
    degenerate: bool = False
    cv_mean: Optional[np.ndarray] = None
    cv_se: Optional[np.ndarray] = None
    lambda_min: Optional[float] = None
    lambda_1se: Optional[float] = None

    def fit_at(self, lam: float) -> PoissonLassoFit:
        i = int(np.argmin(np.abs(self.lambdas - lam)))
        return self.fits[i]

    @property
    def n_nonzero(self) -> List[int]:
        return [f.n_nonzero for f in self.fits]

    def to_dict(self) -> dict:
        def _list(a):
            return None if a is None else [float(v) for v in a]

        return {
            "lambdas": _list(self.lambdas),
            "n_nonzero": self.n_nonzero,
            "converged": [bool(f.converged) for f in self.fits],
            "degenerate": self.degenerate,
            "cv_mean": _list(self.cv_mean),
            "cv_se": _list(self.cv_se),
            "lambda_min": self.lambda_min,
            "lambda_1se": self.lambda_1se,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def design_from_counts(m: CountMatrix, target: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predictors ``ln(1 + Y_ik)`` for ``k != target``, response column ``target``."""
    d = m.n_taxa
    if not 0 <= target < d:
        raise ValidationError(f"target {target} out of range for {d} taxa")
    keep = [k for k in range(d) if k != target]
    X = np.log1p(m.counts[:, keep])
    y = m.counts[:, target].copy()
    return X, y, m.offsets.copy()


def _as_arrays(X, y, offsets):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    offsets = np.ascontiguousarray(offsets, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or y.shape != offsets.shape:
        raise ValidationError("X, y and offsets are not conformable")
    if np.any(~(offsets > 0)):
        raise ValidationError("offsets must be positive")
    return X, y, offsets


def null_intercept(y, offsets) -> float:
    return float(np.log(np.sum(y) / np.sum(offsets)))


def lambda_max(X, y, offsets) -> Tuple[float, bool]:
    """Smallest penalty at which every slope is zero; ``(0.0, True)`` for an all-zero target."""
    X, y, offsets = _as_arrays(X, y, offsets)
    if np.sum(y) <= 0:
        return 0.0, True
    mu_bar = offsets * np.exp(null_intercept(y, offsets))
    if X.shape[1] == 0:
        return 0.0, False
    return float(np.max(np.abs(X.T @ (y - mu_bar))) / X.shape[0]), False


def penalized_objective(X, y, offsets, lam, intercept, coefs) -> float:
    X, y, offsets = _as_arrays(X, y, offsets)
    return float(_kernels.poisson_objective(X, y, np.log(offsets), float(lam),
                                            float(intercept), np.asarray(coefs, dtype=float)))


def kkt_violation(X, y, offsets, fit: PoissonLassoFit) -> float:
    """Largest violation of the lasso optimality conditions at ``fit``.

    Zero slopes need ``|g_k| <= lam``; nonzero slopes need ``g_k = -sign(b_k) lam``,
    where ``g`` is the gradient of the mean negative log-likelihood. The intercept
    gradient must vanish.
    """
    X, y, offsets = _as_arrays(X, y, offsets)
    mu = offsets * np.exp(fit.intercept + X @ fit.coefs)
    grad = X.T @ (mu - y) / X.shape[0]
    g0 = abs(np.mean(mu - y))
    zero = fit.coefs == 0
    viol_zero = np.max(np.abs(grad[zero]) - fit.lam, initial=0.0)
    viol_nz = np.max(np.abs(grad[~zero] + np.sign(fit.coefs[~zero]) * fit.lam), initial=0.0)
    return float(max(viol_zero, viol_nz, g0))


def _degenerate_fit(p: int, lam: float = 0.0) -> PoissonLassoFit:
    return PoissonLassoFit(np.log(FEATURELESS_EPS), np.zeros(p), lam, True, True)


def fit_lasso(X, y, offsets, lam: float, intercept: Optional[float] = None,
              coefs: Optional[np.ndarray] = None, return_trace: bool = False):
    """Solve a single penalty value, optionally warm-started.

    With ``return_trace`` the per-iteration penalized objective is returned too.
    """
    X, y, offsets = _as_arrays(X, y, offsets)
    p = X.shape[1]
    if np.sum(y) <= 0:
        fit = _degenerate_fit(p, lam)
        return (fit, np.array([])) if return_trace else fit
    b0 = null_intercept(y, offsets) if intercept is None else float(intercept)
    beta = np.zeros(p) if coefs is None else np.array(coefs, dtype=float)
    trace = np.full(MAX_NEWTON + 1, np.nan)
    b0, ok, it = _kernels.poisson_lasso(X, y, np.log(offsets), float(lam), b0, beta,
                                        MAX_NEWTON, MAX_SWEEPS, CD_TOL, trace)
    fit = PoissonLassoFit(float(b0), beta, float(lam), bool(ok))
    if return_trace:
        return fit, trace[: it + 1]
    return fit


def lambda_grid(lam_max: float, n_lambda: int = DEFAULT_N_LAMBDA,
                lambda_min_ratio: float = DEFAULT_LAMBDA_MIN_RATIO) -> np.ndarray:
    if n_lambda == 1:
        return np.array([lam_max])
    return np.exp(np.linspace(np.log(lam_max), np.log(lam_max * lambda_min_ratio), n_lambda))


def fit_path(X, y, offsets, n_lambda: int = DEFAULT_N_LAMBDA,
             lambda_min_ratio: float = DEFAULT_LAMBDA_MIN_RATIO,
             lambdas: Optional[np.ndarray] = None, warm_start: bool = True) -> LambdaPath:
    """Solve the lasso along a decreasing log-spaced penalty grid.

    The default grid starts at :func:`lambda_max`. An all-zero target yields a
    degenerate single-point path whose predictions equal the featureless floor.
    """
    X, y, offsets = _as_arrays(X, y, offsets)
    if X.shape[0] < 2:
        raise ValidationError("need at least 2 samples")
    p = X.shape[1]
    lam_max, degenerate = lambda_max(X, y, offsets)
    if degenerate:
        grid = np.array([0.0]) if lambdas is None else np.asarray(lambdas, dtype=float)
        return LambdaPath(grid, [_degenerate_fit(p, l) for l in grid], degenerate=True)
    if lambdas is None:
        if lam_max == 0.0:
            # no predictor moves the fit: intercept-only path at a single point
            lambdas = np.array([0.0])
        else:
            lambdas = lambda_grid(lam_max, n_lambda, lambda_min_ratio)
    lambdas = np.asarray(lambdas, dtype=float)
    b0s, coefs, conv = _kernels.poisson_lasso_path(
        X, y, np.log(offsets), lambdas, null_intercept(y, offsets), warm_start,
        MAX_NEWTON, MAX_SWEEPS, CD_TOL)
    fits = [PoissonLassoFit(float(b0s[l]), coefs[l].copy(), float(lambdas[l]), bool(conv[l]))
            for l in range(lambdas.size)]
    return LambdaPath(lambdas, fits)


def predict_glm(fit: PoissonLassoFit, x, offset) -> np.ndarray:
    """``offset * exp(intercept + <coefs, x>)``; accepts one row or a matrix of rows."""
    x = np.asarray(x, dtype=float)
    offset = np.asarray(offset, dtype=float)
    if x.shape[-1] != fit.coefs.shape[0]:
        raise ValidationError(
            f"predictor length {x.shape[-1]} does not match {fit.coefs.shape[0]} coefficients")
    if fit.degenerate:
        return np.full(np.broadcast(offset, x[..., 0]).shape, FEATURELESS_EPS)
    with np.errstate(over="ignore"):
        out = offset * np.exp(fit.intercept + x @ fit.coefs)
    if np.any(~np.isfinite(out)):
        raise ConvergenceError("non-finite Poisson prediction")
    return out


def one_se_rule(lambdas, cv_mean, cv_se) -> Tuple[float, float]:
    """Return (lambda_min, lambda_1se); ties at the minimum go to the larger penalty."""
    lambdas = np.asarray(lambdas)
    cv_mean = np.asarray(cv_mean)
    i_min = int(np.argmin(cv_mean))  # first index = largest lambda on ties
    bound = cv_mean[i_min] + cv_se[i_min]
    i_1se = int(np.flatnonzero(cv_mean <= bound)[0])
    return float(lambdas[i_min]), float(lambdas[i_1se])


def cv_select(X, y, offsets, K: int = 3, seed: int = 0, plan: Optional[CvPlan] = None,
              n_lambda: int = DEFAULT_N_LAMBDA,
              lambda_min_ratio: float = DEFAULT_LAMBDA_MIN_RATIO) -> LambdaPath:
    """Fit the full path and choose a penalty by K-fold held-out Poisson deviance.

    The penalty grid is computed once on all rows and shared by every fold. A
    precomputed ``plan`` overrides ``K`` and ``seed`` so that folds can be
    shared across target taxa.
    """
    X, y, offsets = _as_arrays(X, y, offsets)
    n = X.shape[0]
    if plan is None:
        if n < K:
            raise ValidationError(f"fewer samples than folds (n={n}, K={K})")
        plan = make_folds(n, K, seed)
    elif plan.n_samples != n:
        raise ValidationError("fold plan does not match the number of samples")
    full = fit_path(X, y, offsets, n_lambda, lambda_min_ratio)
    grid = full.lambdas
    dev = np.empty((plan.k, grid.size))
    for f, (tr, te) in enumerate(plan.splits()):
        sub = fit_path(X[tr], y[tr], offsets[tr], lambdas=grid)
        for l, fit in enumerate(sub.fits):
            dev[f, l] = poisson_deviance(y[te], predict_glm(fit, X[te], offsets[te]))
    cv_mean = dev.mean(axis=0)
    cv_se = dev.std(axis=0, ddof=1) / np.sqrt(plan.k)
    full.cv_mean = cv_mean
    full.cv_se = cv_se
    full.lambda_min, full.lambda_1se = one_se_rule(grid, cv_mean, cv_se)
    return full
