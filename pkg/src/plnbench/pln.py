"""Poisson log-normal model: variational fit, conditional prediction and sampling.

Model: ``Y_ij | Z_i ~ Poisson(s_i exp(eta_j + Z_ij))`` with ``Z_i ~ N(0, Sigma)``.
The variational posterior of each ``Z_i`` is a diagonal Gaussian with means
``M[i]`` and variances ``V[i]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky, solve_triangular
from scipy.special import gammaln

from .data import CountMatrix
from .errors import ConvergenceError, ValidationError

COUNT_CAP = 1e6
# intercept used for an all-zero taxon, where the optimum runs off to -inf
ETA_FLOOR = -30.0
_LOG_CLIP = 700.0
_MAX_JITTER_TRIES = 12


@dataclass(frozen=True)
class PlnFitOptions:
    max_iters: int = 500
    rel_tol: float = 1e-6
    jitter: float = 1e-8
    # recorded for provenance; the initializer itself is deterministic
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValidationError("rel_tol must be > 0")
        if self.jitter < 0:
            raise ValidationError("jitter must be >= 0")


@dataclass
class PlnModel:
    eta: np.ndarray
    sigma: np.ndarray
    var_means: np.ndarray
    var_vars: np.ndarray
    elbo_trace: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_taxa(self) -> int:
        return self.eta.shape[0]

    def to_dict(self) -> dict:
        n, d = self.var_means.shape
        return {
            "n_samples": n,
            "n_taxa": d,
            "eta": self.eta.tolist(),
            "sigma": self.sigma.ravel().tolist(),
            "elbo_trace": [float(v) for v in self.elbo_trace],
            "converged": self.converged,
            "var_means": self.var_means.ravel().tolist(),
            "var_vars": self.var_vars.ravel().tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PlnModel":
        doc = json.loads(text)
        n, d = doc["n_samples"], doc["n_taxa"]
        means = np.asarray(doc.get("var_means", []), dtype=float)
        vars_ = np.asarray(doc.get("var_vars", []), dtype=float)
        return cls(
            eta=np.asarray(doc["eta"], dtype=float),
            sigma=np.asarray(doc["sigma"], dtype=float).reshape(d, d),
            var_means=means.reshape(n, d) if means.size else np.zeros((0, d)),
            var_vars=vars_.reshape(n, d) if vars_.size else np.zeros((0, d)),
            elbo_trace=list(doc.get("elbo_trace", [])),
            converged=bool(doc.get("converged", False)),
        )


def _chol(sigma: np.ndarray, jitter: float) -> Tuple[np.ndarray, np.ndarray]:
    """Cholesky factor of ``sigma`` after adding the smallest ridge that works."""
    d = sigma.shape[0]
    try:
        return cholesky(sigma, lower=True), sigma
    except LinAlgError:
        pass
    if jitter > 0:
        ridge = jitter
        for _ in range(_MAX_JITTER_TRIES):
            cand = sigma + ridge * np.eye(d)
            try:
                return cholesky(cand, lower=True), cand
            except LinAlgError:
                ridge *= 10.0
    raise ConvergenceError("latent covariance is not positive definite after jitter")


def _precision(sigma: np.ndarray, jitter: float = 0.0):
    L, sigma = _chol(sigma, jitter)
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    omega = Linv.T @ Linv
    logdet_omega = -2.0 * np.sum(np.log(np.diag(L)))
    return sigma, omega, logdet_omega


def _elbo_value(y, log_s, eta, M, V, omega, logdet_omega, lgy) -> float:
    n, d = M.shape
    lin = log_s[:, None] + eta[None, :] + M
    with np.errstate(over="ignore"):
        A = np.exp(np.minimum(lin + 0.5 * V, _LOG_CLIP))
    data_term = np.sum(y * lin - A - lgy)
    prior = (n * logdet_omega - np.sum((M @ omega) * M)
             - np.diag(omega) @ V.sum(axis=0) + np.sum(np.log(V)) + n * d)
    return float(data_term + 0.5 * prior)


def elbo(model: PlnModel, m: CountMatrix, sigma: Optional[np.ndarray] = None) -> float:
    """Evidence lower bound of ``model`` on the data ``m``.

    ``sigma`` overrides the model covariance, which lets a caller probe the
    bound along the covariance with the variational parameters held fixed.
    """
    y = m.counts
    if model.var_means.shape != y.shape or model.eta.shape != (y.shape[1],):
        raise ValidationError(
            f"model dimensions {model.var_means.shape} do not match data {y.shape}")
    sigma = model.sigma if sigma is None else np.asarray(sigma, dtype=float)
    _, omega, logdet = _precision(sigma)
    return _elbo_value(y, np.log(m.offsets), model.eta, model.var_means, model.var_vars,
                       omega, logdet, gammaln(y + 1.0))


def elbo_gradients(y, offsets, eta, M, log_V, sigma):
    """Gradients of the bound w.r.t. ``eta``, ``M`` and ``log V`` at fixed ``sigma``."""
    _, omega, _ = _precision(np.asarray(sigma, dtype=float))
    V = np.exp(log_V)
    A = offsets[:, None] * np.exp(eta[None, :] + M + 0.5 * V)
    g_eta = np.sum(y - A, axis=0)
    g_M = y - A - M @ omega
    g_logV = 0.5 * (1.0 - V * (A + np.diag(omega)[None, :]))
    return g_eta, g_M, g_logV


def optimal_covariance(M: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Closed-form maximizer ``(1/N) sum_i (m_i m_i' + diag(v_i))``."""
    n = M.shape[0]
    S = (M.T @ M + np.diag(V.sum(axis=0))) / n
    return 0.5 * (S + S.T)


def _solve_variances(a: np.ndarray, omega_diag: np.ndarray, iters: int = 64) -> np.ndarray:
    """Maximize ``-a exp(v/2) - w v / 2 + log(v) / 2`` over ``v > 0`` entrywise.

    The stationarity condition ``1/v = a exp(v/2) + w`` has a single root in
    ``[1 / (a exp(1/(2w)) + w), 1/w]``; it is bracketed and bisected in log space.
    """
    w = np.broadcast_to(omega_diag, a.shape)
    hi = 1.0 / w
    with np.errstate(over="ignore"):
        lo = 1.0 / (a * np.exp(np.minimum(0.5 * hi, _LOG_CLIP)) + w)
    llo, lhi = np.log(lo), np.log(hi)
    for _ in range(iters):
        mid = 0.5 * (llo + lhi)
        v = np.exp(mid)
        with np.errstate(over="ignore"):
            g = 1.0 / v - a * np.exp(np.minimum(0.5 * v, _LOG_CLIP)) - w
        pos = g > 0
        llo = np.where(pos, mid, llo)
        lhi = np.where(pos, lhi, mid)
    return np.exp(0.5 * (llo + lhi))


def _sample_objective(y, base, M, V, omega):
    """Per-sample part of the bound that depends on the means (``base = log s + eta``)."""
    lin = base + M
    with np.errstate(over="ignore"):
        A = np.exp(np.minimum(lin + 0.5 * V, _LOG_CLIP))
    return np.sum(y * M - A, axis=1) - 0.5 * np.sum((M @ omega) * M, axis=1)


def _newton_means(y, base, M, V, omega, max_halvings: int = 30) -> np.ndarray:
    """One damped Newton ascent step on every row of ``M``.

    Rows are independent given the other blocks, so each row backtracks on its
    own objective and never moves downhill.
    """
    with np.errstate(over="ignore"):
        A = np.exp(np.minimum(base + M + 0.5 * V, _LOG_CLIP))
    grad = y - A - M @ omega
    H = omega[None, :, :] + A[:, :, None] * np.eye(M.shape[1])[None, :, :]
    step = np.linalg.solve(H, grad[:, :, None])[:, :, 0]
    f0 = _sample_objective(y, base, M, V, omega)
    t = np.ones(M.shape[0])
    out = M.copy()
    pending = np.ones(M.shape[0], dtype=bool)
    for _ in range(max_halvings):
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            break
        cand = M[idx] + t[idx, None] * step[idx]
        f1 = _sample_objective(y[idx], base[idx], cand, V[idx], omega)
        ok = f1 >= f0[idx]
        out[idx[ok]] = cand[ok]
        pending[idx[ok]] = False
        t[idx[~ok]] *= 0.5
    return out


def _init_state(y, s):
    ratio = (y + 0.5) / s[:, None]
    logr = np.log(ratio)
    center = logr.mean(axis=0)
    M = logr - center
    positive = y.sum(axis=0) > 0
    M[:, ~positive] = 0.0
    eta = np.full(y.shape[1], ETA_FLOOR)
    eta[positive] = np.log(y[:, positive].sum(axis=0) / s.sum())
    V = np.full_like(M, 0.1)
    return eta, M, V, positive


def fit_pln(m: CountMatrix, opts: Optional[PlnFitOptions] = None) -> PlnModel:
    """Fit by block coordinate ascent on the evidence lower bound.

    Each outer iteration applies, in order, the closed-form covariance update,
    the closed-form intercept update, one backtracked Newton step on the
    variational means and the exact per-coordinate variance update. Every block
    is an ascent step, so the recorded bound is nondecreasing.
    """
    opts = opts or PlnFitOptions()
    y = m.counts
    if y.max(initial=0.0) > COUNT_CAP:
        raise ConvergenceError(
            f"counts above {COUNT_CAP:g} overflow the Poisson term; "
            "apply the log1p_round transform or rescale the table")
    s = m.offsets
    log_s = np.log(s)
    lgy = gammaln(y + 1.0)
    eta, M, V, positive = _init_state(y, s)
    trace: List[float] = []
    converged = False
    sigma = optimal_covariance(M, V)
    for _ in range(opts.max_iters):
        sigma, omega, logdet = _precision(optimal_covariance(M, V), opts.jitter)
        ev = np.exp(M + 0.5 * V)
        denom = s @ ev
        eta = eta.copy()
        eta[positive] = np.log(y[:, positive].sum(axis=0) / denom[positive])
        base = log_s[:, None] + eta[None, :]
        M = _newton_means(y, base, M, V, omega)
        a = np.exp(np.minimum(base + M, _LOG_CLIP))
        V = _solve_variances(a, np.diag(omega)[None, :])
        value = _elbo_value(y, log_s, eta, M, V, omega, logdet, lgy)
        if not np.isfinite(value):
            raise ConvergenceError(
                "non-finite ELBO; counts are too large for the latent scale, "
                "use the log1p_round transform or smaller counts")
        trace.append(value)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= opts.rel_tol * abs(trace[-1]):
            converged = True
            break
    return PlnModel(eta=eta, sigma=sigma, var_means=M, var_vars=V,
                    elbo_trace=trace, converged=converged)


def shrink_covariance(sigma, alpha: float) -> np.ndarray:
    """Scale the off-diagonal entries of ``sigma`` by ``1 - alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1] (got {alpha})")
    sigma = np.asarray(sigma, dtype=float)
    d = np.diag(np.diag(sigma))
    out = (1.0 - alpha) * (sigma - d) + d
    return 0.5 * (out + out.T)


def infer_latent(eta, sigma, y, offsets, max_iter: int = 200, tol: float = 1e-10,
                 jitter: float = 1e-8) -> Tuple[np.ndarray, np.ndarray]:
    """Variational posterior of new samples with ``eta`` and ``sigma`` frozen.

    ``y`` holds the observed coordinates only (n x q); ``eta`` and ``sigma``
    must be restricted to the same coordinates.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    s = np.asarray(offsets, dtype=float).reshape(-1)
    eta = np.asarray(eta, dtype=float)
    _, omega, _ = _precision(np.asarray(sigma, dtype=float), jitter)
    base = np.log(s)[:, None] + eta[None, :]
    M = np.clip(np.log((y + 0.5)) - base, -10.0, 10.0)
    V = np.broadcast_to(1.0 / np.diag(omega), y.shape).copy()
    prev = None
    for _ in range(max_iter):
        M = _newton_means(y, base, M, V, omega)
        a = np.exp(np.minimum(base + M, _LOG_CLIP))
        V = _solve_variances(a, np.diag(omega)[None, :])
        obj = float(np.sum(_sample_objective(y, base, M, V, omega))
                    + 0.5 * np.sum(np.log(V)) - 0.5 * np.diag(omega) @ V.sum(axis=0))
        if prev is not None and abs(obj - prev) <= tol * max(1.0, abs(obj)):
            break
        prev = obj
    return M, V


def condition_latent(sigma, target: int, m_obs, alpha: float = 0.0, jitter: float = 1e-8):
    """Gaussian conditional mean and variance of coordinate ``target``.

    ``m_obs`` has one row per sample over the other coordinates in order.
    Conditioning uses the ``alpha``-shrunk covariance.
    """
    sa = shrink_covariance(sigma, alpha)
    d = sa.shape[0]
    rest = [k for k in range(d) if k != target]
    s_rr = sa[np.ix_(rest, rest)]
    s_jr = sa[target, rest]
    try:
        factor = cho_factor(s_rr, lower=True)
    except LinAlgError:
        try:
            factor = cho_factor(s_rr + jitter * np.eye(len(rest)), lower=True)
        except LinAlgError:
            raise ConvergenceError("conditioning block is singular after jitter") from None
    k = cho_solve(factor, s_jr)
    m_obs = np.atleast_2d(np.asarray(m_obs, dtype=float))
    cond_mean = m_obs @ k
    cond_var = float(sa[target, target] - s_jr @ k)
    # Schur complement of an SPD matrix; clamp rounding only
    cond_var = min(max(cond_var, np.finfo(float).tiny), float(sa[target, target]))
    return cond_mean, cond_var


def predict_from_latent(model: PlnModel, target: int, m_obs, offsets, alpha: float = 0.0):
    cond_mean, cond_var = condition_latent(model.sigma, target, m_obs, alpha)
    s = np.asarray(offsets, dtype=float).reshape(-1)
    return s * np.exp(model.eta[target] + cond_mean + 0.5 * cond_var)


def _restricted(model: PlnModel, target: int):
    d = model.n_taxa
    rest = np.array([k for k in range(d) if k != target], dtype=int)
    return rest, model.eta[rest], model.sigma[np.ix_(rest, rest)]


def conditional_predict(model: PlnModel, counts, offsets, target: int,
                        alpha: float = 0.0) -> np.ndarray:
    """Predicted mean of taxon ``target`` for new samples.

    ``counts`` has full rows of length D (one sample or a matrix); the entry in
    column ``target`` is never read.
    """
    if not 0 <= target < model.n_taxa:
        raise ValidationError(f"target {target} out of range")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1] (got {alpha})")
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    if counts.shape[1] != model.n_taxa:
        raise ValidationError("rows must have one entry per taxon")
    rest, eta_r, sigma_r = _restricted(model, target)
    M, _ = infer_latent(eta_r, sigma_r, counts[:, rest], offsets)
    return predict_from_latent(model, target, M, offsets, alpha)


def loto_predictions(model: PlnModel, counts, offsets, alphas: Sequence[float]) -> np.ndarray:
    """Held-out means for every target taxon and every shrinkage level.

    Returns an array of shape ``(len(alphas), n, D)``. The latent inference for
    each target does not depend on the shrinkage level, so it runs once.
    """
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    n, d = counts.shape
    out = np.empty((len(alphas), n, d))
    for j in range(d):
        rest, eta_r, sigma_r = _restricted(model, j)
        M, _ = infer_latent(eta_r, sigma_r, counts[:, rest], offsets)
        for a, alpha in enumerate(alphas):
            out[a, :, j] = predict_from_latent(model, j, M, offsets, alpha)
    return out


def sample_pln(eta, sigma, offsets, seed: int) -> CountMatrix:
    """Draw ``Z_i ~ N(0, sigma)`` by Cholesky, then Poisson counts."""
    eta = np.asarray(eta, dtype=float).reshape(-1)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    offsets = np.asarray(offsets, dtype=float).reshape(-1)
    d = eta.size
    if sigma.shape != (d, d):
        raise ValidationError(f"sigma must be {d}x{d}")
    if not np.allclose(sigma, sigma.T):
        raise ValidationError("sigma must be symmetric")
    try:
        L = cholesky(sigma, lower=True)
    except LinAlgError:
        raise ValidationError("sigma is not positive definite") from None
    rng = np.random.default_rng(seed)
    n = offsets.size
    Z = rng.standard_normal((n, d)) @ L.T
    rate = offsets[:, None] * np.exp(eta[None, :] + Z)
    if not np.all(np.isfinite(rate)) or rate.max(initial=0.0) > 1e12:
        raise ValidationError("Poisson rates overflow; lower eta or sigma")
    Y = rng.poisson(rate).astype(float)
    return CountMatrix(
        sample_ids=[f"sample_{i + 1}" for i in range(n)],
        taxon_names=[f"taxon_{j + 1}" for j in range(d)],
        counts=Y,
        offsets=offsets,
    )
