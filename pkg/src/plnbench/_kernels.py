"""Compiled inner loops for the coordinate-descent solvers."""

import numpy as np
from numba import njit

_ETA_CLIP = 700.0
# relative dead-zone widening so that lambda_max maps to exact zeros under rounding
_THRESH_SLACK = 1e-12
# active-set sweeps between forced full sweeps
_ACTIVE_SWEEPS = 20


@njit(cache=True)
def _soft(z, t):
    band = t * (1.0 + _THRESH_SLACK)
    if z > band:
        return z - t
    if z < -band:
        return z + t
    return 0.0


@njit(cache=True)
def _polish(Xc, w, r, beta, lam, nnz, r_new):
    """Exact minimizer of the weighted lasso quadratic on the current support.

    Solves the stationarity equations with the signs of ``beta`` fixed. The
    result is accepted (``beta`` and ``r`` overwritten) only if no sign flips
    and every inactive coordinate satisfies its KKT bound.
    """
    n, p = Xc.shape
    idx = np.empty(nnz, dtype=np.int64)
    m = 0
    for k in range(p):
        if beta[k] != 0.0:
            idx[m] = k
            m += 1
    H = np.empty((m, m))
    rhs = np.empty(m)
    for a in range(m):
        ka = idx[a]
        g = 0.0
        for i in range(n):
            g += Xc[i, ka] * w[i] * r[i]
        rhs[a] = g / n - lam * np.sign(beta[ka])
        for b in range(a + 1):
            kb = idx[b]
            h = 0.0
            for i in range(n):
                h += Xc[i, ka] * w[i] * Xc[i, kb]
            H[a, b] = h / n
            H[b, a] = h / n
    # in-place Cholesky; give up on a non-positive pivot
    for j in range(m):
        s = H[j, j]
        for l in range(j):
            s -= H[j, l] * H[j, l]
        if s <= 1e-12 * max(H[j, j], 1e-300):
            return False
        H[j, j] = np.sqrt(s)
        for i in range(j + 1, m):
            t = H[i, j]
            for l in range(j):
                t -= H[i, l] * H[j, l]
            H[i, j] = t / H[j, j]
    for i in range(m):
        t = rhs[i]
        for l in range(i):
            t -= H[i, l] * rhs[l]
        rhs[i] = t / H[i, i]
    for i in range(m - 1, -1, -1):
        t = rhs[i]
        for l in range(i + 1, m):
            t -= H[l, i] * rhs[l]
        rhs[i] = t / H[i, i]
    for a in range(m):
        ka = idx[a]
        nb = beta[ka] + rhs[a]
        if nb == 0.0 or np.sign(nb) != np.sign(beta[ka]):
            return False
    for i in range(n):
        t = r[i]
        for a in range(m):
            t -= Xc[i, idx[a]] * rhs[a]
        r_new[i] = t
    bound = lam * (1.0 + _THRESH_SLACK)
    for k in range(p):
        if beta[k] != 0.0:
            continue
        g = 0.0
        for i in range(n):
            g += Xc[i, k] * w[i] * r_new[i]
        if abs(g / n) > bound:
            return False
    for a in range(m):
        beta[idx[a]] += rhs[a]
    for i in range(n):
        r[i] = r_new[i]
    return True


@njit(cache=True)
def poisson_objective(X, y, log_off, lam, b0, beta):
    n, p = X.shape
    total = 0.0
    for i in range(n):
        eta = log_off[i] + b0
        for k in range(p):
            eta += X[i, k] * beta[k]
        if eta > _ETA_CLIP:
            return np.inf
        total += np.exp(eta) - y[i] * eta
    pen = 0.0
    for k in range(p):
        pen += abs(beta[k])
    return total / n + lam * pen


@njit(cache=True)
def poisson_lasso(X, y, log_off, lam, b0, beta, max_newton, max_sweeps, tol, trace):
    """Proximal Newton for (1/n) NLL + lam * |beta|_1, unpenalized intercept.

    ``beta`` is updated in place; returns (b0, converged, n_newton_steps).
    Objective values after each accepted step are written to ``trace``
    (length >= max_newton + 1).
    """
    n, p = X.shape
    w = np.empty(n)
    r = np.empty(n)
    xbar = np.empty(p)
    new_beta = np.empty(p)
    trial = np.empty(p)
    curv = np.empty(p)
    Xc = np.empty((n, p))
    r_new = np.empty(n)
    f_old = poisson_objective(X, y, log_off, lam, b0, beta)
    trace[0] = f_old
    if not np.isfinite(f_old):
        return b0, False, 0
    converged = False
    it = 0
    while it < max_newton:
        wsum = 0.0
        for i in range(n):
            e = b0
            for k in range(p):
                e += X[i, k] * beta[k]
            mu = np.exp(log_off[i] + e)
            w[i] = mu
            # working response for b0 + x beta
            r[i] = e + (y[i] - mu) / mu
            wsum += mu
        # weighted centering decouples the intercept from the slopes
        for k in range(p):
            acc = 0.0
            for i in range(n):
                acc += w[i] * X[i, k]
            xbar[k] = acc / wsum
        c = 0.0
        for i in range(n):
            c += w[i] * r[i]
        c /= wsum
        for i in range(n):
            fit = c
            for k in range(p):
                fit += (X[i, k] - xbar[k]) * beta[k]
            r[i] -= fit
        for k in range(p):
            new_beta[k] = beta[k]
            acc = 0.0
            for i in range(n):
                xc = X[i, k] - xbar[k]
                Xc[i, k] = xc
                acc += w[i] * xc * xc
            curv[k] = acc / n
        # glmnet-style cycling: converge on the active set, then confirm with a full
        # sweep; once the support repeats, try to finish with one exact solve on it
        full = True
        since_full = 0
        prev_support = -1
        for sweep in range(max_sweeps):
            max_change = 0.0
            for k in range(p):
                if not full and new_beta[k] == 0.0:
                    continue
                a = curv[k]
                if a <= 0.0:
                    continue
                g = 0.0
                for i in range(n):
                    g += Xc[i, k] * w[i] * r[i]
                g = g / n + a * new_beta[k]
                nb = _soft(g, lam) / a
                d = nb - new_beta[k]
                if d != 0.0:
                    for i in range(n):
                        r[i] -= Xc[i, k] * d
                    new_beta[k] = nb
                    ch = abs(d) * np.sqrt(a)
                    if ch > max_change:
                        max_change = ch
            if full:
                if max_change < tol:
                    break
                nnz = 0
                code = 0
                for k in range(p):
                    if new_beta[k] != 0.0:
                        nnz += 1
                        code = (code * 31 + k + 1) % 2147483647
                support = code * 1024 + nnz
                if nnz > 0 and support == prev_support:
                    if _polish(Xc, w, r, new_beta, lam, nnz, r_new):
                        break
                prev_support = support
                full = False
                since_full = 0
            else:
                since_full += 1
                if max_change < tol or since_full >= _ACTIVE_SWEEPS:
                    full = True
        new_b0 = c
        for k in range(p):
            new_b0 -= xbar[k] * new_beta[k]
        # step-halving line search on the penalized objective
        t = 1.0
        accepted = False
        f_new = f_old
        tb0 = b0
        for _ in range(40):
            tb0 = b0 + t * (new_b0 - b0)
            for k in range(p):
                trial[k] = beta[k] + t * (new_beta[k] - beta[k])
            f_new = poisson_objective(X, y, log_off, lam, tb0, trial)
            if f_new <= f_old:
                accepted = True
                break
            t *= 0.5
        it += 1
        if not accepted:
            trace[it] = f_old
            converged = True
            break
        step = abs(tb0 - b0)
        for k in range(p):
            s = abs(trial[k] - beta[k])
            if s > step:
                step = s
            beta[k] = trial[k]
        b0 = tb0
        trace[it] = f_new
        if (f_old - f_new) <= 1e-14 * max(1.0, abs(f_new)) and step < 1e-9:
            converged = True
            break
        f_old = f_new
    return b0, converged, it


@njit(cache=True)
def poisson_lasso_path(X, y, log_off, lambdas, b0_init, warm, max_newton, max_sweeps, tol):
    n, p = X.shape
    L = lambdas.shape[0]
    coefs = np.zeros((L, p))
    b0s = np.empty(L)
    conv = np.zeros(L, dtype=np.bool_)
    beta = np.zeros(p)
    b0 = b0_init
    trace = np.empty(max_newton + 1)
    for l in range(L):
        if not warm:
            beta[:] = 0.0
            b0 = b0_init
        b0, ok, _ = poisson_lasso(X, y, log_off, lambdas[l], b0, beta,
                                  max_newton, max_sweeps, tol, trace)
        coefs[l, :] = beta
        b0s[l] = b0
        conv[l] = ok
    return b0s, coefs, conv


@njit(cache=True)
def graphical_lasso_cd(S, rho, W, B, max_sweeps, max_inner, tol, inner_tol):
    """Blockwise coordinate descent with an unpenalized diagonal.

    ``W`` (working covariance) and ``B`` (column regressions, D x D with zero
    diagonal) are updated in place. Returns (converged, sweeps).
    """
    d = S.shape[0]
    for sweep in range(max_sweeps):
        max_change = 0.0
        for j in range(d):
            # lasso: min 1/2 b'W11 b - s12'b + rho |b|_1 over b indexed by k != j
            for inner in range(max_inner):
                inner_change = 0.0
                for k in range(d):
                    if k == j:
                        continue
                    acc = S[k, j]
                    for l in range(d):
                        if l != j and l != k:
                            acc -= W[k, l] * B[l, j]
                    nb = _soft(acc, rho) / W[k, k]
                    ch = abs(nb - B[k, j])
                    if ch > inner_change:
                        inner_change = ch
                    B[k, j] = nb
                if inner_change < inner_tol:
                    break
            for k in range(d):
                if k == j:
                    continue
                val = 0.0
                for l in range(d):
                    if l != j:
                        val += W[k, l] * B[l, j]
                if not np.isfinite(val):
                    return False, sweep + 1
                ch = abs(val - W[k, j])
                if ch > max_change:
                    max_change = ch
                W[k, j] = val
                W[j, k] = val
        if max_change < tol:
            return True, sweep + 1
    return False, max_sweeps
