"""Graph inference (sparse latent precision, neighborhood selection) and F1 scoring."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels, glm, pln
from .data import CountMatrix, TruthEdgeSet, canonical_pair
from .errors import ConvergenceError, PlnBenchError, ValidationError

DEFAULT_N_RHO = 30
RHO_MIN_RATIO = 0.005
DEFAULT_GAMMA = 0.5
DEFAULT_BOOTSTRAPS = 20
NEIGHBORHOOD_FOLDS = 10
MAX_BOOT_DROP_FRACTION = 0.25
GLASSO_TOL = 1e-6
GLASSO_MAX_SWEEPS = 1000


@dataclass
class Graph:
    taxa: List[str]
    adjacency: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=bool)
        d = len(self.taxa)
        if A.shape != (d, d):
            raise ValidationError("adjacency does not match the taxon list")
        if not np.array_equal(A, A.T):
            raise ValidationError("adjacency must be symmetric")
        if A.diagonal().any():
            raise ValidationError("graph has self-loops")
        self.adjacency = A
        if self.weights is not None:
            W = np.asarray(self.weights, dtype=float)
            if not np.allclose(W, W.T) or not np.array_equal(W != 0, A):
                raise ValidationError("weights must be symmetric and nonzero exactly on edges")
            self.weights = W

    @property
    def n_edges(self) -> int:
        return int(np.triu(self.adjacency, 1).sum())

    def edges(self) -> List[Tuple[str, str]]:
        rows, cols = np.nonzero(np.triu(self.adjacency, 1))
        return sorted(canonical_pair(self.taxa[i], self.taxa[j]) for i, j in zip(rows, cols))

    def to_tsv(self) -> str:
        lines = ["taxon_a\ttaxon_b\tweight"]
        index = {t: i for i, t in enumerate(self.taxa)}
        for a, b in self.edges():
            w = 1.0 if self.weights is None else self.weights[index[a], index[b]]
            lines.append(f"{a}\t{b}\t{w!r}")
        return "\n".join(lines) + "\n"


@dataclass
class PrecisionPath:
    rhos: np.ndarray
    omegas: List[np.ndarray]
    ebic: np.ndarray
    n_edges: List[int]
    selected: int
    working_cov: np.ndarray


@dataclass
class F1Result:
    precision: float
    recall: float
    f1: float
    boot_mean: Optional[float] = None
    boot_se: Optional[float] = None
    b: int = 0
    method: str = ""
    dataset_id: str = ""

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "boot_mean": self.boot_mean,
            "boot_se": self.boot_se,
            "b": self.b,
            "method": self.method,
            "dataset_id": self.dataset_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _support(omega: np.ndarray) -> np.ndarray:
    A = omega != 0
    np.fill_diagonal(A, False)
    return A & A.T


def graphical_lasso(S, rho: float, penalize_diag: bool = False,
                    init: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                    tol: float = GLASSO_TOL, max_sweeps: int = GLASSO_MAX_SWEEPS,
                    return_state: bool = False):
    """Maximize ``log det(O) - tr(S O) - rho * sum_{j != k} |O_jk|``.

    Blockwise coordinate descent over columns of the working covariance
    ``W = O^{-1}``, each column solving a lasso subproblem. With
    ``penalize_diag=True`` the diagonal is penalized too (``W_jj = S_jj + rho``).
    ``init`` is a ``(W, B)`` pair from a previous solve for warm starts.
    """
    S = np.array(S, dtype=float)
    d = S.shape[0]
    if S.shape != (d, d) or not np.allclose(S, S.T):
        raise ValidationError("S must be a symmetric square matrix")
    if np.any(np.diag(S) <= 0):
        raise ValidationError("S must have a positive diagonal")
    if rho < 0:
        raise ValidationError("rho must be nonnegative")
    target = S.copy()
    if penalize_diag:
        target[np.diag_indices(d)] += rho
    ok = False
    if init is not None:
        W, B = init[0].copy(), init[1].copy()
        W[np.diag_indices(d)] = np.diag(target)
        ok, _ = _kernels.graphical_lasso_cd(target, float(rho), W, B, max_sweeps, 10_000,
                                            tol, tol * 1e-3)
    if not ok:
        # W = target is dual feasible and positive definite, so block updates keep it so
        W, B = target.copy(), np.zeros((d, d))
        ok, _ = _kernels.graphical_lasso_cd(target, float(rho), W, B, max_sweeps, 10_000,
                                            tol, tol * 1e-3)
    if not ok:
        raise ConvergenceError(f"graphical lasso did not converge at rho={rho:g}")
    omega = np.zeros((d, d))
    for j in range(d):
        rest = np.arange(d) != j
        beta = B[rest, j]
        wjj = W[j, j] - W[rest, j] @ beta
        omega[j, j] = 1.0 / wjj
        omega[rest, j] = -beta * omega[j, j]
    # keep an entry only if both column regressions agree it is nonzero
    both = (omega != 0) & (omega.T != 0)
    omega = np.where(both, 0.5 * (omega + omega.T), 0.0)
    if return_state:
        return omega, (W, B)
    return omega


def gaussian_loglik(S: np.ndarray, omega: np.ndarray, n: int) -> float:
    sign, logdet = np.linalg.slogdet(omega)
    if sign <= 0:
        return -np.inf
    return 0.5 * n * (logdet - np.sum(S * omega))


def ebic(S: np.ndarray, omega: np.ndarray, n: int, gamma: float = DEFAULT_GAMMA) -> float:
    d = S.shape[0]
    edges = int(np.triu(_support(omega), 1).sum())
    return -2.0 * gaussian_loglik(S, omega, n) + edges * (np.log(n) + 4.0 * gamma * np.log(d))


def partial_correlations(omega: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.diag(omega))
    pc = -omega / np.outer(scale, scale)
    np.fill_diagonal(pc, 0.0)
    return pc


def precision_path(S: np.ndarray, n: int, n_rho: int = DEFAULT_N_RHO,
                   gamma: float = DEFAULT_GAMMA) -> PrecisionPath:
    """Warm-started graphical lasso over ``rho_max`` down to ``0.005 rho_max``."""
    d = S.shape[0]
    off = np.abs(S[~np.eye(d, dtype=bool)])
    rho_max = float(off.max()) if off.size else 0.0
    if rho_max <= 0:
        omega = np.diag(1.0 / np.diag(S))
        return PrecisionPath(np.array([0.0]), [omega], np.array([ebic(S, omega, n, gamma)]),
                             [0], 0, S)
    rhos = np.exp(np.linspace(np.log(rho_max), np.log(RHO_MIN_RATIO * rho_max), n_rho))
    omegas, scores, n_edges = [], [], []
    state = None
    for rho in rhos:
        omega, state = graphical_lasso(S, rho, penalize_diag=False, init=state,
                                       return_state=True)
        omegas.append(omega)
        scores.append(ebic(S, omega, n, gamma))
        n_edges.append(int(np.triu(_support(omega), 1).sum()))
    scores = np.asarray(scores)
    return PrecisionPath(rhos, omegas, scores, n_edges, int(np.argmin(scores)), S)


def graph_from_precision(taxa: Sequence[str], omega: np.ndarray) -> Graph:
    A = _support(omega)
    pc = np.where(A, partial_correlations(omega), 0.0)
    return Graph(list(taxa), A, pc)


def fit_pln_network(m: CountMatrix, n_rho: int = DEFAULT_N_RHO, gamma: float = DEFAULT_GAMMA,
                    pln_opts: Optional[pln.PlnFitOptions] = None) -> Tuple[PrecisionPath, Graph]:
    """Full PLN fit, then an EBIC-selected sparse precision of the latent second moment."""
    model = pln.fit_pln(m, pln_opts)
    S = pln.optimal_covariance(model.var_means, model.var_vars)
    path = precision_path(S, m.n_samples, n_rho, gamma)
    return path, graph_from_precision(m.taxon_names, path.omegas[path.selected])


def neighborhood_coefficients(m: CountMatrix, seed: int = 0,
                              n_folds: int = NEIGHBORHOOD_FOLDS) -> np.ndarray:
    """D x D matrix whose row j holds taxon j's slopes at ``lambda_1se``."""
    d = m.n_taxa
    coef = np.zeros((d, d))
    k = min(n_folds, m.n_samples)
    for j in range(d):
        X, y, s = glm.design_from_counts(m, j)
        path = glm.cv_select(X, y, s, K=k, seed=seed)
        if path.degenerate:
            continue
        fit = path.fit_at(path.lambda_1se)
        coef[j, np.arange(d) != j] = fit.coefs
    return coef


def symmetrize(coef: np.ndarray, rule: str = "max") -> Tuple[np.ndarray, np.ndarray]:
    """Adjacency and signed weights from nodewise coefficients.

    ``max`` keeps an edge when either direction is nonzero (``and`` needs both);
    the weight is the sign of the larger-magnitude coefficient.
    """
    nz = coef != 0
    A = (nz | nz.T) if rule == "max" else (nz & nz.T)
    np.fill_diagonal(A, False)
    bigger = np.where(np.abs(coef) >= np.abs(coef.T), coef, coef.T)
    # read the upper triangle and mirror it so equal-magnitude ties stay symmetric
    W = np.triu(np.where(A, np.sign(bigger), 0.0), 1)
    return A, W + W.T


def neighborhood_select(m: CountMatrix, seed: int = 0,
                        n_folds: int = NEIGHBORHOOD_FOLDS) -> Graph:
    coef = neighborhood_coefficients(m, seed, n_folds)
    A, W = symmetrize(coef, "max")
    return Graph(list(m.taxon_names), A, W)


def diagonal_baseline(taxa: Sequence[str]) -> Graph:
    d = len(taxa)
    return Graph(list(taxa), np.zeros((d, d), dtype=bool), np.zeros((d, d)))


def _norm(name: str) -> str:
    return name.strip()


def graph_f1(pred: Graph, truth: TruthEdgeSet) -> F1Result:
    """Unsigned edge matching; F1 is 0 when precision or recall is undefined."""
    pred_taxa = {_norm(t) for t in pred.taxa}
    for t in truth.taxa:
        if _norm(t) not in pred_taxa:
            raise ValidationError(f"truth taxon {t!r} is absent from the predicted graph")
    pred_edges = {canonical_pair(_norm(a), _norm(b)) for a, b in pred.edges()}
    true_edges = {canonical_pair(_norm(a), _norm(b)) for a, b in truth.edges}
    tp = len(pred_edges & true_edges)
    fp = len(pred_edges - true_edges)
    fn = len(true_edges - pred_edges)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if tp + fp == 0 or tp + fn == 0 or precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return F1Result(precision, recall, f1)


def infer_graph(method: str, m: CountMatrix, seed: int = 0) -> Graph:
    if method == "pln_network":
        return fit_pln_network(m)[1]
    if method == "neighborhood":
        return neighborhood_select(m, seed)
    if method == "diagonal":
        return diagonal_baseline(m.taxon_names)
    raise ValidationError(f"unknown network method {method!r}")


def bootstrap_f1(method: str, m: CountMatrix, truth: TruthEdgeSet,
                 b: int = DEFAULT_BOOTSTRAPS, seed: int = 0,
                 dataset_id: str = "") -> F1Result:
    """Full-data F1 plus mean and SE of F1 over ``b`` row resamples.

    Resample ``r`` draws its rows and its inner CV folds from a child seed of
    ``(seed, r)``; hyperparameters are re-selected on every resample.
    """
    if b < 2:
        raise ValidationError("need at least 2 bootstrap resamples")
    full = graph_f1(infer_graph(method, m, seed), truth)
    children = np.random.SeedSequence(seed).spawn(b)
    scores = []
    for child in children:
        rng = np.random.default_rng(child)
        rows = rng.integers(0, m.n_samples, size=m.n_samples)
        inner_seed = int(rng.integers(0, 2 ** 31 - 1))
        try:
            g = infer_graph(method, m.subset_rows(rows), inner_seed)
        except PlnBenchError:
            continue
        scores.append(graph_f1(g, truth).f1)
    dropped = b - len(scores)
    if dropped / b > MAX_BOOT_DROP_FRACTION:
        raise ConvergenceError(f"{dropped} of {b} bootstrap refits failed")
    scores = np.asarray(scores)
    se = float(scores.std(ddof=1) / np.sqrt(scores.size)) if scores.size > 1 else 0.0
    full.boot_mean = float(scores.mean())
    full.boot_se = se
    full.b = b
    full.method = method
    full.dataset_id = dataset_id
    return full
