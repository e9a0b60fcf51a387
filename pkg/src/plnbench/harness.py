"""Leave-one-taxon-out cross-validation with held-out Poisson deviance."""

from __future__ import annotations

import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import glm, pln
from .data import CountMatrix
from .errors import ConvergenceError, PlnBenchError, ValidationError
from .metrics import (
    bh_adjust,
    derive_seed,
    featureless_predict,
    make_folds,
    paired_wilcoxon,
    poisson_deviance,
)

METHODS = ("pln", "glm_poisson", "featureless")
DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
MAX_FAILURE_FRACTION = 0.10


@dataclass(frozen=True)
class GlmOptions:
    n_lambda: int = glm.DEFAULT_N_LAMBDA
    lambda_min_ratio: float = glm.DEFAULT_LAMBDA_MIN_RATIO


@dataclass(frozen=True)
class DevianceRecord:
    method: str
    taxon: int
    fold: int
    deviance: float
    n_heldout: int
    failed: bool = False


@dataclass
class DevianceTable:
    records: List[DevianceRecord]
    dataset_id: str
    config_digest: str
    taxon_names: List[str] = field(default_factory=list)
    n_folds: int = 0
    selected: Dict[str, dict] = field(default_factory=dict)
    models: Dict[tuple, object] = field(default_factory=dict, repr=False)

    def methods(self) -> List[str]:
        present = {r.method for r in self.records}
        return [m for m in METHODS if m in present]

    def for_method(self, method: str, include_failed: bool = False) -> List[DevianceRecord]:
        return [r for r in self.records
                if r.method == method and (include_failed or not r.failed)]

    def score(self, method: str) -> float:
        """Mean deviance over the D*K cells of ``method`` (failed cells excluded)."""
        vals = [r.deviance for r in self.for_method(method)]
        return float(np.mean(vals)) if vals else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("method,taxon,fold,deviance,n_heldout,failed\n")
        for r in self.records:
            buf.write(f"{r.method},{r.taxon},{r.fold},{r.deviance!r},{r.n_heldout},"
                      f"{int(r.failed)}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, dataset_id: str = "", config_digest: str = "") -> "DevianceTable":
        lines = text.strip().splitlines()
        if lines[0] != "method,taxon,fold,deviance,n_heldout,failed":
            raise ValidationError("unexpected deviance table header")
        records = []
        for line in lines[1:]:
            method, taxon, fold, dev, n_held, failed = line.split(",")
            records.append(DevianceRecord(method, int(taxon), int(fold), float(dev),
                                          int(n_held), bool(int(failed))))
        k = 1 + max(r.fold for r in records) if records else 0
        return cls(records, dataset_id, config_digest, n_folds=k)


def config_digest(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def data_digest(m: CountMatrix) -> str:
    h = hashlib.sha256()
    h.update("\x1f".join(m.sample_ids).encode("utf-8"))
    h.update(b"\x1e")
    h.update("\x1f".join(m.taxon_names).encode("utf-8"))
    h.update(np.ascontiguousarray(m.counts).tobytes())
    h.update(np.ascontiguousarray(m.offsets).tobytes())
    return h.hexdigest()


def _pick_alpha(alphas: Sequence[float], scores: np.ndarray) -> float:
    """Lowest mean deviance; ties resolved toward stronger shrinkage."""
    best = np.nanmin(scores)
    idx = np.flatnonzero(scores == best)
    return float(alphas[idx[-1]])


def select_alpha(train: CountMatrix, plan, alpha_grid: Sequence[float],
                 pln_opts: Optional[pln.PlnFitOptions] = None) -> Tuple[float, np.ndarray]:
    """Choose one shrinkage level for all taxa by inner-fold held-out deviance."""
    totals = np.zeros(len(alpha_grid))
    counts = np.zeros(len(alpha_grid))
    for tr, te in plan.splits():
        model = pln.fit_pln(train.subset_rows(tr), pln_opts)
        y_te = train.counts[te]
        preds = pln.loto_predictions(model, y_te, train.offsets[te], alpha_grid)
        for a in range(len(alpha_grid)):
            for j in range(train.n_taxa):
                dev = poisson_deviance(y_te[:, j], preds[a, :, j])
                if np.isfinite(dev):
                    totals[a] += dev
                    counts[a] += 1
    scores = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
    if np.all(np.isnan(scores)):
        raise ConvergenceError("no finite inner deviance for any shrinkage level")
    return _pick_alpha(alpha_grid, scores), scores


def _failed(method, j, f, n):
    return DevianceRecord(method, j, f, math.nan, n, True)


def _run_fold(m: CountMatrix, methods, f: int, train_idx, test_idx, inner_k: int,
              seed: int, alpha_grid, glm_opts: GlmOptions,
              pln_opts: Optional[pln.PlnFitOptions], keep_models: bool):
    train = m.subset_rows(train_idx)
    y_test = m.counts[test_idx]
    s_test = m.offsets[test_idx]
    n_test = len(test_idx)
    d = m.n_taxa
    plan = make_folds(train.n_samples, inner_k, derive_seed(seed, f))
    records: List[DevianceRecord] = []
    selected: dict = {}
    models: dict = {}

    if "featureless" in methods:
        for j in range(d):
            mu = featureless_predict(train.counts[:, j], train.offsets, s_test)
            records.append(DevianceRecord("featureless", j, f,
                                          poisson_deviance(y_test[:, j], mu), n_test))

    if "glm_poisson" in methods:
        lambdas = []
        for j in range(d):
            try:
                X, y, s = glm.design_from_counts(train, j)
                path = glm.cv_select(X, y, s, plan=plan, n_lambda=glm_opts.n_lambda,
                                     lambda_min_ratio=glm_opts.lambda_min_ratio)
                fit = path.fit_at(path.lambda_min)
                X_te = np.log1p(np.delete(y_test, j, axis=1))
                dev = poisson_deviance(y_test[:, j], glm.predict_glm(fit, X_te, s_test))
                if not np.isfinite(dev):
                    raise ConvergenceError("non-finite deviance")
                records.append(DevianceRecord("glm_poisson", j, f, dev, n_test))
                lambdas.append(path.lambda_min)
                if keep_models:
                    models[("glm_poisson", j, f)] = path
            except PlnBenchError:
                records.append(_failed("glm_poisson", j, f, n_test))
                lambdas.append(None)
        selected["glm_poisson"] = {"lambda_min": lambdas}

    if "pln" in methods:
        try:
            alpha, scores = select_alpha(train, plan, alpha_grid, pln_opts)
            model = pln.fit_pln(train, pln_opts)
            preds = pln.loto_predictions(model, y_test, s_test, [alpha])[0]
            for j in range(d):
                dev = poisson_deviance(y_test[:, j], preds[:, j])
                if np.isfinite(dev):
                    records.append(DevianceRecord("pln", j, f, dev, n_test))
                else:
                    records.append(_failed("pln", j, f, n_test))
            selected["pln"] = {"alpha": alpha, "inner_scores": [float(v) for v in scores]}
            if keep_models:
                models[("pln", f)] = model
        except PlnBenchError:
            records.extend(_failed("pln", j, f, n_test) for j in range(d))
            selected["pln"] = {"alpha": None}
    return f, records, selected, models


def run_loto_cv(m: CountMatrix, methods: Iterable[str] = METHODS, k: int = 3,
                inner_k: int = 3, seed: int = 0,
                alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
                glm_opts: Optional[GlmOptions] = None,
                pln_opts: Optional[pln.PlnFitOptions] = None,
                dataset_id: str = "dataset", workers: int = 1,
                keep_models: bool = False) -> DevianceTable:
    """Score each method on every (target taxon, outer fold) cell.

    For fold ``f`` every method is trained on the samples outside ``f`` only;
    hyperparameters come from an ``inner_k``-fold split of those training
    samples, shared by both fitted methods and all targets. PLN is fitted
    once per fold on all taxa and conditioned per target.
    """
    methods = [m_ for m_ in METHODS if m_ in set(methods)]
    if not methods:
        raise ValidationError("no known methods requested")
    if k < 2 or inner_k < 2:
        raise ValidationError("outer and inner fold counts must be >= 2")
    glm_opts = glm_opts or GlmOptions()
    params = {
        "methods": methods, "k": k, "inner_k": inner_k, "seed": seed,
        "alpha_grid": list(alpha_grid), "n_lambda": glm_opts.n_lambda,
        "lambda_min_ratio": glm_opts.lambda_min_ratio,
        "pln_opts": None if pln_opts is None else vars(pln_opts),
        "data": data_digest(m),
    }
    outer = make_folds(m.n_samples, k, seed)
    tasks = [(f, outer.train_index(f), outer.test_index(f)) for f in range(k)]

    def run(task):
        f, tr, te = task
        return _run_fold(m, methods, f, tr, te, inner_k, seed, alpha_grid, glm_opts,
                         pln_opts, keep_models)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    records: List[DevianceRecord] = []
    selected: Dict[str, dict] = {}
    models: dict = {}
    for f, recs, sel, mods in results:
        records.extend(recs)
        for method, info in sel.items():
            selected.setdefault(method, {})[str(f)] = info
        models.update(mods)
    records.sort(key=lambda r: (r.method, r.taxon, r.fold))
    n_failed = sum(r.failed for r in records)
    if records and n_failed / len(records) > MAX_FAILURE_FRACTION:
        raise ConvergenceError(
            f"{n_failed} of {len(records)} cells failed (limit {MAX_FAILURE_FRACTION:.0%})")
    return DevianceTable(records, dataset_id, config_digest(params),
                         taxon_names=list(m.taxon_names), n_folds=k,
                         selected=selected, models=models)


def _se(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(values.size))


def _paired_cells(t: DevianceTable, a: str, b: str) -> np.ndarray:
    ra = {(r.taxon, r.fold): r.deviance for r in t.for_method(a)}
    rb = {(r.taxon, r.fold): r.deviance for r in t.for_method(b)}
    keys = sorted(set(ra) & set(rb))
    return np.array([ra[k_] - rb[k_] for k_ in keys])


def relative_gain(mean_a: float, mean_b: float) -> float:
    """Percent by which ``a`` improves on the reference ``b``: ``100 (b - a) / b``."""
    if mean_b == 0:
        return 0.0 if mean_a == 0 else -math.inf
    return 100.0 * (mean_b - mean_a) / mean_b


def aggregate_report(t: DevianceTable) -> dict:
    """Per-method mean and SE plus pairwise gains, Wilcoxon p and BH q values."""
    if not t.records:
        raise ValidationError("empty deviance table")
    methods = t.methods()
    summary = {}
    for method in methods:
        recs = t.for_method(method)
        vals = [r.deviance for r in recs]
        by_fold = {}
        for r in recs:
            by_fold.setdefault(r.fold, []).append(r.deviance)
        fold_means = [np.mean(v) for _, v in sorted(by_fold.items())]
        summary[method] = {
            "mean": float(np.mean(vals)) if vals else None,
            "se": _se(vals),
            "se_fold": _se(fold_means),
            "n_cells": len(vals),
            "n_failed": len(t.for_method(method, include_failed=True)) - len(vals),
        }
    comparisons = []
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            mean_a, mean_b = summary[a]["mean"], summary[b]["mean"]
            diffs = _paired_cells(t, a, b)
            try:
                p = paired_wilcoxon(diffs)
            except ValidationError:
                p = None
            if mean_a < mean_b:
                winner = a
            elif mean_b < mean_a:
                winner = b
            else:
                winner = "tie"
            comparisons.append({
                "method_a": a,
                "method_b": b,
                "mean_a": mean_a,
                "mean_b": mean_b,
                "delta_pct": relative_gain(mean_a, mean_b),
                "p_value": p,
                "q_value": None,
                "winner": winner,
            })
    ps = [c["p_value"] for c in comparisons if c["p_value"] is not None]
    if ps:
        qs = iter(bh_adjust(ps))
        for c in comparisons:
            if c["p_value"] is not None:
                c["q_value"] = float(next(qs))
    return {
        "dataset_id": t.dataset_id,
        "config_digest": t.config_digest,
        "n_taxa": len(t.taxon_names) or None,
        "n_folds": t.n_folds,
        "methods": summary,
        "comparisons": comparisons,
    }
