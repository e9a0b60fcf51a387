"""Synthetic PLN draws with a known latent covariance and its edge set."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .data import CountMatrix, TruthEdgeSet, canonical_pair, write_count_table, write_truth_edges
from .errors import ValidationError
from .pln import sample_pln

# relative size below which a precision entry counts as structurally zero
SUPPORT_TOL = 1e-10


def chain_precision(d: int, r: float) -> np.ndarray:
    """Unit-diagonal tridiagonal precision with ``r`` on the first off-diagonals."""
    omega = np.eye(d)
    idx = np.arange(d - 1)
    omega[idx, idx + 1] = r
    omega[idx + 1, idx] = r
    return omega


def dense_covariance(d: int, r: float) -> np.ndarray:
    """Equicorrelated covariance: ones on the diagonal, ``r`` elsewhere."""
    return np.full((d, d), float(r)) + (1.0 - r) * np.eye(d)


def _check_spd(mat: np.ndarray, what: str) -> None:
    if not np.allclose(mat, mat.T):
        raise ValidationError(f"{what} is not symmetric")
    if np.linalg.eigvalsh((mat + mat.T) / 2).min() <= 0:
        raise ValidationError(f"{what} is not positive definite")


def parse_sigma(spec: str, d: Optional[int]) -> np.ndarray:
    """Build a covariance from ``identity:c``, ``chain:r``, ``dense:r`` or ``file:path``.

    ``chain`` specifies the precision (a chain graph), the others the
    covariance directly. A ``file`` is a whitespace or comma delimited
    square matrix, or a JSON list of rows.
    """
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "file":
        path = Path(arg)
        text = path.read_text(encoding="utf-8")
        if text.lstrip().startswith("["):
            sigma = np.asarray(json.loads(text), dtype=float)
        else:
            rows = [ln for ln in text.splitlines() if ln.strip()]
            sigma = np.loadtxt(rows, delimiter="," if "," in text else None, ndmin=2)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ValidationError(f"{path}: sigma must be a square matrix")
        if d is not None and sigma.shape[0] != d:
            raise ValidationError(f"{path}: sigma is {sigma.shape[0]}x{sigma.shape[0]}, expected d={d}")
        _check_spd(sigma, "sigma")
        return sigma
    if d is None or d < 1:
        raise ValidationError("the number of taxa must be given for a generated sigma")
    try:
        value = float(arg) if arg else None
    except ValueError:
        raise ValidationError(f"bad numeric argument in sigma spec {spec!r}") from None
    if kind == "identity":
        sigma = (1.0 if value is None else value) * np.eye(d)
    elif kind == "chain":
        if value is None:
            raise ValidationError("chain needs an off-diagonal value, e.g. chain:-0.4")
        omega = chain_precision(d, value)
        _check_spd(omega, "chain precision")
        sigma = np.linalg.inv(omega)
        sigma = (sigma + sigma.T) / 2
    elif kind == "dense":
        if value is None:
            raise ValidationError("dense needs an off-diagonal value, e.g. dense:0.6")
        sigma = dense_covariance(d, value)
    else:
        raise ValidationError(f"unknown sigma spec {spec!r}")
    _check_spd(sigma, "sigma")
    return sigma


def parse_eta(spec: str, d: Optional[int]) -> np.ndarray:
    """A single value broadcast to ``d`` taxa, or a comma separated list."""
    try:
        vals = np.array([float(v) for v in spec.split(",") if v.strip()])
    except ValueError:
        raise ValidationError(f"bad eta spec {spec!r}") from None
    if vals.size == 1 and d is not None:
        return np.full(d, vals[0])
    if d is not None and vals.size != d:
        raise ValidationError(f"eta has {vals.size} entries, expected {d}")
    if vals.size == 0:
        raise ValidationError("eta is empty")
    return vals


def truth_from_sigma(sigma: np.ndarray, taxa) -> TruthEdgeSet:
    """Edges are the off-diagonal support of the precision, signed by partial correlation."""
    omega = np.linalg.inv(sigma)
    scale = np.sqrt(np.abs(np.diag(omega)))
    pc = -omega / np.outer(scale, scale)
    d = sigma.shape[0]
    tol = SUPPORT_TOL * np.abs(np.diag(omega)).max()
    edges, signs = set(), {}
    for i in range(d):
        for j in range(i + 1, d):
            if abs(omega[i, j]) > tol:
                pair = canonical_pair(taxa[i], taxa[j])
                edges.add(pair)
                signs[pair] = 1 if pc[i, j] > 0 else -1
    return TruthEdgeSet(list(taxa), frozenset(edges), signs or None)


def make_synthetic(eta, sigma, n: int, seed: int, depth: float = 1.0
                   ) -> Tuple[CountMatrix, TruthEdgeSet]:
    if n < 2:
        raise ValidationError("need at least 2 samples")
    if not depth > 0:
        raise ValidationError("depth must be positive")
    m = sample_pln(eta, sigma, np.full(n, float(depth)), seed)
    return m, truth_from_sigma(np.asarray(sigma, dtype=float), m.taxon_names)


def write_synthetic(m: CountMatrix, truth: TruthEdgeSet, eta, sigma, out_path,
                    extra: Optional[dict] = None) -> dict:
    """Write the counts CSV, ``<stem>.truth.tsv`` and ``<stem>.json`` sidecar."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    truth_path = out_path.with_name(out_path.stem + ".truth.tsv")
    sidecar_path = out_path.with_name(out_path.stem + ".json")
    write_count_table(m, out_path)
    write_truth_edges(truth, truth_path)
    sidecar = {
        "counts_path": out_path.name,
        "truth_path": truth_path.name,
        "taxa": list(m.taxon_names),
        "eta": [float(v) for v in np.asarray(eta, dtype=float)],
        "sigma": np.asarray(sigma, dtype=float).tolist(),
        "edges": [[a, b, (truth.signs or {}).get((a, b))] for a, b in sorted(truth.edges)],
        "n_edges": len(truth),
    }
    if extra:
        sidecar.update(extra)
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    return {"counts": out_path, "truth": truth_path, "sidecar": sidecar_path}
