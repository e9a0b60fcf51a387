"""Count tables, truth edge sets and the dataset summaries used for winner advice."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from .errors import EmptyInputError, IngestionError

OFFSET_FLOOR = 1.0
WINNER_ND_THRESHOLD = 5.0


@dataclass(frozen=True)
class CountMatrix:
    """N x D abundance table with per-sample offsets.

    ``counts`` is integer valued on ingestion but stored as float so that a
    transformed matrix has the same type. Files must carry at least two taxa;
    programmatic construction (synthetic draws) also allows a single column.
    """

    sample_ids: List[str]
    taxon_names: List[str]
    counts: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        offsets = np.asarray(self.offsets, dtype=float)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "offsets", offsets)
        if counts.ndim != 2:
            raise IngestionError("counts must be a 2-D matrix")
        n, d = counts.shape
        if n < 2:
            raise IngestionError(f"fewer than 2 samples (got {n})")
        if d < 1:
            raise IngestionError("count matrix has no taxa")
        if len(self.sample_ids) != n or len(self.taxon_names) != d:
            raise IngestionError("sample/taxon labels do not match the matrix shape")
        if offsets.shape != (n,):
            raise IngestionError(f"offsets must have length {n}")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise IngestionError("counts must be finite and nonnegative")
        if np.any(~(offsets > 0)):
            raise IngestionError("offsets must be strictly positive")
        _check_unique(self.sample_ids, "sample id")
        _check_unique(self.taxon_names, "taxon")

    @property
    def n_samples(self) -> int:
        return self.counts.shape[0]

    @property
    def n_taxa(self) -> int:
        return self.counts.shape[1]

    def subset_rows(self, idx) -> "CountMatrix":
        """Rows ``idx`` (in that order). Repeated indices get suffixed ids."""
        idx = np.asarray(idx, dtype=int)
        ids = [self.sample_ids[i] for i in idx]
        if len(set(ids)) != len(ids):
            ids = [f"{sid}#{r}" for r, sid in enumerate(ids)]
        return CountMatrix(ids, list(self.taxon_names), self.counts[idx], self.offsets[idx])

    def subset_columns(self, idx, policy: str = "row_sum") -> "CountMatrix":
        idx = np.asarray(idx, dtype=int)
        sub = replace(self, taxon_names=[self.taxon_names[j] for j in idx],
                      counts=self.counts[:, idx])
        return replace(sub, offsets=compute_offsets(sub, policy))


def _check_unique(names, what):
    seen = set()
    for name in names:
        if name in seen:
            raise IngestionError(f"duplicate {what} {name!r}")
        seen.add(name)


def load_count_table(path, format: str = "csv") -> CountMatrix:
    """Read a ``sample_id,taxon_1,...`` CSV into a :class:`CountMatrix`.

    Offsets are set to raw row sums, floored at 1.
    """
    if format != "csv":
        raise IngestionError(f"unsupported format {format!r}")
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise EmptyInputError(f"{path}: file is empty")
    rows = list(csv.reader(text.splitlines()))
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "sample_id":
        raise IngestionError(f"{path}: header must start with 'sample_id' (got {header[:1]})")
    taxa = header[1:]
    for col, name in enumerate(taxa, start=2):
        if not name:
            raise IngestionError(f"{path}: empty taxon name in column {col}")
    _check_unique(taxa, "taxon")

    sample_ids: List[str] = []
    values: List[List[int]] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise IngestionError(
                f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
        sample_ids.append(row[0].strip())
        parsed = []
        for col, cell in enumerate(row[1:], start=1):
            try:
                v = int(cell.strip())
            except ValueError:
                raise IngestionError(
                    f"{path}: row {lineno}, column {taxa[col - 1]!r}: "
                    f"non-numeric cell {cell!r}") from None
            if v < 0:
                raise IngestionError(
                    f"{path}: row {lineno}, column {taxa[col - 1]!r}: negative count {v}")
            parsed.append(v)
        values.append(parsed)
    if len(values) < 2:
        raise IngestionError(f"{path}: fewer than 2 samples (got {len(values)})")
    if len(taxa) < 2:
        raise IngestionError(f"{path}: fewer than 2 taxa (got {len(taxa)})")
    _check_unique(sample_ids, "sample id")
    counts = np.array(values, dtype=float)
    offsets = np.maximum(counts.sum(axis=1), OFFSET_FLOOR)
    return CountMatrix(sample_ids, taxa, counts, offsets)


def write_count_table(m: CountMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["sample_id"] + list(m.taxon_names)) + "\n")
        for sid, row in zip(m.sample_ids, m.counts):
            fh.write(",".join([sid] + [str(int(v)) for v in row]) + "\n")


def compute_offsets(m: CountMatrix, policy: str = "row_sum") -> np.ndarray:
    if policy == "row_sum":
        return np.maximum(m.counts.sum(axis=1), OFFSET_FLOOR)
    if policy == "unit":
        return np.ones(m.n_samples)
    raise ValueError(f"unknown offset policy {policy!r}")


def apply_transform(m: CountMatrix, t: str = "none") -> CountMatrix:
    """Return ``m`` unchanged (``none``) or with entries ``round(ln(1+y))``.

    The ``log1p_round`` variant recomputes offsets on the transformed scale.
    """
    if t == "none":
        return m
    if t == "log1p_round":
        transformed = np.rint(np.log1p(m.counts))
        out = replace(m, counts=transformed)
        return replace(out, offsets=compute_offsets(out, "row_sum"))
    raise ValueError(f"unknown transform {t!r}")


@dataclass(frozen=True)
class DatasetStats:
    n_samples: int
    n_taxa: int
    nd_ratio: float
    sparsity: float
    mac: float
    overdispersion: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "n_samples": self.n_samples,
            "n_taxa": self.n_taxa,
            "nd_ratio": self.nd_ratio,
            "sparsity": self.sparsity,
            "mac": self.mac,
            "overdispersion": self.overdispersion,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def mean_absolute_correlation(x: np.ndarray) -> float:
    """Mean |Pearson r| over unordered column pairs; constant columns give 0."""
    x = np.asarray(x, dtype=float)
    d = x.shape[1]
    centered = x - x.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    ok = norms > 0
    z = np.zeros_like(centered)
    z[:, ok] = centered[:, ok] / norms[ok]
    r = np.clip(z.T @ z, -1.0, 1.0)
    iu = np.triu_indices(d, k=1)
    return float(np.abs(r[iu]).mean())


def dataset_stats(m: CountMatrix, corr_scale: str = "log1p") -> DatasetStats:
    if corr_scale != "log1p":
        raise ValueError(f"unsupported correlation scale {corr_scale!r}")
    y = m.counts
    n, d = y.shape
    sparsity = float(np.count_nonzero(y == 0)) / (n * d)
    mac = mean_absolute_correlation(np.log1p(y))
    means = y.mean(axis=0)
    keep = means > 0
    if keep.any():
        ratios = y[:, keep].var(axis=0, ddof=1) / means[keep]
        overdispersion = float(ratios.mean())
    else:
        overdispersion = 0.0
    return DatasetStats(
        n_samples=n,
        n_taxa=d,
        nd_ratio=n / d,
        sparsity=sparsity,
        mac=mac,
        overdispersion=overdispersion,
    )


def predict_winner(stats: DatasetStats) -> Tuple[str, str]:
    """Heuristic winner: PLN when N/D is below 5, penalized Poisson otherwise."""
    winner = "pln" if stats.nd_ratio < WINNER_ND_THRESHOLD else "glm_poisson"
    relation = "<" if winner == "pln" else ">="
    rationale = (
        f"N/D = {stats.nd_ratio:.2f} {relation} {WINNER_ND_THRESHOLD:g} -> {winner} "
        f"(MAC = {stats.mac:.3f}, overdispersion = {stats.overdispersion:.2f}); "
        f"heuristic: sample-to-taxon ratio below {WINNER_ND_THRESHOLD:g} favours the "
        f"latent-covariance model, higher MAC and overdispersion strengthen the case"
    )
    return winner, rationale


def canonical_pair(a: str, b: str) -> Tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class TruthEdgeSet:
    taxa: List[str]
    edges: FrozenSet[Tuple[str, str]]
    signs: Optional[Dict[Tuple[str, str], int]] = field(default=None)

    def __post_init__(self):
        taxa = set(self.taxa)
        for a, b in self.edges:
            if a == b:
                raise IngestionError(f"self-loop on {a!r}")
            if (a, b) != canonical_pair(a, b):
                raise IngestionError(f"edge ({a!r}, {b!r}) is not canonical")
            if a not in taxa or b not in taxa:
                raise IngestionError(f"edge ({a!r}, {b!r}) references an unknown taxon")

    def __contains__(self, pair) -> bool:
        return canonical_pair(*pair) in self.edges

    def __len__(self) -> int:
        return len(self.edges)


_SIGN_TOKENS = {"+1": 1, "1": 1, "+": 1, "-1": -1, "−1": -1, "-": -1, "": None}


def load_truth_edges(path) -> TruthEdgeSet:
    """Parse a ``taxon_a<TAB>taxon_b<TAB>sign`` file into canonical edges."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise EmptyInputError(f"{path}: file is empty")
    header = [h.strip() for h in lines[0].split("\t")]
    if header[:2] != ["taxon_a", "taxon_b"]:
        raise IngestionError(f"{path}: header must be 'taxon_a<TAB>taxon_b<TAB>sign'")
    edges = set()
    signs: Dict[Tuple[str, str], int] = {}
    taxa: List[str] = []
    seen_taxa = set()
    for lineno, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split("\t")]
        if len(cells) < 2:
            raise IngestionError(f"{path}: row {lineno} needs two taxa")
        a, b = cells[0], cells[1]
        token = cells[2] if len(cells) > 2 else ""
        if a == b:
            raise IngestionError(f"{path}: row {lineno}: self-loop on {a!r}")
        if token not in _SIGN_TOKENS:
            raise IngestionError(f"{path}: row {lineno}: unknown sign token {token!r}")
        pair = canonical_pair(a, b)
        if pair in edges:
            raise IngestionError(f"{path}: row {lineno}: duplicate edge {pair}")
        edges.add(pair)
        if _SIGN_TOKENS[token] is not None:
            signs[pair] = _SIGN_TOKENS[token]
        for t in (a, b):
            if t not in seen_taxa:
                seen_taxa.add(t)
                taxa.append(t)
    return TruthEdgeSet(taxa, frozenset(edges), signs or None)


def write_truth_edges(truth: TruthEdgeSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("taxon_a\ttaxon_b\tsign\n")
        for a, b in sorted(truth.edges):
            s = (truth.signs or {}).get((a, b))
            token = "" if s is None else ("+1" if s > 0 else "-1")
            fh.write(f"{a}\t{b}\t{token}\n")

