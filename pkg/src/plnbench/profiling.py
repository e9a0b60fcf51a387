"""Wall-time and peak-memory scaling of the two fitted methods as D grows."""

from __future__ import annotations

import gc
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import glm, pln
from .data import CountMatrix
from .errors import ValidationError

MEMORY_MECHANISM = "tracemalloc (Python + NumPy allocations, peak per run)"
DEFAULT_D_GRID = (10, 50, 100)
DEFAULT_REPS = 3


@dataclass(frozen=True)
class ScalingRecord:
    method: str
    d: int
    median_wall_seconds: float
    peak_memory_bytes: int
    reps: int
    memory_mechanism: str = MEMORY_MECHANISM

    def to_dict(self) -> dict:
        return asdict(self)


def most_abundant(m: CountMatrix, d: int) -> CountMatrix:
    """Keep the ``d`` taxa with the largest totals (stable on ties)."""
    if d > m.n_taxa:
        raise ValidationError(f"d={d} exceeds the {m.n_taxa} available taxa")
    if d < 2:
        raise ValidationError("d must be at least 2")
    order = np.argsort(-m.counts.sum(axis=0), kind="stable")[:d]
    return m.subset_columns(np.sort(order), policy="row_sum")


def _fit_glm(m: CountMatrix) -> None:
    """One regularization path for the most abundant taxon on the other D - 1."""
    target = int(np.argmax(m.counts.sum(axis=0)))
    X, y, s = glm.design_from_counts(m, target)
    glm.fit_path(X, y, s)


def _fit_pln(m: CountMatrix) -> None:
    pln.fit_pln(m)


FITTERS: Dict[str, Callable[[CountMatrix], None]] = {
    "pln": _fit_pln,
    "glm_poisson": _fit_glm,
}


def measure(fn: Callable[[], None], reps: int):
    """Median wall time over ``reps`` untraced runs and median traced peak."""
    walls, peaks = [], []
    for _ in range(reps):
        gc.collect()
        t0 = time.perf_counter()
        fn()
        walls.append(time.perf_counter() - t0)
    for _ in range(reps):
        gc.collect()
        tracemalloc.start()
        try:
            fn()
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        peaks.append(peak)
    return statistics.median(walls), int(statistics.median(peaks))


def run_profile(m: CountMatrix, d_grid: Sequence[int] = DEFAULT_D_GRID,
                reps: int = DEFAULT_REPS,
                methods: Sequence[str] = ("glm_poisson", "pln")) -> List[ScalingRecord]:
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    for d in d_grid:
        if d > m.n_taxa:
            raise ValidationError(f"d={d} exceeds the {m.n_taxa} available taxa")
    for method in methods:
        if method not in FITTERS:
            raise ValidationError(f"unknown method {method!r}")
    records = []
    for d in d_grid:
        sub = most_abundant(m, d)
        for method in methods:
            fit = FITTERS[method]
            # one untimed call so that JIT compilation is not billed to the first rep
            fit(sub)
            wall, peak = measure(lambda: fit(sub), reps)
            records.append(ScalingRecord(method, int(d), wall, peak, reps))
    return records
