"""``plnbench`` command line: prediction and network benchmarks, profiling, synthesis, stats.

Exit codes
----------
0  success
1  internal error (a bug)
2  usage error (bad flags or config keys)
3  I/O error (missing, unreadable or empty input)
4  validation error (malformed data or inconsistent parameters)
5  convergence error (too many failed fits)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__, harness, network, profiling, synth
from .data import (apply_transform, dataset_stats, load_count_table, load_truth_edges,
                   predict_winner)
from .errors import (ConvergenceError, EmptyInputError, IngestionError, PlnBenchError,
                     ValidationError)
from .glm import DEFAULT_LAMBDA_MIN_RATIO, DEFAULT_N_LAMBDA

log = logging.getLogger("plnbench")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_CONVERGENCE = 5

NETWORK_METHODS = ("pln_network", "neighborhood", "diagonal")
TRANSFORMS = ("none", "log1p_round")


class UsageError(PlnBenchError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    """Run parameters shared by ``predict-bench`` and ``network-bench``.

    ``workers`` and ``output_dir`` do not affect results and are left out
    of the digest.
    """

    dataset_path: str = ""
    transform: str = "log1p_round"
    outer_k: int = 3
    inner_k: int = 3
    alpha_grid: Tuple[float, ...] = harness.DEFAULT_ALPHA_GRID
    n_lambda: int = DEFAULT_N_LAMBDA
    seed: int = 0
    methods: Tuple[str, ...] = ()
    output_dir: str = "plnbench_out"
    workers: int = os.cpu_count() or 1
    truth_path: str = ""
    bootstraps: int = network.DEFAULT_BOOTSTRAPS

    def validate(self) -> "BenchConfig":
        if not self.dataset_path:
            raise UsageError("dataset_path is required")
        if self.transform not in TRANSFORMS:
            raise ValidationError(f"transform must be one of {TRANSFORMS}")
        if self.outer_k < 2 or self.inner_k < 2:
            raise ValidationError("outer_k and inner_k must be >= 2")
        if not self.alpha_grid or any(not 0.0 <= a <= 1.0 for a in self.alpha_grid):
            raise ValidationError("alpha_grid values must lie in [0, 1]")
        if self.n_lambda < 2:
            raise ValidationError("n_lambda must be >= 2")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.bootstraps < 2:
            raise ValidationError("bootstraps must be >= 2")
        return self

    def digest_params(self) -> dict:
        params = asdict(self)
        params.pop("workers")
        params.pop("output_dir")
        params["alpha_grid"] = [float(a) for a in self.alpha_grid]
        params["methods"] = list(self.methods)
        return params


_FIELD_TYPES = {f.name: f.type for f in fields(BenchConfig)}


def _parse_list(value, cast):
    if isinstance(value, str):
        return tuple(cast(v.strip()) for v in value.split(",") if v.strip())
    return tuple(cast(v) for v in value)


def _coerce(key: str, value):
    try:
        if key == "alpha_grid":
            return _parse_list(value, float)
        if key == "methods":
            return _parse_list(value, str)
        if key in ("outer_k", "inner_k", "n_lambda", "seed", "workers", "bootstraps"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"bad value for {key}: {value!r}") from None


def load_config_file(path) -> dict:
    """Flat JSON object; keys in snake_case or kebab-case."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a flat JSON object")
    out = {}
    for key, value in raw.items():
        name = key.replace("-", "_")
        if name not in _FIELD_TYPES:
            raise UsageError(f"{path}: unknown config key {key!r}")
        out[name] = _coerce(name, value)
    return out


def build_config(ns: argparse.Namespace, default_methods: Sequence[str]) -> BenchConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {"methods": tuple(default_methods)}
    if getattr(ns, "config", None):
        values.update(load_config_file(ns.config))
    for name in _FIELD_TYPES:
        if hasattr(ns, name):
            values[name] = _coerce(name, getattr(ns, name))
    return BenchConfig(**values).validate()


def versions() -> dict:
    import numba
    import scipy

    return {
        "plnbench": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def _clean(obj):
    """Replace non-finite floats by ``None`` so the JSON stays standard."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _dump_json(obj, path: Path) -> None:
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _load_dataset(cfg: BenchConfig):
    m = load_count_table(cfg.dataset_path)
    return apply_transform(m, cfg.transform)


def _provenance(cfg: BenchConfig, m, extra: Optional[dict] = None) -> dict:
    params = cfg.digest_params()
    params["data_digest"] = harness.data_digest(m)
    prov = {
        "config_digest": harness.config_digest(params),
        "data_digest": params["data_digest"],
        "seed": cfg.seed,
        "versions": versions(),
    }
    if extra:
        prov.update(extra)
    return prov


# -- subcommands ---------------------------------------------------------------------------

def cmd_predict_bench(cfg: BenchConfig) -> List[Path]:
    m = _load_dataset(cfg)
    unknown = set(cfg.methods) - set(harness.METHODS)
    if unknown:
        raise ValidationError(f"unknown prediction methods: {sorted(unknown)}")
    log.info("predict-bench: %d samples x %d taxa, methods %s", m.n_samples, m.n_taxa,
             ",".join(cfg.methods))
    glm_opts = harness.GlmOptions(n_lambda=cfg.n_lambda,
                                  lambda_min_ratio=DEFAULT_LAMBDA_MIN_RATIO)
    table = harness.run_loto_cv(m, cfg.methods, k=cfg.outer_k, inner_k=cfg.inner_k,
                                seed=cfg.seed, alpha_grid=cfg.alpha_grid, glm_opts=glm_opts,
                                dataset_id=Path(cfg.dataset_path).stem,
                                workers=cfg.workers)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = table.to_csv()
    csv_path = out / "deviance_table.csv"
    csv_path.write_text(csv_text, encoding="utf-8")
    prov = _provenance(cfg, m, {
        "harness_digest": table.config_digest,
        "deviance_table_sha256": hashlib.sha256(csv_text.encode("utf-8")).hexdigest(),
    })
    summary = {
        "provenance": prov,
        "config": cfg.digest_params(),
        "report": harness.aggregate_report(table),
        "selected": table.selected,
        "taxon_names": list(m.taxon_names),
    }
    summary_path = out / "summary.json"
    _dump_json(summary, summary_path)
    return [csv_path, summary_path]


def cmd_network_bench(cfg: BenchConfig) -> List[Path]:
    if not cfg.truth_path:
        raise UsageError("network-bench needs --truth-path")
    m = _load_dataset(cfg)
    truth = load_truth_edges(cfg.truth_path)
    known = set(m.taxon_names)
    for t in truth.taxa:
        if t not in known:
            raise ValidationError(f"truth taxon {t!r} does not occur in {cfg.dataset_path}")
    methods = [x for x in NETWORK_METHODS if x in set(cfg.methods) | {"diagonal"}]
    unknown = set(cfg.methods) - set(NETWORK_METHODS)
    if unknown:
        raise ValidationError(f"unknown network methods: {sorted(unknown)}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, m)
    dataset_id = Path(cfg.dataset_path).stem
    written = []
    for method in methods:
        log.info("network-bench: %s with %d bootstraps", method, cfg.bootstraps)
        res = network.bootstrap_f1(method, m, truth, b=cfg.bootstraps, seed=cfg.seed,
                                   dataset_id=dataset_id)
        graph = network.infer_graph(method, m, cfg.seed)
        json_path = out / f"f1_{method}.json"
        _dump_json({"provenance": prov, "result": res.to_dict(),
                    "n_predicted_edges": graph.n_edges, "n_truth_edges": len(truth)},
                   json_path)
        tsv_path = out / f"edges_{method}.tsv"
        tsv_path.write_text(graph.to_tsv(), encoding="utf-8")
        written += [json_path, tsv_path]
    return written


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma separated list of integers, got {text!r}") from None


def cmd_profile(ns: argparse.Namespace) -> List[Path]:
    m = load_count_table(ns.dataset_path)
    d_grid = _int_list(ns.d_grid)
    methods = [v.strip() for v in ns.methods.split(",") if v.strip()]
    records = profiling.run_profile(m, d_grid, reps=ns.reps, methods=methods)
    out = Path(ns.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "scaling.csv"
    lines = ["method,d,median_wall_seconds,peak_memory_bytes,reps"]
    for r in records:
        lines.append(f"{r.method},{r.d},{r.median_wall_seconds!r},{r.peak_memory_bytes},{r.reps}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    json_path = out / "scaling.json"
    _dump_json({"memory_mechanism": profiling.MEMORY_MECHANISM,
                "n_samples": m.n_samples, "versions": versions(),
                "records": [r.to_dict() for r in records]}, json_path)
    for r in records:
        print(f"{r.method:12s} d={r.d:<5d} wall={r.median_wall_seconds:.4f}s "
              f"peak={r.peak_memory_bytes / 2**20:.2f}MiB")
    return [csv_path, json_path]


def cmd_synth(ns: argparse.Namespace) -> List[Path]:
    sigma = synth.parse_sigma(ns.sigma, ns.n_taxa)
    d = sigma.shape[0]
    eta = synth.parse_eta(ns.eta, d)
    m, truth = synth.make_synthetic(eta, sigma, ns.n_samples, ns.seed, ns.depth)
    digest = harness.config_digest({"eta": ns.eta, "sigma": ns.sigma, "n_taxa": d,
                                    "n_samples": ns.n_samples, "seed": ns.seed,
                                    "depth": ns.depth})
    paths = synth.write_synthetic(m, truth, eta, sigma, ns.out, extra={
        "seed": ns.seed, "sigma_spec": ns.sigma, "depth": ns.depth, "config_digest": digest})
    return [paths["counts"], paths["truth"], paths["sidecar"]]


def cmd_stats(ns: argparse.Namespace) -> List[Path]:
    m = load_count_table(ns.dataset_path)
    stats = dataset_stats(m, corr_scale=ns.corr_scale)
    winner, rationale = predict_winner(stats)
    print(json.dumps(_clean({**stats.to_dict(), "advice": winner}), indent=2, sort_keys=True))
    print(rationale)
    return []


# -- parser --------------------------------------------------------------------------------

def _bench_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="flat JSON file of config keys; flags override it")
    p.add_argument("--dataset-path", "--dataset", dest="dataset_path", default=S,
                   help="count table CSV (samples in rows, taxa in columns)")
    p.add_argument("--transform", choices=TRANSFORMS, default=S)
    p.add_argument("--outer-k", type=int, default=S)
    p.add_argument("--inner-k", type=int, default=S)
    p.add_argument("--alpha-grid", default=S, help="comma separated shrinkage values")
    p.add_argument("--n-lambda", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--methods", default=S, help="comma separated method names")
    p.add_argument("--output-dir", default=S)
    p.add_argument("--workers", type=int, default=S,
                   help="worker threads (default: number of processors)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plnbench", description=__doc__.split("\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="\n".join(__doc__.split("\n")[2:]))
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict-bench", help="LOTO-CV held-out deviance benchmark")
    _bench_flags(p)

    p = sub.add_parser("network-bench", help="bootstrap F1 of inferred networks")
    _bench_flags(p)
    p.add_argument("--truth-path", default=argparse.SUPPRESS,
                   help="TSV of true edges (taxon_a, taxon_b, sign)")
    p.add_argument("--bootstraps", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("profile", help="wall time and peak memory as D grows")
    p.add_argument("--dataset-path", "--dataset", dest="dataset_path", required=True)
    p.add_argument("--d-grid", default=",".join(map(str, profiling.DEFAULT_D_GRID)))
    p.add_argument("--reps", type=int, default=profiling.DEFAULT_REPS)
    p.add_argument("--methods", default="glm_poisson,pln")
    p.add_argument("--output-dir", default="plnbench_out")

    p = sub.add_parser("synth", help="draw a PLN count table with known structure")
    p.add_argument("--eta", default="1.0", help="one value or a comma separated list")
    p.add_argument("--sigma", default="identity:1",
                   help="identity:c, chain:r, dense:r or file:PATH")
    p.add_argument("--n-taxa", type=int, default=None)
    p.add_argument("--n-samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=float, default=1.0, help="constant per-sample exposure")
    p.add_argument("--out", required=True, help="counts CSV path; sidecars sit next to it")

    p = sub.add_parser("stats", help="dataset summary and method advice")
    p.add_argument("--dataset-path", "--dataset", dest="dataset_path", required=True)
    p.add_argument("--corr-scale", choices=("log1p",), default="log1p")
    return parser


def _dispatch(ns: argparse.Namespace) -> List[Path]:
    if ns.command == "predict-bench":
        return cmd_predict_bench(build_config(ns, harness.METHODS))
    if ns.command == "network-bench":
        return cmd_network_bench(build_config(ns, ("pln_network", "neighborhood")))
    if ns.command == "profile":
        return cmd_profile(ns)
    if ns.command == "synth":
        return cmd_synth(ns)
    if ns.command == "stats":
        return cmd_stats(ns)
    raise UsageError(f"unknown command {ns.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        written = _dispatch(ns)
    except UsageError as exc:
        print(f"plnbench: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EmptyInputError, OSError) as exc:
        print(f"plnbench: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IngestionError, ValidationError) as exc:
        print(f"plnbench: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"plnbench: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal code
        log.exception("internal error")
        print(f"plnbench: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL
    for path in written:
        log.info("wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
