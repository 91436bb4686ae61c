"""Experiment runner: config parsing, seeded execution, CSV/JSON reporting.

Subcommands:
  run     one experiment -> rounds.csv, summary.json, config.resolved.json
  sweep   cross-product of methods/granularities/R values/seeds -> run dirs
          plus one comparison.csv
  report  re-render a comparison table from the stored per-run CSVs

Every run directory is self-describing: config.resolved.json plus the seed
reproduce it byte-for-byte (wall_seconds aside).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .data import Dataset, load_idx, split_local_test, stratified_subsample, synth_train_and_test
from .errors import (
    ConfigError,
    ConsistencyError,
    DegenerateInputError,
    EmptyDatasetError,
    EmptyShardError,
    FormatError,
    HksError,
    IncompatibleArchitectureError,
    InfeasiblePartitionError,
    InsufficientDataError,
    InvalidInputError,
    MissingSampleError,
    ModeError,
    ShapeError,
    StaleHierarchyError,
    TruncatedFileError,
    UndefinedMetricError,
)
from .federation import FederationConfig, Method, child_seed, run_experiment, _TAG_DATA
from .knowledge import Granularity
from .models import CapacityTier
from .numerics import KdConfig

ROUNDS_CSV_SCHEMA = "# hks-rounds-v1"
ROUNDS_CSV_COLUMNS = (
    "round",
    "mean_local_acc",
    "min_local_acc",
    "max_local_acc",
    "mean_global_acc",
    "mean_ce",
    "mean_kd",
    "hierarchy_built",
)

_EXIT_CODES: tuple[tuple[type, int], ...] = (
    (ConfigError, 2),
    (FormatError, 3),
    (ConsistencyError, 4),
    (TruncatedFileError, 5),
    (InfeasiblePartitionError, 6),
    (EmptyShardError, 7),
    (EmptyDatasetError, 8),
    (DegenerateInputError, 9),
    (MissingSampleError, 10),
    (InsufficientDataError, 11),
    (StaleHierarchyError, 12),
    (ModeError, 13),
    (IncompatibleArchitectureError, 14),
    (UndefinedMetricError, 15),
    (ShapeError, 16),
    (InvalidInputError, 17),
    (HksError, 20),
    (OSError, 21),
)


@dataclass
class RunConfig:
    """Full experiment description: federation settings plus dataset selector."""

    federation: FederationConfig
    synthetic: tuple[int, int, int, float] | None = None
    idx_images: str | None = None
    idx_labels: str | None = None
    idx_test_images: str | None = None
    idx_test_labels: str | None = None
    max_train_samples: int | None = None
    out: str = "runs/latest"

    def validate(self) -> None:
        self.federation.validate()
        if self.synthetic is None and (self.idx_images is None or self.idx_labels is None):
            raise ConfigError(
                "no dataset selected: provide 'synthetic' or both 'idx_images' and 'idx_labels'"
            )
        if self.synthetic is not None and self.idx_images is not None:
            raise ConfigError("choose either 'synthetic' or IDX paths, not both")
        if self.max_train_samples is not None and self.max_train_samples < 1:
            raise ConfigError("constraint violation on 'max_train_samples'")

    def resolved(self) -> dict:
        fed = self.federation
        return {
            "method": fed.method.value,
            "granularity": fed.granularity.value,
            "n_clients": fed.n_clients,
            "rounds": fed.rounds,
            "local_epochs": fed.local_epochs,
            "warmup_rounds": fed.warmup_rounds,
            "lr": fed.lr,
            "batch_size": fed.batch_size,
            "temperature": fed.kd.temperature,
            "alpha_kd": fed.kd.alpha_kd,
            "t_squared_scaling": fed.kd.t_squared_scaling,
            "R": fed.R,
            "alpha_dir": fed.alpha_dir,
            "seed": fed.seed,
            "exclude_self": fed.exclude_self,
            "test_fraction": fed.test_fraction,
            "min_per_client": fed.resolved_min_per_client,
            "fedavg_tier": fed.fedavg_tier.value,
            "d_hash": fed.d_hash,
            "hnsw_m": fed.hnsw_m,
            "hnsw_ef_construction": fed.hnsw_ef_construction,
            "hnsw_ef_search": fed.hnsw_ef_search,
            "linkage": fed.linkage,
            "cluster_space": fed.cluster_space,
            "synthetic": list(self.synthetic) if self.synthetic else None,
            "idx_images": self.idx_images,
            "idx_labels": self.idx_labels,
            "idx_test_images": self.idx_test_images,
            "idx_test_labels": self.idx_test_labels,
            "max_train_samples": self.max_train_samples,
            "out": self.out,
        }


_FED_INT_KEYS = {
    "n_clients",
    "rounds",
    "local_epochs",
    "warmup_rounds",
    "batch_size",
    "R",
    "seed",
    "d_hash",
    "hnsw_m",
    "hnsw_ef_construction",
    "hnsw_ef_search",
}
_FED_FLOAT_KEYS = {"lr", "alpha_dir", "test_fraction"}
_FED_BOOL_KEYS = {"exclude_self"}
_KD_KEYS = {"temperature", "alpha_kd", "t_squared_scaling"}
_OTHER_KEYS = {
    "method",
    "granularity",
    "min_per_client",
    "fedavg_tier",
    "linkage",
    "cluster_space",
    "synthetic",
    "idx_images",
    "idx_labels",
    "idx_test_images",
    "idx_test_labels",
    "max_train_samples",
    "out",
}
KNOWN_KEYS = _FED_INT_KEYS | _FED_FLOAT_KEYS | _FED_BOOL_KEYS | _KD_KEYS | _OTHER_KEYS


def _coerce(key: str, value, kind: type):
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"type mismatch on '{key}': expected {kind.__name__}, got bool")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"type mismatch on '{key}': cannot read {value!r} as {kind.__name__}")


def _parse_synthetic(value) -> tuple[int, int, int, float]:
    if isinstance(value, str):
        parts = value.split(",")
    elif isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        raise ConfigError("type mismatch on 'synthetic': expected 'C,per_class,dim,spread'")
    if len(parts) != 4:
        raise ConfigError("'synthetic' needs exactly C,per_class,dim,spread")
    try:
        return int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])
    except (TypeError, ValueError):
        raise ConfigError("type mismatch on 'synthetic': C,per_class,dim must be int, spread real")


def parse_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge a JSON config file with flag overrides; flags win; unknown keys fail."""
    merged: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}")
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    unknown = sorted(set(merged) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]!r}")

    fed_kwargs: dict = {}
    kd_kwargs: dict = {}
    for key in _FED_INT_KEYS & merged.keys():
        fed_kwargs[key] = _coerce(key, merged[key], int)
    for key in _FED_FLOAT_KEYS & merged.keys():
        fed_kwargs[key] = _coerce(key, merged[key], float)
    for key in _FED_BOOL_KEYS & merged.keys():
        fed_kwargs[key] = _coerce(key, merged[key], bool)
    for key in ("temperature", "alpha_kd"):
        if key in merged:
            kd_kwargs[key] = _coerce(key, merged[key], float)
    if "t_squared_scaling" in merged:
        kd_kwargs["t_squared_scaling"] = _coerce("t_squared_scaling", merged["t_squared_scaling"], bool)
    try:
        if kd_kwargs:
            fed_kwargs["kd"] = KdConfig(**kd_kwargs)
    except InvalidInputError as exc:
        raise ConfigError(f"constraint violation on kd settings: {exc}")
    if "method" in merged:
        try:
            fed_kwargs["method"] = Method(str(merged["method"]).lower())
        except ValueError:
            raise ConfigError(f"unknown method {merged['method']!r}")
    if "granularity" in merged:
        try:
            fed_kwargs["granularity"] = Granularity(str(merged["granularity"]).lower())
        except ValueError:
            raise ConfigError(f"unknown granularity {merged['granularity']!r}")
    if "fedavg_tier" in merged:
        try:
            fed_kwargs["fedavg_tier"] = CapacityTier(str(merged["fedavg_tier"]).lower())
        except ValueError:
            raise ConfigError(f"unknown fedavg_tier {merged['fedavg_tier']!r}")
    if "min_per_client" in merged and merged["min_per_client"] is not None:
        fed_kwargs["min_per_client"] = _coerce("min_per_client", merged["min_per_client"], int)
    for key in ("linkage", "cluster_space"):
        if key in merged:
            fed_kwargs[key] = str(merged[key])

    rc = RunConfig(federation=FederationConfig(**fed_kwargs))
    if merged.get("synthetic") is not None:
        rc.synthetic = _parse_synthetic(merged["synthetic"])
    for key in ("idx_images", "idx_labels", "idx_test_images", "idx_test_labels"):
        if merged.get(key) is not None:
            rc = _set(rc, key, str(merged[key]))
    if merged.get("max_train_samples") is not None:
        rc.max_train_samples = _coerce("max_train_samples", merged["max_train_samples"], int)
    if merged.get("out") is not None:
        rc.out = str(merged["out"])
    rc.validate()
    return rc


def _set(rc: RunConfig, key: str, value) -> RunConfig:
    setattr(rc, key, value)
    return rc


def load_experiment_data(rc: RunConfig) -> tuple[Dataset, Dataset]:
    """Resolve the config's dataset selector into (train, global_test)."""
    seed = rc.federation.seed
    if rc.synthetic is not None:
        n_classes, per_class, dim, spread = rc.synthetic
        return synth_train_and_test(
            n_classes, per_class, dim, spread, child_seed(seed, _TAG_DATA)
        )
    train = load_idx(rc.idx_images, rc.idx_labels)
    if rc.idx_test_images and rc.idx_test_labels:
        global_test = load_idx(rc.idx_test_images, rc.idx_test_labels)
    else:
        # No held-out pair supplied: carve a stratified tenth off the
        # training set to serve as the balanced global test set.
        holdout = split_local_test(
            list(range(len(train))), train, 0.1, child_seed(seed, _TAG_DATA, 1)
        )
        train, global_test = holdout.train, holdout.local_test
    if rc.max_train_samples is not None:
        train = stratified_subsample(train, rc.max_train_samples, child_seed(seed, _TAG_DATA, 2))
    return train, global_test


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run_outputs(out_dir: Path, rc: RunConfig, result, wall_seconds: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "rounds.csv", "w", newline="", encoding="ascii") as f:
        f.write(ROUNDS_CSV_SCHEMA + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ROUNDS_CSV_COLUMNS)
        for r in result.reports:
            writer.writerow(
                [
                    r.round,
                    _fmt(r.mean_local_acc),
                    _fmt(r.min_local_acc),
                    _fmt(r.max_local_acc),
                    _fmt(r.mean_global_acc),
                    _fmt(r.mean_ce),
                    _fmt(r.mean_kd),
                    _fmt(r.hierarchy_built),
                ]
            )
    fed = rc.federation
    summary = {
        "maua": result.summary.maua,
        "best_global_acc": result.summary.best_global_acc,
        "final_global_acc": result.summary.final_global_acc,
        "method": fed.method.value,
        "granularity": fed.granularity.value,
        "R": fed.R,
        "alpha_dir": fed.alpha_dir,
        "seed": fed.seed,
        "wall_seconds": wall_seconds,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="ascii")
    (out_dir / "config.resolved.json").write_text(
        json.dumps(rc.resolved(), indent=2) + "\n", encoding="ascii"
    )


def cmd_run(rc: RunConfig) -> int:
    start = time.perf_counter()
    train, global_test = load_experiment_data(rc)
    result = run_experiment(rc.federation, train, global_test)
    wall = time.perf_counter() - start
    out_dir = Path(rc.out)
    write_run_outputs(out_dir, rc, result, wall)
    summary = result.summary
    maua_txt = "undefined" if summary.maua is None else f"{summary.maua:.4f}"
    final_txt = "undefined" if summary.final_global_acc is None else f"{summary.final_global_acc:.4f}"
    print(
        f"run {rc.federation.method.value}: maua={maua_txt} "
        f"final_global={final_txt} rounds={summary.rounds_run} -> {out_dir}"
    )
    return 0


def _hyperparameter_label(method: str, resolved: dict) -> str:
    if method == Method.HKS.value:
        return f"granularity={resolved['granularity']}"
    if method == Method.FEDCACHE.value:
        return f"R={resolved['R']}"
    if method == Method.FEDAVG.value:
        return f"tier={resolved['fedavg_tier']}"
    return "-"


def _sweep_cases(rc: RunConfig, methods, granularities, r_values, seeds):
    from dataclasses import replace as dc_replace

    for method in methods:
        if method is Method.HKS:
            variants = [("granularity", g) for g in granularities]
        elif method is Method.FEDCACHE:
            variants = [("R", r) for r in r_values]
        else:
            variants = [(None, None)]
        for field_name, value in variants:
            for seed in seeds:
                fed = dc_replace(rc.federation, method=method, seed=seed)
                name = method.value
                if field_name == "granularity":
                    fed = dc_replace(fed, granularity=value)
                    name += f"_{value.value}"
                elif field_name == "R":
                    fed = dc_replace(fed, R=value)
                    name += f"_R{value}"
                elif method is Method.FEDAVG:
                    name += f"_{fed.fedavg_tier.value}"
                yield f"{name}_seed{seed}", fed


def cmd_sweep(rc: RunConfig, methods, granularities, r_values, seeds) -> int:
    sweep_dir = Path(rc.out)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, fed in _sweep_cases(rc, methods, granularities, r_values, seeds):
        case = RunConfig(
            federation=fed,
            synthetic=rc.synthetic,
            idx_images=rc.idx_images,
            idx_labels=rc.idx_labels,
            idx_test_images=rc.idx_test_images,
            idx_test_labels=rc.idx_test_labels,
            max_train_samples=rc.max_train_samples,
            out=str(sweep_dir / name),
        )
        start = time.perf_counter()
        train, global_test = load_experiment_data(case)
        result = run_experiment(case.federation, train, global_test)
        wall = time.perf_counter() - start
        write_run_outputs(Path(case.out), case, result, wall)
        rows.append(
            {
                "method": fed.method.value,
                "hyperparameter": _hyperparameter_label(fed.method.value, case.resolved()),
                "seed": fed.seed,
                "maua": result.summary.maua,
                "best_global_acc": result.summary.best_global_acc,
                "final_global_acc": result.summary.final_global_acc,
                "run_dir": name,
            }
        )
        print(f"sweep case {name}: maua={_fmt_opt(result.summary.maua)}")
    with open(sweep_dir / "comparison.csv", "w", newline="", encoding="ascii") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) if isinstance(v, (float, bool)) else v for k, v in row.items()})
    print(f"sweep: {len(rows)} runs -> {sweep_dir / 'comparison.csv'}")
    return 0


def _fmt_opt(v) -> str:
    return "undefined" if v is None else f"{v:.4f}"


def _read_rounds_csv(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="ascii") as f:
        first = f.readline()
        if not first.startswith("#"):
            raise FormatError(f"{path} is missing the schema comment line")
        for row in csv.DictReader(f):
            rows.append(row)
    return rows


def cmd_report(runs_dir: str, out_file: str | None) -> int:
    """Rebuild the comparison table from every run directory's rounds.csv."""
    base = Path(runs_dir)
    run_dirs = sorted(p.parent for p in base.glob("*/rounds.csv"))
    if (base / "rounds.csv").exists():
        run_dirs.insert(0, base)
    if not run_dirs:
        raise ConfigError(f"no run directories with rounds.csv under {runs_dir}")
    grouped: dict[tuple[str, str], list[dict]] = {}
    for run_dir in run_dirs:
        resolved = json.loads((run_dir / "config.resolved.json").read_text(encoding="ascii"))
        rows = _read_rounds_csv(run_dir / "rounds.csv")
        if rows:
            maua = max(float(r["mean_local_acc"]) for r in rows)
            best_global = max(float(r["mean_global_acc"]) for r in rows)
            final_global = float(rows[-1]["mean_global_acc"])
        else:
            maua = best_global = final_global = float("nan")
        key = (resolved["method"], _hyperparameter_label(resolved["method"], resolved))
        grouped.setdefault(key, []).append(
            {"seed": resolved["seed"], "maua": maua, "best": best_global, "final": final_global}
        )

    header = f"{'method':<12} {'hyperparameters':<20} {'seeds':>5} {'MAUA':>8} {'global(best)':>13} {'global(final)':>14}"
    print(header)
    print("-" * len(header))
    table_rows = []
    for (method, hyper), entries in sorted(grouped.items()):
        maua_mean = sum(e["maua"] for e in entries) / len(entries)
        best_mean = sum(e["best"] for e in entries) / len(entries)
        final_mean = sum(e["final"] for e in entries) / len(entries)
        print(
            f"{method:<12} {hyper:<20} {len(entries):>5} {maua_mean:>8.4f} "
            f"{best_mean:>13.4f} {final_mean:>14.4f}"
        )
        table_rows.append(
            {
                "method": method,
                "hyperparameter": hyper,
                "n_seeds": len(entries),
                "maua_mean": _fmt(maua_mean),
                "best_global_acc_mean": _fmt(best_mean),
                "final_global_acc_mean": _fmt(final_mean),
            }
        )
    if out_file:
        with open(out_file, "w", newline="", encoding="ascii") as f:
            writer = csv.DictWriter(f, fieldnames=list(table_rows[0].keys()), lineterminator="\n")
            writer.writeheader()
            writer.writerows(table_rows)
        print(f"report -> {out_file}")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file; flags override it")
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--granularity", choices=[g.value for g in Granularity])
    p.add_argument("--R", type=int, dest="R")
    p.add_argument("--alpha-dir", type=float, dest="alpha_dir")
    p.add_argument("--rounds", type=int)
    p.add_argument("--warmup-rounds", type=int, dest="warmup_rounds")
    p.add_argument("--n-clients", type=int, dest="n_clients")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--synthetic", metavar="C,PER_CLASS,DIM,SPREAD")
    p.add_argument("--idx-images", dest="idx_images")
    p.add_argument("--idx-labels", dest="idx_labels")
    p.add_argument("--idx-test-images", dest="idx_test_images")
    p.add_argument("--idx-test-labels", dest="idx_test_labels")
    p.add_argument("--max-train-samples", type=int, dest="max_train_samples")


_OVERRIDE_KEYS = (
    "method",
    "granularity",
    "R",
    "alpha_dir",
    "rounds",
    "warmup_rounds",
    "n_clients",
    "lr",
    "batch_size",
    "seed",
    "out",
    "synthetic",
    "idx_images",
    "idx_labels",
    "idx_test_images",
    "idx_test_labels",
    "max_train_samples",
)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="hks", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run one experiment")
    _add_config_flags(run_p)
    sweep_p = sub.add_parser("sweep", help="run a method/granularity/seed cross-product")
    _add_config_flags(sweep_p)
    sweep_p.add_argument("--methods", help="comma-separated method list")
    sweep_p.add_argument("--granularities", help="comma-separated granularity list (hks)")
    sweep_p.add_argument("--R-values", dest="r_values", help="comma-separated R list (fedcache)")
    sweep_p.add_argument("--seeds", help="comma-separated seed list")
    report_p = sub.add_parser("report", help="re-render summaries from stored CSVs")
    report_p.add_argument("runs_dir")
    report_p.add_argument("--out", dest="out_file")

    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.runs_dir, args.out_file)
        overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS}
        rc = parse_config(args.config, overrides)
        if args.command == "run":
            return cmd_run(rc)
        methods = (
            [Method(m.strip().lower()) for m in args.methods.split(",")]
            if args.methods
            else [rc.federation.method]
        )
        granularities = (
            [Granularity(g.strip().lower()) for g in args.granularities.split(",")]
            if args.granularities
            else [rc.federation.granularity]
        )
        r_values = (
            [int(r) for r in args.r_values.split(",")] if args.r_values else [rc.federation.R]
        )
        seeds = (
            [int(s) for s in args.seeds.split(",")] if args.seeds else [rc.federation.seed]
        )
        return cmd_sweep(rc, methods, granularities, r_values, seeds)
    except ValueError as exc:
        if not isinstance(exc, HksError):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return _fail(exc)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps errors to codes
        return _fail(exc)


def _fail(exc: Exception) -> int:
    for exc_type, code in _EXIT_CODES:
        if isinstance(exc, exc_type):
            print(f"error: {exc}", file=sys.stderr)
            return code
    raise exc


def entry() -> None:
    sys.exit(main())
