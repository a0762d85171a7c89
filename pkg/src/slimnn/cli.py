"""Command-line entry point.

Subcommands: train (one config), sweep (a grid of configs, resumable),
report (regenerate tables from stored runs), make-variants (write variant
datasets as IDX files), conv-sweep (the conv baseline grid).

Config files are plain text KEY = VALUE with dotted sections; `--set
KEY=VALUE` overrides individual keys. Resolution order: file values, then
the DATA_DIR environment variable, then command-line flags.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

from . import harness
from .data import Dataset, load_idx, load_idx_images, make_variant, write_idx, VARIANTS
from .errors import ConfigurationError, SlimnnError
from .harness import (
    ExperimentConfig,
    aggregate,
    config_from_dict,
    config_to_dict,
    conv_grid,
    conv_sweep,
    emit_figure_csv,
    emit_histograms,
    emit_report,
    ensure_records,
    existing_records,
    fingerprint,
    load_config,
    load_run_records,
    pareto_front,
    run_single_trial,
    save_run_record,
    stored_fingerprints,
)
from .network import ConvSpec, TrainHyper
from .pruning import PruningPlan

log = logging.getLogger("slimnn")

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


# ---------------------------------------------------------------------------
# config file handling


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {s!r}")


def _parse_list(cast):
    def parse(s):
        return [cast(item.strip()) for item in s.split(",") if item.strip()]

    return parse


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


VALID_KEYS = {
    "dataset": str,
    "architecture": str,
    "method": str,
    "runs": int,
    "base_seed": int,
    "l1_lambda": float,
    "compression_ratio": _opt_float,
    "activation": str,
    "sign_hash": _parse_bool,
    "validation_fraction": float,
    "train_size": int,
    "test_size": int,
    "patch_source": str,
    "data_dir": str,
    "out_dir": str,
    "plan.final_sparsity": float,
    "plan.steps": int,
    "plan.exponent": float,
    "plan.epochs_between_prunes": int,
    "plan.warmup_epochs": int,
    "plan.obd_sample_size": int,
    "plan.schedule": str,
    "plan.scope": str,
    "plan.trigger": str,
    "plan.plateau_patience": int,
    "plan.hessian_variant": str,
    "hyper.learning_rate": float,
    "hyper.batch_size": int,
    "hyper.regularization": str,
    "hyper.reg_lambda": float,
    "hyper.max_epochs": int,
    "hyper.patience": int,
    "conv.kernel": int,
    "conv.out_channels": int,
    "conv.stride": int,
    "conv.pool": int,
    "conv.dropout": float,
    "sweep.methods": _parse_list(str),
    "sweep.architectures": _parse_list(str),
    "sweep.datasets": _parse_list(str),
    "sweep.sparsities": _parse_list(float),
    "sweep.ratios": _parse_list(float),
    "conv_sweep.kernels": _parse_list(int),
    "conv_sweep.channels": _parse_list(int),
    "conv_sweep.strides": _parse_list(int),
    "conv_sweep.pools": _parse_list(int),
    "conv_sweep.dropouts": _parse_list(float),
    "conv_sweep.epochs": int,
    "conv_sweep.runs": int,
}


def _check_key(key):
    if key not in VALID_KEYS:
        valid = ", ".join(sorted(VALID_KEYS))
        raise ConfigurationError(f"unknown config key {key!r}; valid keys: {valid}")


def parse_config_text(text):
    """KEY = VALUE lines with # comments; keys may carry dotted sections."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected KEY = VALUE, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        _check_key(key)
        values[key] = VALID_KEYS[key](value.strip())
    return values


def apply_overrides(values, overrides):
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        _check_key(key)
        values[key] = VALID_KEYS[key](value.strip())
    return values


def resolve_settings(args):
    """file < environment < command line, per key."""
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        values = parse_config_text(path.read_text())
    if os.environ.get("DATA_DIR"):
        values["data_dir"] = os.environ["DATA_DIR"]
    apply_overrides(values, getattr(args, "set", None))
    if getattr(args, "data", None):
        values["data_dir"] = args.data
    if getattr(args, "out", None):
        values["out_dir"] = args.out
    return values


def build_experiment_config(values):
    plan_kwargs = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("plan.")}
    hyper_kwargs = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("hyper.")}
    conv_kwargs = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("conv.")}
    top = {
        k: v
        for k, v in values.items()
        if "." not in k and k not in ("data_dir", "out_dir", "l1_lambda")
    }
    if conv_kwargs or top.get("architecture") == "conv":
        top["conv"] = ConvSpec(**conv_kwargs)
    return ExperimentConfig(
        plan=PruningPlan(**plan_kwargs), hyper=TrainHyper(**hyper_kwargs), **top
    )


def expand_sweep_cells(values):
    """Cartesian grid over the sweep.* keys, anchored on the base config."""
    base = build_experiment_config(
        {k: v for k, v in values.items() if not k.startswith(("sweep.", "conv_sweep."))}
    )
    methods = values.get("sweep.methods", [base.method])
    archs = values.get("sweep.architectures", [base.architecture])
    datasets = values.get("sweep.datasets", [base.dataset])
    sparsities = values.get("sweep.sparsities")
    ratios = values.get("sweep.ratios")
    l1_lambda = values.get("l1_lambda", 1e-5)

    def hyper_for(method):
        # the mag_* method names carry their regularizer; mag_l1 runs use
        # their own (weaker) default decay
        if method == "mag_l1":
            return replace(base.hyper, regularization="l1", reg_lambda=l1_lambda)
        if method == "mag_l2":
            return replace(base.hyper, regularization="l2")
        return base.hyper

    cells = {}
    for method in methods:
        for arch in archs:
            if arch == "conv":
                continue  # conv baselines run through conv-sweep
            for dataset in datasets:
                common = dict(
                    method=method, architecture=arch, dataset=dataset,
                    hyper=hyper_for(method),
                )
                if method == "hashednet":
                    for r in ratios or [base.compression_ratio]:
                        if r is None:
                            raise ConfigurationError("hashednet cells need sweep.ratios")
                        cell = replace(base, compression_ratio=r, **common)
                        cells[fingerprint(cell)] = cell
                elif method == "none":
                    cell = replace(
                        base, plan=replace(base.plan, final_sparsity=0.0), **common
                    )
                    cells[fingerprint(cell)] = cell
                else:
                    for s in sparsities or [base.plan.final_sparsity]:
                        cell = replace(
                            base,
                            plan=replace(base.plan, final_sparsity=s, method=method),
                            **common,
                        )
                        cells[fingerprint(cell)] = cell
    return list(cells.values())


# ---------------------------------------------------------------------------
# data


def require_data_dir(values):
    data_dir = values.get("data_dir")
    if not data_dir:
        raise ConfigurationError(
            "no data directory: pass --data DIR or set the DATA_DIR environment variable"
        )
    return Path(data_dir)


def _find_file(data_dir, stem):
    for name in (stem, stem + ".gz"):
        path = Path(data_dir) / name
        if path.exists():
            return path
    raise ConfigurationError(
        f"missing {stem}[.gz] in {data_dir}; expected the standard IDX files "
        f"{sorted(MNIST_FILES.values())}"
    )


@lru_cache(maxsize=2)
def load_base_mnist(data_dir):
    data_dir = str(data_dir)
    train = load_idx(
        _find_file(data_dir, MNIST_FILES["train_images"]),
        _find_file(data_dir, MNIST_FILES["train_labels"]),
    )
    test = load_idx(
        _find_file(data_dir, MNIST_FILES["test_images"]),
        _find_file(data_dir, MNIST_FILES["test_labels"]),
    )
    return train, test


def mnist_available(data_dir):
    try:
        for stem in MNIST_FILES.values():
            _find_file(data_dir, stem)
        return True
    except ConfigurationError:
        return False


# ---------------------------------------------------------------------------
# work queue


def _trial_task(config_dict, data_dir, out_dir, run_index):
    config = config_from_dict(config_dict)
    base_train, base_test = load_base_mnist(data_dir)
    rec = run_single_trial(config, base_train, base_test, run_index)
    save_run_record(rec, out_dir, config)
    return fingerprint(config), run_index, rec.failed, rec.error


def run_cells(cells, data_dir, out_dir, jobs=1):
    """Execute every missing (cell, run) pair, optionally in parallel."""
    pending = []
    for config in cells:
        have = {r.run_index for r in existing_records(out_dir, fingerprint(config))}
        pending.extend(
            (config, i) for i in range(config.runs) if i not in have
        )
    failures = []
    if jobs <= 1:
        base = {}
        for config, i in pending:
            if not base:
                base["train"], base["test"] = load_base_mnist(str(data_dir))
            rec = run_single_trial(config, base["train"], base["test"], i)
            save_run_record(rec, out_dir, config)
            if rec.failed:
                failures.append((fingerprint(config), i, rec.error))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_trial_task, config_to_dict(config), str(data_dir), str(out_dir), i)
                for config, i in pending
            ]
            for fut in as_completed(futures):
                fp, i, failed, error = fut.result()
                if failed:
                    failures.append((fp, i, error))
    return len(pending), failures


def emit_all_reports(out_dir, fmt="both"):
    """Aggregate every stored fingerprint and write reports + histograms."""
    out_dir = Path(out_dir)
    aggregates = []
    all_records = []
    for fp in stored_fingerprints(out_dir):
        records = load_run_records(out_dir, fp)
        if not records:
            continue
        config = load_config(out_dir, fp)
        aggregates.append(aggregate(records, config))
        all_records.extend(records)
    reports_dir = out_dir / "reports"
    written = []
    if fmt in ("csv", "both"):
        written.append(emit_report(aggregates, "csv", reports_dir / "results.csv"))
    if fmt in ("markdown", "both"):
        written.append(emit_report(aggregates, "markdown", reports_dir / "results.md"))
    written.extend(emit_histograms(all_records, out_dir))
    _emit_method_curves(aggregates, reports_dir)
    return aggregates, written


def _emit_method_curves(aggregates, reports_dir):
    by_dataset = {}
    for agg in aggregates:
        if agg.config is None:
            continue
        method = "conv" if agg.config.architecture == "conv" else agg.config.method
        label = f"{method}-{agg.config.hidden_units() or ''}".rstrip("-")
        by_dataset.setdefault(agg.config.dataset, []).append(
            (label, int(round(agg.mean_param_count)), agg.mean_accuracy, agg.std_accuracy)
        )
    for dataset, rows in by_dataset.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        emit_figure_csv(rows, reports_dir / f"accuracy_vs_params_{dataset}.csv")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    values = resolve_settings(args)
    data_dir = require_data_dir(values)
    out_dir = Path(values.get("out_dir", "out"))
    config = build_experiment_config(
        {k: v for k, v in values.items() if not k.startswith(("sweep.", "conv_sweep."))}
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(config_to_dict(config), indent=2, default=float)
    )
    n_run, failures = run_cells([config], data_dir, out_dir, jobs=args.jobs)
    records = load_run_records(out_dir, fingerprint(config))
    agg = aggregate(records, config)
    print(
        f"{fingerprint(config)}: ran {n_run} new trial(s); "
        f"mean accuracy {agg.mean_accuracy * 100:.2f} "
        f"(std {agg.std_accuracy * 100:.2f}) over {agg.run_count} run(s)"
    )
    for fp, i, error in failures:
        print(f"  FAILED run {i}: {error}", file=sys.stderr)
    return 1 if failures else 0


def cmd_sweep(args):
    values = resolve_settings(args)
    data_dir = require_data_dir(values)
    out_dir = Path(values.get("out_dir", "out"))
    cells = expand_sweep_cells(values)
    if not cells:
        raise ConfigurationError("sweep expands to zero cells")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps({k: str(v) for k, v in sorted(values.items())}, indent=2)
    )
    print(f"sweep: {len(cells)} cell(s), {sum(c.runs for c in cells)} trial(s) total")
    n_run, failures = run_cells(cells, data_dir, out_dir, jobs=args.jobs)
    aggregates, written = emit_all_reports(out_dir, fmt="both")
    print(f"ran {n_run} new trial(s); wrote {len(written)} report file(s) under {out_dir}")
    for fp, i, error in failures:
        print(f"  FAILED {fp} run {i}: {error}", file=sys.stderr)
    return 1 if failures else 0


def cmd_report(args):
    out_dir = Path(args.out or os.environ.get("DATA_DIR", "out"))
    if not out_dir.exists():
        raise ConfigurationError(f"run directory not found: {out_dir}")
    aggregates, written = emit_all_reports(out_dir, fmt=args.format)
    if not aggregates:
        print(f"warning: no stored runs under {out_dir}; wrote header-only reports")
    for path in written:
        print(path)
    return 0


def cmd_make_variants(args):
    values = resolve_settings(args)
    data_dir = require_data_dir(values)
    out_dir = Path(values.get("out_dir", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    base_train, base_test = load_base_mnist(str(data_dir))
    variants = args.variant or list(VARIANTS)
    pool = None
    if "background_images" in variants:
        source = args.patch_source or values.get("patch_source") or "synthetic"
        if source == "synthetic":
            from .data import synthesize_patch_pool

            pool = synthesize_patch_pool(args.seed)
        else:
            pool = load_idx_images(source)
    for variant in variants:
        for split, ds in (("train", base_train), ("test", base_test)):
            out = make_variant(
                ds, variant, seed=args.seed + (0 if split == "train" else 1),
                patch_source=pool if variant == "background_images" else None,
            )
            img_path = out_dir / f"mnist_{variant}-{split}-images-idx3-ubyte"
            lbl_path = out_dir / f"mnist_{variant}-{split}-labels-idx1-ubyte"
            write_idx(out, img_path, lbl_path)
            print(f"wrote {img_path} ({len(out)} images)")
    return 0


def cmd_conv_sweep(args):
    values = resolve_settings(args)
    data_dir = require_data_dir(values)
    out_dir = Path(values.get("out_dir", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = conv_grid(
        kernels=values.get("conv_sweep.kernels", (5, 7, 10)),
        channels=values.get("conv_sweep.channels", (4, 8, 12)),
        strides=values.get("conv_sweep.strides", (1, 2, 3)),
        pools=values.get("conv_sweep.pools", (2, 3, 4)),
        dropouts=values.get("conv_sweep.dropouts", (0.0, 0.1, 0.2)),
    )
    base_train, base_test = load_base_mnist(str(data_dir))
    points = conv_sweep(
        grid,
        base_train,
        base_test,
        runs=values.get("conv_sweep.runs", 5),
        epochs=values.get("conv_sweep.epochs", 30),
        base_seed=values.get("base_seed", 0),
        out_dir=out_dir,
        train_size=values.get("train_size", 50000),
        test_size=values.get("test_size", 12000),
    )
    front = pareto_front([(p.param_count, p.mean_accuracy, p) for p in points])
    emit_figure_csv(
        [(str(p.spec), p.param_count, p.mean_accuracy, p.std_accuracy) for p in points],
        out_dir / "reports" / "conv_sweep_all.csv",
    )
    emit_figure_csv(
        [(str(p.spec), m, a, p.std_accuracy) for m, a, p in front],
        out_dir / "reports" / "conv_sweep_pareto.csv",
    )
    print(f"conv sweep: {len(points)} valid cell(s), {len(front)} on the Pareto front")
    for m, a, p in front:
        print(f"  {m:>8d} params  {a * 100:6.2f}%  {p.spec}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slimnn",
        description="Neural-network compression benchmark: pruning, hashing, conv baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="config file (KEY = VALUE lines)")
        p.add_argument("--data", help="directory with MNIST IDX files (or env DATA_DIR)")
        p.add_argument("--out", help="output directory (default: out)")
        p.add_argument("--jobs", type=int, default=1, help="concurrent trials")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("train", help="run one experiment config")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a grid of configs, then report")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="regenerate reports from stored runs")
    p.add_argument("--out", help="run directory to report on")
    p.add_argument("--format", choices=("csv", "markdown", "both"), default="both")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-variants", help="write variant datasets as IDX files")
    common(p, config_required=False)
    p.add_argument("--variant", action="append", choices=VARIANTS,
                   help="variant to generate (repeatable; default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-source", help="IDX image pool for background_images, or 'synthetic'")
    p.set_defaults(func=cmd_make_variants)

    p = sub.add_parser("conv-sweep", help="train the conv baseline grid")
    common(p, config_required=False)
    p.set_defaults(func=cmd_conv_sweep)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SlimnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
