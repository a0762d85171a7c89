"""Experiment orchestration: trials, aggregation, sweeps, reports.

A cell of the benchmark grid is an ExperimentConfig; its fingerprint (a
stable hash of the full config) keys the run directory, so sweeps resume
by skipping finished cells. Run i of a config uses seed base_seed + i for
everything random: init, batch order, splits, variant generation.
"""

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    load_idx,
    make_variant,
    normalize,
    resplit,
    synthesize_patch_pool,
)
from .errors import ConfigurationError, DataError, TrainingDivergedError
from .estimators import HashedMLPClassifier, PrunedMLPClassifier, SimpleConvClassifier
from .network import ConvSpec, TrainHyper
from .pruning import PruningPlan, TrajectoryPoint
from .seeding import derive_seed
from .training import evaluate

log = logging.getLogger("slimnn")

METHODS = ("none", "mag_l1", "mag_l2", "obd", "hashednet")
HISTOGRAM_BIN_WIDTH = 0.01


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    architecture: str = "dense-100"  # dense-<H> | hashed-<H> | conv
    method: str = "none"
    plan: PruningPlan = PruningPlan()
    hyper: TrainHyper = TrainHyper()
    compression_ratio: float | None = None  # hashednet bucket ratio
    activation: str = "relu"
    sign_hash: bool = False
    conv: ConvSpec | None = None
    runs: int = 5
    base_seed: int = 0
    validation_fraction: float = 0.1
    train_size: int = 50000
    test_size: int = 12000
    patch_source: str | None = None  # path to an image pool, or "synthetic"

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigurationError("runs must be >= 1")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected {METHODS}")
        if self.compression_ratio is not None and not 0.0 < self.compression_ratio <= 1.0:
            raise ConfigurationError("compression_ratio must be in (0, 1]")
        if self.method == "hashednet" and self.compression_ratio is None:
            raise ConfigurationError("hashednet needs a compression_ratio")
        if self.method == "conv" or self.architecture == "conv":
            if self.conv is None:
                raise ConfigurationError("conv architecture needs a ConvSpec")
        # the mag_* method names carry their regularizer
        if self.method == "mag_l1" and self.hyper.regularization != "l1":
            raise ConfigurationError("method mag_l1 requires hyper.regularization = l1")
        if self.method == "mag_l2" and self.hyper.regularization != "l2":
            raise ConfigurationError("method mag_l2 requires hyper.regularization = l2")

    def hidden_units(self):
        if self.architecture.startswith(("dense-", "hashed-")):
            return int(self.architecture.split("-", 1)[1])
        return None

    def edges_removed_pct(self):
        if self.method in ("mag_l1", "mag_l2", "obd"):
            return self.plan.final_sparsity * 100.0
        if self.method == "hashednet":
            return (1.0 - self.compression_ratio) * 100.0
        return 0.0


def config_to_dict(config: ExperimentConfig):
    return asdict(config)


def config_from_dict(d):
    d = dict(d)
    d["plan"] = PruningPlan(**d["plan"])
    d["hyper"] = TrainHyper(**d["hyper"])
    if d.get("conv") is not None:
        d["conv"] = ConvSpec(**d["conv"])
    return ExperimentConfig(**d)


def fingerprint(config: ExperimentConfig):
    """Stable hash of the full config; keys run directories and reports."""
    blob = json.dumps(config_to_dict(config), sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    fingerprint: str
    run_index: int
    seed: int
    final_test_accuracy: float
    best_val_accuracy: float
    param_count: int
    achieved_sparsity: float
    wall_clock_seconds: float
    trajectory: list = field(default_factory=list)
    histogram: list = field(default_factory=list)  # (bin_center, count) rows
    failed: bool = False
    error: str = ""

    def comparable(self):
        """Everything deterministic; drops wall-clock time."""
        d = asdict(self)
        d.pop("wall_clock_seconds")
        return d


@dataclass
class AggregateRecord:
    fingerprint: str
    mean_accuracy: float
    std_accuracy: float
    run_count: int
    mean_param_count: float
    degenerate: bool = False  # single-sample std convention: reported as 0
    had_failures: bool = False
    config: ExperimentConfig | None = None


# ---------------------------------------------------------------------------
# estimators from configs


def estimator_for_config(config: ExperimentConfig, seed):
    if config.architecture == "conv":
        spec = config.conv
        return SimpleConvClassifier(
            kernel=spec.kernel,
            out_channels=spec.out_channels,
            stride=spec.stride,
            pool=spec.pool,
            dropout=spec.dropout,
            activation=config.activation,
            penalty=config.hyper.regularization,
            alpha=config.hyper.reg_lambda,
            learning_rate=config.hyper.learning_rate,
            batch_size=config.hyper.batch_size,
            epochs=config.hyper.max_epochs,
            random_state=seed,
        )
    if config.method in ("none", "mag_l1", "mag_l2", "obd"):
        hidden = config.hidden_units()
        if hidden is None:
            raise ConfigurationError(
                f"method {config.method} needs a dense-<H> architecture, got {config.architecture}"
            )
        plan = config.plan
        if config.method == "none":
            plan = replace(plan, final_sparsity=0.0)
        else:
            plan = replace(plan, method=config.method)
        return PrunedMLPClassifier(
            hidden_units=hidden,
            activation=config.activation,
            method=plan.method,
            final_sparsity=plan.final_sparsity,
            prune_steps=plan.steps,
            schedule_exponent=plan.exponent,
            prune_interval=plan.epochs_between_prunes,
            warmup_epochs=plan.warmup_epochs,
            schedule=plan.schedule,
            scope=plan.scope,
            trigger=plan.trigger,
            plateau_patience=plan.plateau_patience,
            obd_sample_size=plan.obd_sample_size,
            hessian_variant=plan.hessian_variant,
            penalty=config.hyper.regularization,
            alpha=config.hyper.reg_lambda,
            learning_rate=config.hyper.learning_rate,
            batch_size=config.hyper.batch_size,
            max_epochs=config.hyper.max_epochs,
            patience=config.hyper.patience,
            validation_fraction=config.validation_fraction,
            random_state=seed,
        )
    # hashednet
    hidden = config.hidden_units()
    if hidden is None:
        raise ConfigurationError(
            f"hashednet needs a dense-<H> or hashed-<H> architecture, got {config.architecture}"
        )
    pretrain = config.plan.warmup_epochs + config.plan.steps * config.plan.epochs_between_prunes
    return HashedMLPClassifier(
        hidden_units=hidden,
        compression_ratio=config.compression_ratio,
        sign_hash=config.sign_hash,
        activation=config.activation,
        penalty=config.hyper.regularization,
        alpha=config.hyper.reg_lambda,
        learning_rate=config.hyper.learning_rate,
        batch_size=config.hyper.batch_size,
        pretrain_epochs=pretrain,
        max_epochs=config.hyper.max_epochs,
        patience=config.hyper.patience,
        validation_fraction=config.validation_fraction,
        random_state=seed,
    )


# ---------------------------------------------------------------------------
# trials


def _patch_pool_for(config: ExperimentConfig, seed):
    if config.patch_source is None:
        raise ConfigurationError(
            "dataset mnist_background_images needs patch_source "
            "(a path to an IDX image pool, or 'synthetic')"
        )
    if config.patch_source == "synthetic":
        return synthesize_patch_pool(derive_seed(seed, "patches"))
    from .data import load_idx_images

    return load_idx_images(config.patch_source)


def prepare_run_data(config: ExperimentConfig, base_train: Dataset, base_test: Dataset, seed):
    """Resplit, generate the variant if any, and normalize; all seeded."""
    train, test = resplit(
        base_train, base_test, derive_seed(seed, "split"),
        train_size=config.train_size, test_size=config.test_size,
    )
    if config.dataset != "mnist":
        if config.dataset not in (
            "mnist_rotation", "mnist_background_random", "mnist_background_images",
        ):
            raise ConfigurationError(f"unknown dataset {config.dataset!r}")
        variant = config.dataset.removeprefix("mnist_")
        pool = _patch_pool_for(config, seed) if variant == "background_images" else None
        train = make_variant(train, variant, derive_seed(seed, "variant", "train"), pool)
        test = make_variant(test, variant, derive_seed(seed, "variant", "test"), pool)
    train, (test,) = normalize(train, [test])
    return train, test


def run_single_trial(config: ExperimentConfig, base_train: Dataset, base_test: Dataset,
                     run_index) -> RunRecord:
    fp = fingerprint(config)
    seed = config.base_seed + run_index
    start = time.perf_counter()
    try:
        train, test = prepare_run_data(config, base_train, base_test, seed)
        est = estimator_for_config(config, seed)
        est.fit(train.flat_images(), train.labels)
        test_acc = evaluate(est.network_, test.flat_images(), test.labels)
        trajectory = [asdict(p) for p in getattr(est, "trajectory_", [])]
        histogram = [list(row) for row in weight_histogram(est.network_, HISTOGRAM_BIN_WIDTH)]
        return RunRecord(
            fingerprint=fp,
            run_index=run_index,
            seed=seed,
            final_test_accuracy=test_acc,
            best_val_accuracy=getattr(est, "best_validation_accuracy_", test_acc),
            param_count=est.param_count_,
            achieved_sparsity=getattr(est, "sparsity_", 0.0),
            wall_clock_seconds=time.perf_counter() - start,
            trajectory=trajectory,
            histogram=histogram,
        )
    except TrainingDivergedError as exc:
        log.warning("run %d of %s diverged: %s", run_index, fp, exc)
        return RunRecord(
            fingerprint=fp,
            run_index=run_index,
            seed=seed,
            final_test_accuracy=float("nan"),
            best_val_accuracy=float("nan"),
            param_count=0,
            achieved_sparsity=0.0,
            wall_clock_seconds=time.perf_counter() - start,
            trajectory=[asdict(p) for p in (exc.trajectory or [])],
            failed=True,
            error=str(exc),
        )


def run_trials(config: ExperimentConfig, base_train: Dataset, base_test: Dataset,
               out_dir=None) -> list:
    """All runs of one config; reproducible from (config, base_seed)."""
    records = []
    for i in range(config.runs):
        rec = run_single_trial(config, base_train, base_test, i)
        if out_dir is not None:
            save_run_record(rec, out_dir, config)
        records.append(rec)
    return records


def ensure_records(config: ExperimentConfig, base_train: Dataset, base_test: Dataset,
                   out_dir=None) -> list:
    """run_trials, but skipping run indices already stored under out_dir."""
    have = {r.run_index: r for r in existing_records(out_dir, fingerprint(config))}
    records = []
    for i in range(config.runs):
        if i in have:
            records.append(have[i])
            continue
        rec = run_single_trial(config, base_train, base_test, i)
        if out_dir is not None:
            save_run_record(rec, out_dir, config)
        records.append(rec)
    return records


def aggregate(records, config: ExperimentConfig | None = None) -> AggregateRecord:
    """Mean and (n-1)-denominator std of final test accuracy."""
    if not records:
        raise ConfigurationError("aggregate needs at least one record")
    fps = {r.fingerprint for r in records}
    if len(fps) != 1:
        raise ConfigurationError(f"mixed fingerprints in aggregate: {sorted(fps)}")
    ok = [r for r in records if not r.failed]
    had_failures = len(ok) < len(records)
    if not ok:
        raise ConfigurationError(f"all {len(records)} runs of {fps.pop()} failed")
    # canonical reduction order makes aggregation exactly permutation-invariant
    accs = np.sort([r.final_test_accuracy for r in ok])
    return AggregateRecord(
        fingerprint=records[0].fingerprint,
        mean_accuracy=float(accs.mean()),
        std_accuracy=float(accs.std(ddof=1)) if len(ok) > 1 else 0.0,
        run_count=len(ok),
        mean_param_count=float(np.mean(np.sort([r.param_count for r in ok]))),
        degenerate=len(ok) == 1,
        had_failures=had_failures,
        config=config,
    )


# ---------------------------------------------------------------------------
# conv sweep


def conv_grid(kernels=(5, 7, 10), channels=(4, 8, 12), strides=(1, 2, 3),
              pools=(2, 3, 4), dropouts=(0.0, 0.1, 0.2)):
    """Cartesian grid of ConvSpec within the sweep bounds."""
    for k in kernels:
        for ch in channels:
            for s in strides:
                for p in pools:
                    for d in dropouts:
                        yield ConvSpec(kernel=k, out_channels=ch, stride=s, pool=p, dropout=d)


@dataclass
class ConvPoint:
    spec: ConvSpec
    param_count: int
    mean_accuracy: float
    std_accuracy: float


def conv_sweep(specs, base_train: Dataset, base_test: Dataset, runs=5, epochs=30,
               base_seed=0, hyper: TrainHyper | None = None, out_dir=None,
               train_size=50000, test_size=12000):
    """Train every valid grid point `runs` x `epochs` and average accuracy.

    Invalid specs (output collapses below 1 pixel) are skipped with a log
    entry. Returns (param_count, accuracy) points for Pareto filtering.
    """
    if hyper is None:
        hyper = TrainHyper(learning_rate=1e-2, batch_size=16, regularization="l2",
                           reg_lambda=1e-3, max_epochs=epochs, patience=epochs)
    points = []
    for spec in specs:
        try:
            spec.validate()
        except ConfigurationError as exc:
            log.info("skipping conv spec %s: %s", spec, exc)
            continue
        config = ExperimentConfig(
            architecture="conv", method="none", conv=spec, runs=runs,
            base_seed=base_seed, hyper=replace(hyper, max_epochs=epochs),
            train_size=train_size, test_size=test_size,
        )
        records = ensure_records(config, base_train, base_test, out_dir=out_dir)
        agg = aggregate(records, config)
        points.append(ConvPoint(
            spec=spec,
            param_count=int(round(agg.mean_param_count)),
            mean_accuracy=agg.mean_accuracy,
            std_accuracy=agg.std_accuracy,
        ))
    return points


# ---------------------------------------------------------------------------
# pareto and histograms


def pareto_front(points):
    """Subset not dominated: keep p unless some q has m <= and acc >= with
    one strict. Output sorted by parameter count."""
    pts = sorted(points, key=lambda t: (t[0], -t[1]))
    out = []
    best = -np.inf
    i = 0
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j][0] == pts[i][0]:
            j += 1
        group_max = pts[i][1]  # sorted descending within equal m
        if group_max > best:
            out.extend(p for p in pts[i:j] if p[1] == group_max)
            best = group_max
        i = j
    return out


def weight_histogram(net, bin_width):
    """(bin_center, count) rows over alive prunable weights, bins symmetric
    about zero with the given width."""
    if bin_width <= 0:
        raise ConfigurationError("bin_width must be positive")
    parts = [layer.weights[layer.mask > 0.5] for _, layer in net.dense_layers()]
    if not parts:
        return []
    values = np.concatenate(parts)
    centers_idx = np.rint(values / bin_width).astype(np.int64)
    uniq, counts = np.unique(centers_idx, return_counts=True)
    return [(float(c * bin_width), int(n)) for c, n in zip(uniq, counts)]


def near_zero_fraction(histogram_rows):
    """Fraction of mass in the bin nearest zero."""
    total = sum(n for _, n in histogram_rows)
    if total == 0:
        return 0.0
    zero = sum(n for c, n in histogram_rows if abs(c) < 1e-12)
    return zero / total


# ---------------------------------------------------------------------------
# storage


def run_dir(out_dir, fp):
    return Path(out_dir) / "runs" / fp


def save_run_record(rec: RunRecord, out_dir, config: ExperimentConfig | None = None):
    d = run_dir(out_dir, rec.fingerprint)
    d.mkdir(parents=True, exist_ok=True)
    if config is not None:
        cfg_path = d / "config.json"
        if not cfg_path.exists():
            cfg_path.write_text(json.dumps(config_to_dict(config), indent=2, default=float))
    path = d / f"run{rec.run_index}.json"
    path.write_text(json.dumps(asdict(rec), default=float))
    return path


def load_run_records(out_dir, fp):
    d = run_dir(out_dir, fp)
    records = []
    for path in sorted(d.glob("run*.json")):
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"unreadable run record {path}: {exc}") from None
        raw["trajectory"] = [dict(p) for p in raw.get("trajectory", [])]
        records.append(RunRecord(**raw))
    return records


def existing_records(out_dir, fp):
    if out_dir is None:
        return []
    return load_run_records(out_dir, fp)


def load_config(out_dir, fp):
    path = run_dir(out_dir, fp) / "config.json"
    if not path.exists():
        return None
    return config_from_dict(json.loads(path.read_text()))


def stored_fingerprints(out_dir):
    base = Path(out_dir) / "runs"
    if not base.is_dir():
        return []
    return sorted(p.name for p in base.iterdir() if p.is_dir())


# ---------------------------------------------------------------------------
# reports


CSV_COLUMNS = (
    "method", "hidden_units", "dataset", "edges_removed_pct", "compression_ratio",
    "mean_accuracy", "std_accuracy", "runs", "mean_param_count", "fingerprint",
)

_METHOD_TITLES = {
    "none": "Baseline",
    "mag_l1": "MagL1",
    "mag_l2": "MagL2",
    "obd": "OBD",
    "hashednet": "HashedNet",
    "conv": "Conv",
}

_DATASET_ORDER = (
    "mnist", "mnist_background_images", "mnist_background_random", "mnist_rotation",
)


def _report_row(agg: AggregateRecord):
    cfg = agg.config
    if cfg is None:
        raise ConfigurationError(f"aggregate {agg.fingerprint} lacks its config")
    method = "conv" if cfg.architecture == "conv" else cfg.method
    ratio = cfg.compression_ratio
    if method in ("mag_l1", "mag_l2", "obd", "none"):
        hidden = cfg.hidden_units()
        n_w = 784 * hidden + hidden * 10
        n_b = hidden + 10
        alive = (1.0 - cfg.plan.final_sparsity if method != "none" else 1.0) * n_w
        ratio = (alive + n_b) / (n_w + n_b)
    return {
        "method": method,
        "hidden_units": cfg.hidden_units() if cfg.hidden_units() is not None else "",
        "dataset": cfg.dataset,
        "edges_removed_pct": f"{cfg.edges_removed_pct():g}",
        "compression_ratio": f"{ratio:.6f}" if ratio is not None else "",
        "mean_accuracy": f"{agg.mean_accuracy:.6f}",
        "std_accuracy": f"{agg.std_accuracy:.6f}",
        "runs": agg.run_count,
        "mean_param_count": f"{agg.mean_param_count:.1f}",
        "fingerprint": agg.fingerprint,
    }


def emit_report(aggregates, fmt="csv", path="report.csv"):
    """Write aggregates as CSV (long form) or markdown (pivot layout:
    rows = removal percentages, columns = datasets)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for agg in aggregates:
                writer.writerow(_report_row(agg))
        return path
    if fmt != "markdown":
        raise ConfigurationError(f"unknown report format {fmt!r}")

    groups = {}
    for agg in aggregates:
        row = _report_row(agg)
        key = (row["method"], row["hidden_units"])
        groups.setdefault(key, []).append((row, agg))
    lines = []
    for (method, hidden), items in sorted(groups.items(), key=lambda kv: str(kv[0])):
        title = _METHOD_TITLES.get(method, method)
        suffix = f" {hidden} hidden units" if hidden != "" else ""
        lines.append(f"## {title}{suffix}")
        lines.append("")
        datasets = [d for d in _DATASET_ORDER if any(r["dataset"] == d for r, _ in items)]
        datasets += sorted(
            {r["dataset"] for r, _ in items} - set(datasets)
        )
        header = ["edges removed"] + [d.replace("_", " ") for d in datasets]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        by_pct = {}
        for row, agg in items:
            by_pct.setdefault(float(row["edges_removed_pct"]), {})[row["dataset"]] = agg
        for pct in sorted(by_pct):
            cells = [f"{pct:g}%"]
            for d in datasets:
                agg = by_pct[pct].get(d)
                if agg is None:
                    cells.append("")
                else:
                    cells.append(
                        f"{agg.mean_accuracy * 100:.2f} ({agg.std_accuracy * 100:.2f})"
                    )
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    path.write_text("\n".join(lines))
    return path


def emit_histograms(records, out_dir):
    """One CSV of (bin_center, count) per stored run."""
    base = Path(out_dir) / "histograms"
    base.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        if not rec.histogram:
            continue
        path = base / f"{rec.fingerprint}_run{rec.run_index}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bin_center", "count"])
            for center, count in rec.histogram:
                writer.writerow([f"{center:.6f}", count])
        paths.append(path)
    return paths


def emit_figure_csv(points, path):
    """Accuracy-vs-size curve data: label, param_count, mean, std."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "param_count", "mean_accuracy", "std_accuracy"])
        for label, m, mean, std in points:
            writer.writerow([label, m, f"{mean:.6f}", f"{std:.6f}"])
    return path
