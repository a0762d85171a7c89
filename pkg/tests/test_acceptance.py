"""Acceptance suite.

Two tiers. The property tier (criteria 1-7) runs on every `pytest`
invocation and finishes in well under five minutes. The benchmark-
reproduction tier (criteria 8-16) trains full-size networks on real MNIST
and is marked `paper`: it is skipped unless DATA_DIR points at the four
standard IDX files, and is run explicitly with `pytest -m paper` (hours of
CPU; finished cells are cached under PAPER_OUT_DIR and reused).

Every test prints one line per criterion: `[acceptance] C<n>: PASS/FAIL`.
"""

import math
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from conftest import mnist_data_dir, requires_mnist
from oracles import (
    constrained_dense_sgd_step,
    gradient_check,
    finite_diff_hessian_diagonal,
    max_rel_error,
    pareto_brute_force,
)

from slimnn.data import Dataset, load_idx, write_idx
from slimnn.errors import IdxFormatError
from slimnn.harness import (
    ExperimentConfig,
    aggregate,
    conv_grid,
    conv_sweep,
    ensure_records,
    near_zero_fraction,
    pareto_front,
    weight_histogram,
)
from slimnn.hashing import HashedLayer, bucket_index
from slimnn.network import (
    ConvSpec,
    DenseSpec,
    NetworkSpec,
    TrainHyper,
    conv_net_spec,
    init_network,
    mlp_spec,
)
from slimnn.pruning import (
    PruningPlan,
    prune_to,
    saliency_magnitude,
    sparsity_for_ratio,
    target_sparsity,
)
from slimnn.training import train_epochs

# central 99.9% band of chi-square with 783 dof:
# scipy.stats.chi2.ppf([0.0005, 0.9995], 783)
CHI2_783_BAND = (659.2985909185809, 919.7996373015532)


def _report(criterion, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    line = f"[acceptance] {criterion}: {status}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert passed, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# property tier


def test_criterion_01_gradient_check():
    """Dense+conv+pool+dropout nets <= 500 params vs central differences."""
    worst = 0.0
    rng = np.random.default_rng(0)

    net = init_network(
        NetworkSpec(layers=(DenseSpec(20, 10, "tanh"), DenseSpec(10, 5, "identity"))),
        seed=7,
    )
    worst = max(worst, gradient_check(net, rng.normal(size=(8, 20)), rng.integers(0, 5, 8)))

    net = init_network(
        NetworkSpec(layers=(DenseSpec(20, 10, "relu"), DenseSpec(10, 5, "identity"))),
        seed=11,
    )
    worst = max(worst, gradient_check(net, rng.normal(size=(8, 20)), rng.integers(0, 5, 8)))

    spec = conv_net_spec(
        ConvSpec(kernel=3, out_channels=2, stride=1, pool=2, dropout=0.15),
        input_hw=(8, 8), n_classes=3,
    )
    net = init_network(spec, seed=13)
    assert net.param_count() <= 500
    worst = max(
        worst,
        gradient_check(net, rng.normal(size=(4, 64)), rng.integers(0, 3, 4), dropout_seed=99),
    )
    _report("C1 gradient check", worst < 1e-5, f"max rel err {worst:.2e}")


def test_criterion_02_hessian_diagonal():
    """Linear+squared-loss recursion vs finite differences; GN nonnegative."""
    net = init_network(
        NetworkSpec(layers=(DenseSpec(6, 4, "identity"),), loss="squared_error"), seed=3
    )
    rng = np.random.default_rng(5)
    x = rng.normal(size=(7, 6))
    y = rng.integers(0, 4, size=7)
    curv = net.hessian_diagonal(x, y)
    fd = finite_diff_hessian_diagonal(net, x, y)
    err = max(
        max_rel_error(curv[0]["weights"], fd[(0, "weights")], floor=1e-6),
        max_rel_error(curv[0]["bias"], fd[(0, "bias")], floor=1e-6),
    )
    nonneg = True
    for seed in range(5):
        tanh_net = init_network(
            NetworkSpec(layers=(DenseSpec(8, 6, "tanh"), DenseSpec(6, 4, "identity"))),
            seed=seed,
        )
        c = tanh_net.hessian_diagonal(rng.normal(size=(5, 8)), rng.integers(0, 4, 5))
        nonneg &= all((e["weights"] >= 0).all() and (e["bias"] >= 0).all() for e in c)
    _report(
        "C2 hessian diagonal", err < 1e-4 and nonneg,
        f"fd rel err {err:.2e}, gauss-newton nonneg {nonneg}",
    )


def test_criterion_03_hashed_oracle_equivalence():
    """Hashed layers vs expanded dense; training equivalence; uniformity."""
    worst_fb = 0.0
    for in_dim, out_dim, k in ((6, 4, 5), (50, 20, 37)):
        layer = HashedLayer(in_dim, out_dim, k, hash_seed=3, layer_id=1)
        layer.init_params(np.random.default_rng(0))
        rng = np.random.default_rng(2)
        x = rng.normal(size=(9, in_dim))
        g = rng.normal(size=(9, out_dim))
        yh, ch = layer.forward(x)
        w = layer.expanded_weights()
        worst_fb = max(worst_fb, np.abs(yh - (x @ w.T + layer.bias)).max())
        gxh, ph = layer.backward(g, ch)
        worst_fb = max(worst_fb, np.abs(gxh - g @ w).max())
        edge = g.T @ x
        summed = np.zeros(k)
        np.add.at(summed, layer._indices, edge)
        worst_fb = max(worst_fb, np.abs(ph["buckets"] - summed).max())

    layer = HashedLayer(6, 4, 5, hash_seed=21)
    layer.init_params(np.random.default_rng(7))
    weights = layer.expanded_weights().copy()
    bias = layer.bias.copy()
    rng = np.random.default_rng(8)
    for _ in range(100):
        x = rng.normal(size=(4, 6))
        g = rng.normal(size=(4, 4))
        _, cache = layer.forward(x)
        _, grads = layer.backward(g, cache)
        layer.buckets -= 0.05 * grads["buckets"]
        layer.bias -= 0.05 * grads["bias"]
        weights, bias = constrained_dense_sgd_step(weights, bias, layer._indices, x, g, 0.05)
    train_gap = max(
        np.abs(layer.expanded_weights() - weights).max(), np.abs(layer.bias - bias).max()
    )

    rows = np.arange(100)[:, None]
    cols = np.arange(784)[None, :]
    occupancy = np.bincount(bucket_index(7, 0, rows, cols, 784).ravel(), minlength=784)
    stat = float(((occupancy - occupancy.mean()) ** 2 / occupancy.mean()).sum())
    in_band = CHI2_783_BAND[0] < stat < CHI2_783_BAND[1]
    _report(
        "C3 hashed equivalence",
        worst_fb < 1e-10 and train_gap < 1e-9 and in_band,
        f"fwd/bwd {worst_fb:.1e}, 100-step {train_gap:.1e}, chi2 {stat:.1f}",
    )


def test_criterion_04_schedule_properties():
    endpoints = (
        target_sparsity(0, 20, 3, 0.99) == 0.0
        and target_sparsity(20, 20, 3, 0.99) == pytest.approx(0.99)
    )
    ladder = [target_sparsity(i, 20, 3.0, 0.99) for i in range(21)]
    monotone = all(b >= a for a, b in zip(ladder, ladder[1:]))
    total = 79400
    counts, prev = [], 0
    for t in ladder[1:]:
        wanted = math.ceil(t * total - 1e-9)
        counts.append(wanted - prev)
        prev = wanted
    decreasing = all(b < a for a, b in zip(counts, counts[1:]))
    _report(
        "C4 schedule", endpoints and monotone and decreasing,
        f"counts {counts[:3]}...{counts[-3:]}",
    )


def test_criterion_05_mask_persistence_and_prune_arithmetic():
    net = init_network(mlp_spec(100), seed=0)
    pruned = prune_to(net, saliency_magnitude(net), 0.99)
    arithmetic = pruned == 78606 and net.param_count() == (79400 - 78606) + 110

    rng = np.random.default_rng(15)
    small = init_network(mlp_spec(8, in_dim=12, n_classes=3), seed=15)
    x = rng.normal(size=(60, 12))
    y = rng.integers(0, 3, size=60)
    hyper = TrainHyper(learning_rate=0.05, batch_size=16)
    persistent = True
    target = 0.0
    for _ in range(15):
        if rng.random() < 0.5 and target < 0.9:
            target += 0.07
            prune_to(small, saliency_magnitude(small), target)
        else:
            train_epochs(small, hyper, x, y, 1, seed=int(rng.integers(1 << 30)))
        for _, layer in small.dense_layers():
            persistent &= bool((layer.weights[layer.mask == 0.0] == 0.0).all())
    _report(
        "C5 masks and arithmetic", arithmetic and persistent,
        f"pruned {pruned} == 78606, masked weights stayed zero: {persistent}",
    )


def test_criterion_06_pareto_matches_brute_force():
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(100):
        n = int(rng.integers(1, 60))
        pts = list(zip(rng.integers(1, 40, n).tolist(), np.round(rng.uniform(size=n), 2).tolist()))
        ok &= sorted(pareto_front(pts)) == sorted(pareto_brute_force(pts))
    _report("C6 pareto filter", ok, "100 random point sets vs O(n^2) filter")


def test_criterion_07_idx_round_trip_and_bad_magic(tmp_path):
    rng = np.random.default_rng(1)
    ds = Dataset(
        images=np.rint(rng.uniform(size=(32, 28, 28)) * 255) / 255,
        labels=rng.integers(0, 10, size=32),
    )
    write_idx(ds, tmp_path / "img", tmp_path / "lbl")
    back = load_idx(tmp_path / "img", tmp_path / "lbl")
    round_trip = back.images.tobytes() == ds.images.tobytes()

    corrupted = bytearray((tmp_path / "img").read_bytes())
    corrupted[3] = 0x42
    (tmp_path / "img2").write_bytes(bytes(corrupted))
    try:
        load_idx(tmp_path / "img2", tmp_path / "lbl")
        negative = False
    except IdxFormatError as exc:
        negative = "0x00000803" in str(exc)
    _report("C7 idx format", round_trip and negative)


# ---------------------------------------------------------------------------
# benchmark-reproduction tier (real MNIST, hours of CPU, `pytest -m paper`)


PAPER_OUT = Path(os.environ.get("PAPER_OUT_DIR", "paper_runs"))


def _base_mnist():
    from slimnn.cli import load_base_mnist

    return load_base_mnist(str(mnist_data_dir()))


def paper_config(method, hidden=100, dataset="mnist", sparsity=0.0, ratio=None, runs=5):
    """The benchmark defaults: lr 1e-2, batch 16, L2 1e-3 (L1 runs 1e-5)."""
    reg, lam = ("l1", 1e-5) if method == "mag_l1" else ("l2", 1e-3)
    plan = PruningPlan(
        final_sparsity=sparsity,
        method=method if method in ("mag_l1", "mag_l2", "obd") else "mag_l2",
    )
    hyper = TrainHyper(
        learning_rate=1e-2, batch_size=16, regularization=reg, reg_lambda=lam,
        max_epochs=400, patience=10,
    )
    return ExperimentConfig(
        dataset=dataset,
        architecture=f"dense-{hidden}",
        method=method,
        plan=plan,
        hyper=hyper,
        compression_ratio=ratio,
        runs=runs,
        base_seed=0,
        patch_source="synthetic" if dataset == "mnist_background_images" else None,
    )


def paper_cell(config):
    base_train, base_test = _base_mnist()
    records = ensure_records(config, base_train, base_test, out_dir=PAPER_OUT)
    return aggregate(records, config)


def mean_pct(config):
    return paper_cell(config).mean_accuracy * 100.0


@pytest.mark.paper
@requires_mnist
def test_criterion_08_uncompressed_baseline():
    acc = mean_pct(paper_config("none"))
    _report("C8 baseline 0%", abs(acc - 97.65) <= 1.0, f"mean {acc:.2f} vs 97.65 +- 1.0")


@pytest.mark.paper
@requires_mnist
def test_criterion_09_magl2_90_and_99():
    acc90 = mean_pct(paper_config("mag_l2", sparsity=0.90))
    acc99 = mean_pct(paper_config("mag_l2", sparsity=0.99))
    ok = abs(acc90 - 96.99) <= 1.0 and abs(acc99 - 94.31) <= 1.5
    _report("C9 magl2 90/99", ok, f"90% {acc90:.2f} (96.99 +- 1.0), 99% {acc99:.2f} (94.31 +- 1.5)")


@pytest.mark.paper
@requires_mnist
def test_criterion_10_high_compression_ordering():
    ok = True
    details = []
    for sparsity in (0.995, 0.997):
        l2 = mean_pct(paper_config("mag_l2", sparsity=sparsity))
        l1 = mean_pct(paper_config("mag_l1", sparsity=sparsity))
        obd = mean_pct(paper_config("obd", sparsity=sparsity))
        ok &= l2 > obd and l1 > obd
        details.append(f"{sparsity:.1%}: L2 {l2:.2f}, L1 {l1:.2f}, OBD {obd:.2f}")
    _report("C10 magnitude beats obd when sparse", ok, "; ".join(details))


@pytest.mark.paper
@requires_mnist
def test_criterion_11_low_compression_parity():
    l2 = mean_pct(paper_config("mag_l2", sparsity=0.90))
    obd = mean_pct(paper_config("obd", sparsity=0.90))
    _report("C11 parity at 90%", abs(obd - l2) < 1.5, f"OBD {obd:.2f} vs MagL2 {l2:.2f}")


@pytest.mark.paper
@requires_mnist
def test_criterion_12_magl1_99():
    acc = mean_pct(paper_config("mag_l1", sparsity=0.99))
    _report("C12 magl1 99%", abs(acc - 94.31) <= 1.5, f"mean {acc:.2f} vs 94.31 +- 1.5")


@pytest.mark.paper
@requires_mnist
def test_criterion_13_variant_ordering():
    accs = {
        ds: mean_pct(paper_config("mag_l2", dataset=ds, sparsity=0.99))
        for ds in ("mnist", "mnist_background_random", "mnist_background_images",
                   "mnist_rotation")
    }
    gaps = (
        accs["mnist"] - accs["mnist_background_random"],
        accs["mnist_background_random"] - accs["mnist_background_images"],
        accs["mnist_background_images"] - accs["mnist_rotation"],
    )
    reference = (94.31 - 79.57, 79.57 - 75.98, 75.98 - 68.76)
    ok = all(g > 0 for g in gaps) and all(abs(g - r) <= 5.0 for g, r in zip(gaps, reference))
    _report(
        "C13 variant ordering", ok,
        "accs " + ", ".join(f"{k}={v:.2f}" for k, v in accs.items()),
    )


def _conv_pareto_points():
    base_train, base_test = _base_mnist()
    points = conv_sweep(
        conv_grid(), base_train, base_test, runs=5, epochs=30, base_seed=0,
        out_dir=PAPER_OUT,
    )
    return pareto_front([(p.param_count, p.mean_accuracy, p) for p in points])


@pytest.mark.paper
@requires_mnist
def test_criterion_14_conv_beats_hashednet():
    front = _conv_pareto_points()
    lo, hi = 0.005 * 79510, 0.1 * 79510
    ok = True
    compared = 0
    details = []
    for ratio in (0.005, 0.01, 0.02, 0.05, 0.1):
        cell = paper_cell(paper_config("hashednet", ratio=ratio))
        m_hashed = cell.mean_param_count
        if not lo <= m_hashed <= hi:
            continue
        near = [p for p in front if abs(p[0] - m_hashed) <= 0.2 * m_hashed]
        if not near:
            continue
        compared += 1
        best_conv = max(a for _, a, _ in near)
        ok &= best_conv > cell.mean_accuracy
        details.append(
            f"m~{m_hashed:.0f}: conv {best_conv * 100:.2f} vs hashed {cell.mean_accuracy * 100:.2f}"
        )
    _report("C14 conv beats hashednet", ok and compared > 0, "; ".join(details))


@pytest.mark.paper
@requires_mnist
def test_criterion_15_pruning_beats_conv():
    front = _conv_pareto_points()
    ok = True
    compared = 0
    details = []
    for m_conv, acc_conv, _ in front:
        sparsity = 1.0 - (m_conv - 110) / 79400
        if not 0.5 <= sparsity < 0.998:
            continue
        compared += 1
        for method in ("mag_l1", "mag_l2", "obd"):
            cell = paper_cell(paper_config(method, sparsity=round(sparsity, 4)))
            ok &= cell.mean_accuracy > acc_conv
        details.append(f"m={m_conv}")
    _report("C15 pruning beats conv", ok and compared > 0,
            f"{compared} matched sizes: " + ", ".join(details))


@pytest.mark.paper
@requires_mnist
def test_criterion_16_l1_concentrates_near_zero():
    # 50 hidden units at ratio 0.04; histogram read 20 epochs after the
    # final prune (capped by max_epochs), paired seeds for L1 vs L2
    sparsity = sparsity_for_ratio(50 * 784 + 50 * 10, 60, 0.04)
    base_train, base_test = _base_mnist()
    wins = 0
    for run in range(5):
        nets = {}
        for method in ("mag_l1", "mag_l2"):
            cfg = paper_config(method, hidden=50, sparsity=round(sparsity, 6), runs=1)
            cfg = replace(
                cfg,
                base_seed=run,
                hyper=replace(cfg.hyper, max_epochs=230, patience=230),
            )
            from slimnn.harness import estimator_for_config, prepare_run_data

            train, _ = prepare_run_data(cfg, base_train, base_test, seed=run)
            est = estimator_for_config(cfg, seed=run)
            est.fit(train.flat_images(), train.labels)
            nets[method] = est.last_network_
        frac_l1 = near_zero_fraction(weight_histogram(nets["mag_l1"], 0.01))
        frac_l2 = near_zero_fraction(weight_histogram(nets["mag_l2"], 0.01))
        wins += frac_l1 > frac_l2
    _report("C16 l1 concentration", wins >= 4, f"L1 closer to zero in {wins}/5 paired runs")
