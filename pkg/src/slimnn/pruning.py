"""Iterative pruning: schedules, saliencies, mask updates, the run loop.

Sparsity is defined over dense weight matrices only; biases are never
pruned. Masks never regrow. Saliency ranking is global across all prunable
layers by default, with a per-layer mode behind a flag.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PruningError, TrainingDivergedError
from .network import Network, TrainHyper
from .seeding import derive_seed, rng_for
from .training import evaluate, train_epoch

METHODS = ("mag_l1", "mag_l2", "obd")
_EPS = 1e-9  # guards float noise around exact count arithmetic


@dataclass(frozen=True)
class PruningPlan:
    """Schedule parameters plus saliency method selection.

    The default ladder reaches sparsity (i/steps)^(1/exponent) * final at
    step i, so early steps remove many edges and later ones few. The
    "cubic" schedule final*(1-(1-i/steps)^3) is kept as a comparison mode.
    """

    final_sparsity: float = 0.0
    steps: int = 20
    exponent: float = 3.0
    epochs_between_prunes: int = 10
    warmup_epochs: int = 20
    method: str = "mag_l2"
    obd_sample_size: int = 1000
    schedule: str = "root"  # root | cubic
    scope: str = "global"  # global | per_layer
    trigger: str = "interval"  # interval | plateau
    plateau_patience: int = 3
    hessian_variant: str = "gauss_newton"  # gauss_newton | exact

    def __post_init__(self):
        if not 0.0 <= self.final_sparsity < 1.0:
            raise ConfigurationError("final_sparsity must be in [0, 1)")
        if self.steps < 1 or self.epochs_between_prunes < 1 or self.warmup_epochs < 0:
            raise ConfigurationError("bad schedule counts")
        if self.exponent < 1.0:
            raise ConfigurationError("exponent must be >= 1")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected {METHODS}")
        if self.obd_sample_size < 1:
            raise ConfigurationError("obd_sample_size must be >= 1")
        if self.schedule not in ("root", "cubic"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.scope not in ("global", "per_layer"):
            raise ConfigurationError(f"unknown scope {self.scope!r}")
        if self.trigger not in ("interval", "plateau"):
            raise ConfigurationError(f"unknown trigger {self.trigger!r}")
        if self.hessian_variant not in ("gauss_newton", "exact"):
            raise ConfigurationError(f"unknown hessian variant {self.hessian_variant!r}")

    def target_at(self, step):
        if self.schedule == "cubic":
            if not 0 <= step <= self.steps:
                raise ConfigurationError(f"step {step} outside 0..{self.steps}")
            return self.final_sparsity * (1.0 - (1.0 - step / self.steps) ** 3)
        return target_sparsity(step, self.steps, self.exponent, self.final_sparsity)

    def targets(self):
        return [self.target_at(i) for i in range(1, self.steps + 1)]


def target_sparsity(step, steps, exponent, final_sparsity):
    """Sparsity the ladder reaches at `step` of `steps`: (i/k)^(1/c) * S."""
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if exponent < 1.0:
        raise ConfigurationError("exponent must be >= 1")
    if step < 0 or step > steps:
        raise ConfigurationError(f"step {step} outside 0..{steps}")
    return (step / steps) ** (1.0 / exponent) * final_sparsity


@dataclass
class SaliencyMap:
    """Nonnegative per-edge scores aligned with the prunable layers.

    `alive` flags which entries are eligible: already-masked positions are
    excluded and can never be selected again.
    """

    layer_indices: list
    values: list  # arrays shaped like each layer's weights
    alive: list  # bool arrays, True where mask == 1


def saliency_magnitude(net: Network) -> SaliencyMap:
    """|w| over alive edges, across all prunable layers jointly."""
    idxs, values, alive = [], [], []
    for i, layer in net.dense_layers():
        idxs.append(i)
        values.append(np.abs(layer.weights))
        alive.append(layer.mask > 0.5)
    if not idxs:
        raise ConfigurationError("network has no prunable layers")
    return SaliencyMap(idxs, values, alive)


def saliency_obd(net: Network, images, labels, variant="gauss_newton") -> SaliencyMap:
    """w^2 * d2L/dw2 with the diagonal estimated on the given sample."""
    curv = net.hessian_diagonal(images, labels, variant=variant)
    idxs, values, alive = [], [], []
    for i, layer in net.dense_layers():
        idxs.append(i)
        values.append(layer.weights**2 * curv[i]["weights"])
        alive.append(layer.mask > 0.5)
    if not idxs:
        raise ConfigurationError("network has no prunable layers")
    return SaliencyMap(idxs, values, alive)


def prunable_weight_count(net: Network):
    return sum(layer.weights.size for _, layer in net.dense_layers())


def current_sparsity(net: Network):
    """Fraction of prunable weights whose mask is 0."""
    total = prunable_weight_count(net)
    if total == 0:
        return 0.0
    pruned = sum(layer.weights.size - int(layer.mask.sum()) for _, layer in net.dense_layers())
    return pruned / total


def prune_to(net: Network, saliency: SaliencyMap, target, scope="global"):
    """Mask the lowest-saliency alive edges until `target` sparsity holds.

    Exactly ceil(target * prunable) - already_pruned edges go this call;
    ties break by ascending (layer, row, column). Masks never regrow:
    a target below the current sparsity is an error.
    """
    if scope == "per_layer":
        return sum(
            _prune_layer(net.layers[li], val, alv, target)
            for li, val, alv in zip(saliency.layer_indices, saliency.values, saliency.alive)
        )
    if scope != "global":
        raise ConfigurationError(f"unknown scope {scope!r}")

    total = prunable_weight_count(net)
    already = sum(
        layer.weights.size - int(layer.mask.sum()) for _, layer in net.dense_layers()
    )
    wanted = math.ceil(target * total - _EPS)
    if wanted < already:
        raise PruningError(
            f"target sparsity {target} below current {already / total:.6f}; masks never regrow"
        )
    n_prune = max(wanted - already, 0)
    if n_prune == 0:
        return 0

    sal_parts, layer_parts, row_parts, col_parts = [], [], [], []
    for li, values, alive in zip(saliency.layer_indices, saliency.values, saliency.alive):
        rows, cols = np.nonzero(alive)
        sal_parts.append(values[rows, cols])
        layer_parts.append(np.full(rows.size, li))
        row_parts.append(rows)
        col_parts.append(cols)
    sal = np.concatenate(sal_parts)
    layers_flat = np.concatenate(layer_parts)
    rows_flat = np.concatenate(row_parts)
    cols_flat = np.concatenate(col_parts)
    if n_prune > sal.size:
        raise PruningError(f"cannot prune {n_prune} edges; only {sal.size} alive")
    # primary key saliency, then (layer, row, col) for deterministic ties
    order = np.lexsort((cols_flat, rows_flat, layers_flat, sal))[:n_prune]
    for li in np.unique(layers_flat[order]):
        pick = order[layers_flat[order] == li]
        layer = net.layers[li]
        layer.mask[rows_flat[pick], cols_flat[pick]] = 0.0
        layer.apply_mask()
    return int(n_prune)


def _prune_layer(layer, values, alive, target):
    total = layer.weights.size
    already = total - int(layer.mask.sum())
    wanted = math.ceil(target * total - _EPS)
    if wanted < already:
        raise PruningError(
            f"target sparsity {target} below current {already / total:.6f}; masks never regrow"
        )
    n_prune = max(wanted - already, 0)
    if n_prune == 0:
        return 0
    rows, cols = np.nonzero(alive)
    order = np.lexsort((cols, rows, values[rows, cols]))[:n_prune]
    layer.mask[rows[order], cols[order]] = 0.0
    layer.apply_mask()
    return int(n_prune)


def compression_ratio(compressed_count, original_count):
    """r = m'/m, compressed over original trainable-parameter count."""
    if original_count <= 0:
        raise ConfigurationError("original parameter count must be positive")
    if compressed_count <= 0:
        raise ConfigurationError("compressed parameter count must be positive")
    return compressed_count / original_count


def sparsity_for_ratio(n_weights, n_biases, ratio):
    """Weight sparsity that makes a pruned net hit compression ratio r.

    m = W + B, m' = (1 - S) * W + B, so S = 1 - (r * m - B) / W.
    """
    m = n_weights + n_biases
    alive = ratio * m - n_biases
    if alive <= 0:
        raise ConfigurationError(
            f"ratio {ratio} is below the bias floor {n_biases / m:.6f}; no weights would remain"
        )
    if alive > n_weights:
        return 0.0
    return 1.0 - alive / n_weights


def ratio_for_sparsity(n_weights, n_biases, sparsity):
    return ((1.0 - sparsity) * n_weights + n_biases) / (n_weights + n_biases)


# ---------------------------------------------------------------------------
# the run loop


@dataclass(frozen=True)
class TrajectoryPoint:
    epoch: int
    sparsity: float
    train_loss: float
    val_accuracy: float


@dataclass
class PruningResult:
    network: Network  # best-validation checkpoint at final sparsity
    last_network: Network  # state when training stopped
    trajectory: list
    best_val_accuracy: float
    epochs_run: int


def run_pruning(net: Network, plan: PruningPlan, hyper: TrainHyper,
                train_images, train_labels, val_images, val_labels, seed):
    """Warmup, prune/retrain ladder, then train to a validation plateau.

    Trains `warmup_epochs`, then alternates prune step i (to the ladder
    target) with `epochs_between_prunes` of retraining for i = 1..steps,
    then keeps training until validation accuracy fails to improve for
    `hyper.patience` epochs (bounded by `hyper.max_epochs` total). Returns
    the best-validation checkpoint among epochs at final sparsity.

    A plan with final_sparsity 0 degenerates to plain training with the
    same epoch structure, which is exactly the uncompressed baseline.
    """
    trajectory = []
    state = {"epoch": 0, "best_acc": -1.0, "best_net": None, "since_best": 0}
    dropout_rng = rng_for(seed, "dropout")
    sample_rng = rng_for(seed, "saliency-sample")

    def one_epoch():
        try:
            loss = train_epoch(
                net, hyper, train_images, train_labels, state["epoch"], seed, dropout_rng
            )
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(
                str(exc), epoch=exc.epoch, trajectory=list(trajectory)
            ) from None
        acc = evaluate(net, val_images, val_labels)
        trajectory.append(TrajectoryPoint(state["epoch"], current_sparsity(net), loss, acc))
        state["epoch"] += 1
        if current_sparsity(net) >= plan.final_sparsity - 1e-12:
            if acc > state["best_acc"]:
                state["best_acc"] = acc
                state["best_net"] = net.clone()
                state["since_best"] = 0
            else:
                state["since_best"] += 1
        return acc

    def budget_left():
        return state["epoch"] < hyper.max_epochs

    for _ in range(plan.warmup_epochs):
        if not budget_left():
            break
        one_epoch()

    for i, target in enumerate(plan.targets(), start=1):
        if _edges_needed(net, target, plan.scope) > 0:
            saliency = _compute_saliency(net, plan, train_images, train_labels, sample_rng)
            prune_to(net, saliency, target, scope=plan.scope)
        stagnant = 0
        last_acc = -1.0
        for _ in range(plan.epochs_between_prunes):
            if not budget_left():
                break
            acc = one_epoch()
            stagnant = stagnant + 1 if acc <= last_acc else 0
            last_acc = max(last_acc, acc)
            if plan.trigger == "plateau" and i < plan.steps and stagnant >= plan.plateau_patience:
                break

    while budget_left() and state["since_best"] < hyper.patience:
        one_epoch()

    if state["best_net"] is None:  # no epoch ran at final sparsity
        state["best_net"] = net.clone()
        state["best_acc"] = evaluate(net, val_images, val_labels) if len(val_images) else 0.0
    return PruningResult(
        network=state["best_net"],
        last_network=net,
        trajectory=trajectory,
        best_val_accuracy=state["best_acc"],
        epochs_run=state["epoch"],
    )


def _edges_needed(net, target, scope):
    layers = [layer for _, layer in net.dense_layers()]
    if scope == "per_layer":
        return sum(
            max(
                math.ceil(target * l.weights.size - _EPS)
                - (l.weights.size - int(l.mask.sum())),
                0,
            )
            for l in layers
        )
    total = sum(l.weights.size for l in layers)
    already = sum(l.weights.size - int(l.mask.sum()) for l in layers)
    return max(math.ceil(target * total - _EPS) - already, 0)


def _compute_saliency(net, plan, images, labels, sample_rng):
    if plan.method == "obd":
        n = min(plan.obd_sample_size, len(images))
        pick = sample_rng.choice(len(images), size=n, replace=False)
        return saliency_obd(net, images[pick], np.asarray(labels)[pick],
                            variant=plan.hessian_variant)
    return saliency_magnitude(net)
