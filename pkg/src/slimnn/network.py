"""Network container: architecture specs, init, forward/backward, SGD.

A Network is an ordered list of layers plus a loss. Gradients are returned
as a list aligned with the layers (dict of arrays per parametrized layer,
None otherwise) so the optimizer step stays a pure function of
(network, grads, hyper).
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    ShapeMismatchError,
    TrainingDivergedError,
    UnsupportedLayerError,
)
from .hashing import HashedLayer
from .layers import (
    ACTIVATIONS,
    ConvLayer,
    DenseLayer,
    DropoutLayer,
    MaxPoolLayer,
    activation_curvature,
    activation_slope,
)
from .seeding import derive_seed

LOSSES = ("softmax_cross_entropy", "squared_error")


@dataclass(frozen=True)
class TrainHyper:
    """SGD settings. Regularization never touches biases."""

    learning_rate: float = 1e-2
    batch_size: int = 16
    regularization: str = "l2"  # none | l1 | l2
    reg_lambda: float = 1e-3
    max_epochs: int = 400
    patience: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("batch_size, max_epochs, patience must be >= 1")
        if self.regularization not in ("none", "l1", "l2"):
            raise ConfigurationError(f"unknown regularization {self.regularization!r}")
        if self.reg_lambda < 0:
            raise ConfigurationError("reg_lambda must be >= 0")


# ---------------------------------------------------------------------------
# architecture specs


@dataclass(frozen=True)
class DenseSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"


@dataclass(frozen=True)
class HashedSpec:
    in_dim: int
    out_dim: int
    n_buckets: int
    sign_hash: bool = False
    activation: str = "identity"


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    activation: str = "relu"


@dataclass(frozen=True)
class PoolSpec:
    pool: int


@dataclass(frozen=True)
class DropoutSpec:
    p: float


@dataclass(frozen=True)
class ConvSpec:
    """The small conv architecture: conv -> maxpool -> (dropout) -> linear.

    Sweep grids use kernel 5..10, out_channels 4..12, stride 1..3,
    pool 2..4, dropout 0..0.2.
    """

    kernel: int = 5
    out_channels: int = 4
    stride: int = 1
    pool: int = 2
    dropout: float = 0.0

    def output_hw(self, h=28, w=28):
        oh = (h - self.kernel) // self.stride + 1
        ow = (w - self.kernel) // self.stride + 1
        return oh // self.pool, ow // self.pool

    def validate(self, h=28, w=28):
        conv_oh = (h - self.kernel) // self.stride + 1
        conv_ow = (w - self.kernel) // self.stride + 1
        oh, ow = self.output_hw(h, w)
        if conv_oh < 1 or conv_ow < 1 or oh < 1 or ow < 1:
            raise ConfigurationError(
                f"conv spec {self} leaves no output pixels for {h}x{w} input"
            )


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    loss: str = "softmax_cross_entropy"
    input_shape: tuple | None = None  # (C, H, W) when the first layer is conv

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")


def mlp_spec(hidden_units, in_dim=784, n_classes=10, activation="relu"):
    """Single-hidden-layer fully connected classifier spec."""
    return NetworkSpec(
        layers=(
            DenseSpec(in_dim, hidden_units, activation),
            DenseSpec(hidden_units, n_classes, "identity"),
        )
    )


def hashed_mlp_spec(hidden_units, compression_ratio, in_dim=784, n_classes=10,
                    activation="relu", sign_hash=False):
    """Hashed counterpart of mlp_spec.

    Each layer gets buckets proportional to its virtual edge count, so one
    global compression ratio applies: ceil(r * in*h) and ceil(r * h*out).
    """
    if not 0.0 < compression_ratio <= 1.0:
        raise ConfigurationError(f"compression ratio must be in (0, 1], got {compression_ratio}")
    k1 = int(np.ceil(compression_ratio * in_dim * hidden_units))
    k2 = int(np.ceil(compression_ratio * hidden_units * n_classes))
    return NetworkSpec(
        layers=(
            HashedSpec(in_dim, hidden_units, k1, sign_hash, activation),
            HashedSpec(hidden_units, n_classes, k2, sign_hash, "identity"),
        )
    )


def conv_net_spec(conv: ConvSpec, input_hw=(28, 28), n_classes=10, activation="relu"):
    """conv -> maxpool -> (dropout) -> linear, per the sweep architecture."""
    h, w = input_hw
    conv.validate(h, w)
    oh, ow = conv.output_hw(h, w)
    layers = [
        ConvLayerSpec(1, conv.out_channels, conv.kernel, conv.stride, activation),
        PoolSpec(conv.pool),
    ]
    if conv.dropout > 0:
        layers.append(DropoutSpec(conv.dropout))
    layers.append(DenseSpec(conv.out_channels * oh * ow, n_classes, "identity"))
    return NetworkSpec(layers=tuple(layers), input_shape=(1, h, w))


# ---------------------------------------------------------------------------
# network


class Network:
    def __init__(self, layers, loss="softmax_cross_entropy", input_shape=None):
        if loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {loss!r}; expected one of {LOSSES}")
        self.layers = list(layers)
        self.loss = loss
        self.input_shape = input_shape

    # -- plumbing

    def _adapt_input(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if isinstance(self.layers[0], (DenseLayer, HashedLayer)):
            return batch.reshape(batch.shape[0], -1)
        if self.input_shape is None:
            raise ConfigurationError("conv-input network needs input_shape set")
        return batch.reshape(batch.shape[0], *self.input_shape)

    def _forward_cached(self, batch, training=False, rng=None):
        x = self._adapt_input(batch)
        caches = []
        for i, layer in enumerate(self.layers):
            try:
                x, cache = layer.forward(x, training=training, rng=rng)
            except ShapeMismatchError as exc:
                raise ShapeMismatchError(
                    f"layer {i} ({type(layer).__name__}): {exc}"
                ) from None
            caches.append(cache)
        return x, caches

    def forward(self, batch, training=False, rng=None, return_activations=False):
        """Logits [B x n_classes]; per-layer activations on request."""
        x = self._adapt_input(batch)
        activations = []
        for i, layer in enumerate(self.layers):
            try:
                x, _ = layer.forward(x, training=training, rng=rng)
            except ShapeMismatchError as exc:
                raise ShapeMismatchError(
                    f"layer {i} ({type(layer).__name__}): {exc}"
                ) from None
            if return_activations:
                activations.append(x)
        return (x, activations) if return_activations else x

    # -- loss and gradients

    def loss_and_grad(self, batch, labels, rng=None, training=True):
        """Mean loss over the batch and gradients aligned with self.layers.

        Gradients at masked dense positions are reported as computed; the
        optimizer step is what keeps pruned weights at zero.
        """
        labels = np.asarray(labels)
        logits, caches = self._forward_cached(batch, training=training, rng=rng)
        loss, dlogits = _loss_grad(self.loss, logits, labels)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss is not finite ({loss})")
        grads = [None] * len(self.layers)
        g = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            g, pgrads = self.layers[i].backward(g, caches[i])
            grads[i] = pgrads
        return loss, grads

    def hessian_diagonal(self, batch, labels, variant="gauss_newton"):
        """Per-parameter diagonal loss curvature for dense-only networks.

        Layer-wise backward recursion that drops off-diagonal curvature.
        The default "gauss_newton" variant also drops the activation-
        curvature term and is non-negative by construction; "exact" keeps
        that term (exact for the diagonal only on identity activations).
        """
        if variant not in ("gauss_newton", "exact"):
            raise ConfigurationError(f"unknown hessian variant {variant!r}")
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, DenseLayer):
                raise UnsupportedLayerError(
                    f"hessian_diagonal supports dense layers only; "
                    f"layer {i} is {type(layer).__name__}"
                )
        labels = np.asarray(labels)
        logits, caches = self._forward_cached(batch, training=False)
        _, grad_a = _loss_grad(self.loss, logits, labels)
        curv_a = _loss_curvature(self.loss, logits, labels)
        result = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            _, x2, z = caches[i]
            slope = activation_slope(z, layer.activation)
            curv_z = slope * slope * curv_a
            if variant == "exact":
                curv_z = curv_z + activation_curvature(z, layer.activation) * grad_a
            result[i] = {
                "weights": curv_z.T @ (x2 * x2),
                "bias": curv_z.sum(axis=0),
            }
            if i > 0:
                w = layer.weights
                curv_a = curv_z @ (w * w)
                grad_a = (grad_a * slope) @ w
        return result

    # -- updates

    def sgd_step(self, grads, hyper: TrainHyper):
        """w <- w - lr * (grad + reg); masked dense weights stay exactly 0."""
        lr = hyper.learning_rate
        for layer, g in zip(self.layers, grads):
            if g is None:
                continue
            if isinstance(layer, DenseLayer):
                layer.weights -= lr * (g["weights"] + _reg_grad(layer.weights, hyper))
                layer.weights *= layer.mask
                layer.bias -= lr * g["bias"]
            elif isinstance(layer, HashedLayer):
                layer.buckets -= lr * (g["buckets"] + _reg_grad(layer.buckets, hyper))
                layer.bias -= lr * g["bias"]
            elif isinstance(layer, ConvLayer):
                layer.weights -= lr * (g["weights"] + _reg_grad(layer.weights, hyper))
                layer.bias -= lr * g["bias"]

    # -- bookkeeping

    def param_count(self):
        """Trainable scalars: alive dense weights, buckets, kernels, all biases."""
        return sum(layer.param_count() for layer in self.layers)

    def dense_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, DenseLayer)]

    def clone(self):
        return copy.deepcopy(self)


def _reg_grad(w, hyper: TrainHyper):
    if hyper.regularization == "l2":
        return hyper.reg_lambda * w
    if hyper.regularization == "l1":
        return hyper.reg_lambda * np.sign(w)  # sign(0) == 0
    return 0.0


def _loss_grad(loss, logits, labels):
    b = logits.shape[0]
    if loss == "softmax_cross_entropy":
        probs = softmax(logits)
        picked = probs[np.arange(b), labels]
        value = -np.mean(np.log(np.maximum(picked, 1e-300)))
        dlogits = probs.copy()
        dlogits[np.arange(b), labels] -= 1.0
        return value, dlogits / b
    # squared_error: 0.5 * sum over outputs of (logit - onehot)^2, mean over batch
    target = np.zeros_like(logits)
    target[np.arange(b), labels] = 1.0
    diff = logits - target
    return 0.5 * np.sum(diff * diff) / b, diff / b


def _loss_curvature(loss, logits, labels):
    """Diagonal of the per-sample loss Hessian wrt logits, scaled by 1/B."""
    b = logits.shape[0]
    if loss == "softmax_cross_entropy":
        probs = softmax(logits)
        return probs * (1.0 - probs) / b
    return np.ones_like(logits) / b


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# construction


def init_network(spec: NetworkSpec, seed):
    """Build and initialize a network; identical (spec, seed) pairs produce
    bit-identical parameters."""
    layers = []
    for idx, ls in enumerate(spec.layers):
        if isinstance(ls, DenseSpec):
            layers.append(DenseLayer(ls.in_dim, ls.out_dim, ls.activation))
        elif isinstance(ls, HashedSpec):
            layers.append(
                HashedLayer(
                    ls.in_dim,
                    ls.out_dim,
                    ls.n_buckets,
                    hash_seed=derive_seed(seed, "edge-hash"),
                    layer_id=idx,
                    sign_hash=ls.sign_hash,
                    activation=ls.activation,
                )
            )
        elif isinstance(ls, ConvLayerSpec):
            layers.append(
                ConvLayer(ls.in_channels, ls.out_channels, ls.kernel, ls.stride, ls.activation)
            )
        elif isinstance(ls, PoolSpec):
            layers.append(MaxPoolLayer(ls.pool))
        elif isinstance(ls, DropoutSpec):
            layers.append(DropoutLayer(ls.p))
        else:
            raise ConfigurationError(f"unknown layer spec {ls!r}")
    _check_composition(layers, spec.input_shape)
    rng = np.random.default_rng(derive_seed(seed, "init"))
    for layer in layers:
        layer.init_params(rng)
    return Network(layers, loss=spec.loss, input_shape=spec.input_shape)


def _check_composition(layers, input_shape):
    """Walk symbolic shapes through the stack; adjacent dims must compose."""
    if not layers:
        raise ConfigurationError("network needs at least one layer")
    shape = input_shape  # (C, H, W) or None for flat input
    if shape is None and isinstance(layers[0], (ConvLayer, MaxPoolLayer)):
        raise ConfigurationError("conv/pool first layer requires input_shape")
    for i, layer in enumerate(layers):
        if isinstance(layer, (DenseLayer, HashedLayer)):
            if shape is not None:
                flat = int(np.prod(shape))
                if flat != layer.in_dim:
                    raise ConfigurationError(
                        f"layer {i} expects {layer.in_dim} inputs but gets {flat}"
                    )
            shape = (layer.out_dim,)
        elif isinstance(layer, ConvLayer):
            if shape is None or len(shape) != 3:
                raise ConfigurationError(f"layer {i} (conv) needs CHW input, got {shape}")
            c, h, w = shape
            if c != layer.in_channels:
                raise ConfigurationError(
                    f"layer {i} expects {layer.in_channels} channels but gets {c}"
                )
            oh, ow = layer.output_hw(h, w)
            if oh < 1 or ow < 1:
                raise ConfigurationError(f"layer {i} (conv) output collapses to {oh}x{ow}")
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, MaxPoolLayer):
            if shape is None or len(shape) != 3:
                raise ConfigurationError(f"layer {i} (pool) needs CHW input, got {shape}")
            c, h, w = shape
            oh, ow = layer.output_hw(h, w)
            if oh < 1 or ow < 1:
                raise ConfigurationError(f"layer {i} (pool) output collapses to {oh}x{ow}")
            shape = (c, oh, ow)
        # dropout keeps shape
