"""Layer primitives: dense, 2D convolution, max pooling, dropout.

All arrays are float64. Forward passes return (output, cache); backward
passes take (grad_out, cache) and return (grad_in, param_grads) where
param_grads is a dict keyed by parameter name, or None for layers without
parameters. Convention for images is NCHW.
"""

import numpy as np

from .errors import ConfigurationError, ShapeMismatchError

ACTIVATIONS = ("relu", "tanh", "identity")


def activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_slope(z, kind):
    """First derivative of the activation, evaluated at pre-activation z."""
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "identity":
        return np.ones_like(z)
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_curvature(z, kind):
    """Second derivative of the activation, evaluated at pre-activation z."""
    if kind == "relu":
        return np.zeros_like(z)
    if kind == "tanh":
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)
    if kind == "identity":
        return np.zeros_like(z)
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def _flatten_batch(x):
    if x.ndim == 2:
        return x
    return x.reshape(x.shape[0], -1)


class DenseLayer:
    """Fully connected layer with a binary prune mask.

    weights: [out_dim, in_dim]; bias: [out_dim]; mask entries are 0/1 and
    weights are kept exactly 0.0 wherever the mask is 0.
    """

    prunable = True

    def __init__(self, in_dim, out_dim, activation="identity"):
        if in_dim < 1 or out_dim < 1:
            raise ConfigurationError(f"dense dims must be positive, got {in_dim}x{out_dim}")
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weights = np.zeros((out_dim, in_dim))
        self.bias = np.zeros(out_dim)
        self.mask = np.ones((out_dim, in_dim))

    def init_params(self, rng):
        # zero-mean normal, sigma = 1/sqrt(fan_in)
        sigma = 1.0 / np.sqrt(self.in_dim)
        self.weights = rng.normal(0.0, sigma, size=(self.out_dim, self.in_dim))
        self.weights *= self.mask
        self.bias = np.zeros(self.out_dim)

    def forward(self, x, training=False, rng=None):
        x2 = _flatten_batch(x)  # [B, in_dim]
        if x2.shape[1] != self.in_dim:
            raise ShapeMismatchError(
                f"expected input width {self.in_dim}, got {x2.shape[1]}"
            )
        z = x2 @ self.weights.T + self.bias  # [B, out_dim]
        return activate(z, self.activation), (x.shape, x2, z)

    def backward(self, grad_out, cache):
        x_shape, x2, z = cache
        dz = grad_out * activation_slope(z, self.activation)  # [B, out]
        grad_w = dz.T @ x2  # [out, in]
        grad_b = dz.sum(axis=0)
        grad_x = (dz @ self.weights).reshape(x_shape)
        return grad_x, {"weights": grad_w, "bias": grad_b}

    def param_count(self):
        return int(self.mask.sum()) + self.bias.size

    def apply_mask(self):
        self.weights *= self.mask


class ConvLayer:
    """Valid 2D convolution (no padding) over NCHW input.

    weights: [out_channels, in_channels, kh, kw]; bias: [out_channels].
    """

    prunable = False

    def __init__(self, in_channels, out_channels, kernel, stride=1, activation="relu"):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        if min(kh, kw, in_channels, out_channels, stride) < 1:
            raise ConfigurationError("conv dimensions must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh, self.kw = int(kh), int(kw)
        self.stride = int(stride)
        self.activation = activation
        self.weights = np.zeros((out_channels, in_channels, self.kh, self.kw))
        self.bias = np.zeros(out_channels)

    def init_params(self, rng):
        fan_in = self.in_channels * self.kh * self.kw
        sigma = 1.0 / np.sqrt(fan_in)
        self.weights = rng.normal(0.0, sigma, size=self.weights.shape)
        self.bias = np.zeros(self.out_channels)

    def output_hw(self, h, w):
        oh = (h - self.kh) // self.stride + 1
        ow = (w - self.kw) // self.stride + 1
        return oh, ow

    def _im2col(self, x, oh, ow):
        # gather patches: [B, C, OH, OW, KH, KW] -> [B*OH*OW, C*KH*KW]
        s = self.stride
        rows = (np.arange(oh) * s)[:, None] + np.arange(self.kh)[None, :]  # [OH, KH]
        cols = (np.arange(ow) * s)[:, None] + np.arange(self.kw)[None, :]  # [OW, KW]
        patches = x[:, :, rows[:, None, :, None], cols[None, :, None, :]]
        patches = patches.transpose(0, 2, 3, 1, 4, 5)
        return patches.reshape(x.shape[0] * oh * ow, -1)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"expected NCHW input with {self.in_channels} channels, got shape {x.shape}"
            )
        b, _, h, w = x.shape
        oh, ow = self.output_hw(h, w)
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(
                f"kernel {self.kh}x{self.kw} stride {self.stride} does not fit {h}x{w} input"
            )
        cols = self._im2col(x, oh, ow)  # [B*OH*OW, C*KH*KW]
        w2 = self.weights.reshape(self.out_channels, -1)
        z = cols @ w2.T + self.bias  # [B*OH*OW, OC]
        z = z.reshape(b, oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        return activate(z, self.activation), (x.shape, cols, z)

    def backward(self, grad_out, cache):
        x_shape, cols, z = cache
        b, _, h, w = x_shape
        oh, ow = self.output_hw(h, w)
        s = self.stride
        dz = grad_out * activation_slope(z, self.activation)  # [B, OC, OH, OW]
        dz_mat = dz.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        grad_w = (dz_mat.T @ cols).reshape(self.weights.shape)
        grad_b = dz_mat.sum(axis=0)
        w2 = self.weights.reshape(self.out_channels, -1)
        dcols = dz_mat @ w2  # [B*OH*OW, C*KH*KW]
        d6 = dcols.reshape(b, oh, ow, self.in_channels, self.kh, self.kw)
        d6 = d6.transpose(0, 3, 4, 5, 1, 2)  # [B, C, KH, KW, OH, OW]
        grad_x = np.zeros(x_shape)
        # scatter each kernel offset back; slices within one (kh, kw) never overlap
        for kh in range(self.kh):
            for kw in range(self.kw):
                grad_x[:, :, kh : kh + oh * s : s, kw : kw + ow * s : s] += d6[:, :, kh, kw]
        return grad_x, {"weights": grad_w, "bias": grad_b}

    def param_count(self):
        return self.weights.size + self.bias.size


class MaxPoolLayer:
    """Non-overlapping max pooling with window = stride = pool size."""

    prunable = False

    def __init__(self, pool):
        if pool < 1:
            raise ConfigurationError(f"pool size must be >= 1, got {pool}")
        self.pool = int(pool)

    def init_params(self, rng):
        pass

    def output_hw(self, h, w):
        return h // self.pool, w // self.pool

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise ShapeMismatchError(f"expected NCHW input, got shape {x.shape}")
        b, c, h, w = x.shape
        p = self.pool
        oh, ow = self.output_hw(h, w)
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"pool {p} does not fit {h}x{w} input")
        windows = (
            x[:, :, : oh * p, : ow * p]
            .reshape(b, c, oh, p, ow, p)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, oh, ow, p * p)
        )
        argmax = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
        return out, (x.shape, argmax)

    def backward(self, grad_out, cache):
        x_shape, argmax = cache
        b, c, h, w = x_shape
        p = self.pool
        oh, ow = argmax.shape[2], argmax.shape[3]
        dwindows = np.zeros((b, c, oh, ow, p * p))
        np.put_along_axis(dwindows, argmax[..., None], grad_out[..., None], axis=-1)
        dx = np.zeros(x_shape)
        dx[:, :, : oh * p, : ow * p] = (
            dwindows.reshape(b, c, oh, ow, p, p)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, oh * p, ow * p)
        )
        return dx, None

    def param_count(self):
        return 0


class DropoutLayer:
    """Inverted dropout: scales by 1/(1-p) at train time, identity at eval."""

    prunable = False

    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)

    def init_params(self, rng):
        pass

    def forward(self, x, training=False, rng=None):
        if not training or self.p == 0.0:
            return x, None
        if rng is None:
            raise ConfigurationError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * keep, keep

    def backward(self, grad_out, cache):
        if cache is None:
            return grad_out, None
        return grad_out * cache, None

    def param_count(self):
        return 0
