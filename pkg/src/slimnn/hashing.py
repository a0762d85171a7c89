"""Weight sharing through edge hashing.

A hashed layer stores K bucket weights instead of a full [out x in] matrix.
A seeded integer mixer assigns every virtual edge (i, j) to one bucket; the
edge's effective weight is its bucket's value (optionally flipped by a
per-edge sign hash). Training sums edge gradients into their buckets.
"""

import numpy as np

from .errors import ConfigurationError, ShapeMismatchError
from .layers import ACTIVATIONS, activate, activation_slope, _flatten_batch
from .seeding import splitmix64

_SIGN_SALT = 0x5851F42D4C957F2D


def bucket_index(hash_seed, layer_id, row, col, n_buckets):
    """Bucket slot for virtual edge (row, col) of a layer.

    Deterministic across runs and platforms. `row`/`col` may be scalars or
    arrays (broadcast together); returns int64 of the broadcast shape, or a
    plain int for scalar inputs.
    """
    if n_buckets < 1:
        raise ConfigurationError(f"bucket count must be >= 1, got {n_buckets}")
    state = _edge_state(hash_seed, layer_id, row, col)
    idx = (state % np.uint64(n_buckets)).astype(np.int64)
    if np.isscalar(row) and np.isscalar(col):
        return int(idx.reshape(-1)[0])
    return idx.reshape(np.broadcast_shapes(np.shape(row), np.shape(col)))


def edge_sign(hash_seed, layer_id, row, col):
    """Per-edge sign in {-1.0, +1.0}, from a stream independent of bucket_index."""
    state = splitmix64(_edge_state(hash_seed, layer_id, row, col) ^ np.uint64(_SIGN_SALT))
    sign = 1.0 - 2.0 * (state & np.uint64(1)).astype(np.float64)
    if np.isscalar(row) and np.isscalar(col):
        return float(sign.reshape(-1)[0])
    return sign.reshape(np.broadcast_shapes(np.shape(row), np.shape(col)))


def _edge_state(hash_seed, layer_id, row, col):
    r = np.asarray(row, dtype=np.uint64)
    c = np.asarray(col, dtype=np.uint64)
    state = splitmix64(np.uint64(int(hash_seed) & 0xFFFFFFFFFFFFFFFF))
    state = splitmix64(state ^ np.uint64(int(layer_id) & 0xFFFFFFFFFFFFFFFF))
    state = splitmix64(state ^ r)
    return splitmix64(state ^ c)


class HashedLayer:
    """Dense layer whose [out_dim x in_dim] weights live in K shared buckets."""

    prunable = False

    def __init__(self, in_dim, out_dim, n_buckets, hash_seed, layer_id=0,
                 sign_hash=False, activation="identity"):
        if in_dim < 1 or out_dim < 1:
            raise ConfigurationError(f"hashed dims must be positive, got {in_dim}x{out_dim}")
        if n_buckets < 1:
            raise ConfigurationError(f"bucket count must be >= 1, got {n_buckets}")
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.n_buckets = int(n_buckets)
        self.hash_seed = int(hash_seed)
        self.layer_id = int(layer_id)
        self.sign_hash = bool(sign_hash)
        self.activation = activation
        self.buckets = np.zeros(self.n_buckets)
        self.bias = np.zeros(out_dim)
        rows = np.arange(out_dim)[:, None]
        cols = np.arange(in_dim)[None, :]
        self._indices = bucket_index(self.hash_seed, self.layer_id, rows, cols, self.n_buckets)
        self._signs = edge_sign(self.hash_seed, self.layer_id, rows, cols) if sign_hash else None

    def init_params(self, rng):
        # expanded virtual matrix then matches dense init scale
        sigma = 1.0 / np.sqrt(self.in_dim)
        self.buckets = rng.normal(0.0, sigma, size=self.n_buckets)
        self.bias = np.zeros(self.out_dim)

    def expanded_weights(self):
        """Materialize the virtual [out_dim x in_dim] weight matrix."""
        w = self.buckets[self._indices]
        if self._signs is not None:
            w = w * self._signs
        return w

    def forward(self, x, training=False, rng=None):
        x2 = _flatten_batch(x)
        if x2.shape[1] != self.in_dim:
            raise ShapeMismatchError(
                f"expected input width {self.in_dim}, got {x2.shape[1]}"
            )
        w = self.expanded_weights()
        z = x2 @ w.T + self.bias
        return activate(z, self.activation), (x.shape, x2, z, w)

    def backward(self, grad_out, cache):
        x_shape, x2, z, w = cache
        dz = grad_out * activation_slope(z, self.activation)
        edge_grad = dz.T @ x2  # gradient the edges would have had, [out, in]
        if self._signs is not None:
            edge_grad = edge_grad * self._signs
        grad_buckets = np.bincount(
            self._indices.ravel(), weights=edge_grad.ravel(), minlength=self.n_buckets
        )
        grad_b = dz.sum(axis=0)
        grad_x = (dz @ w).reshape(x_shape)
        return grad_x, {"buckets": grad_buckets, "bias": grad_b}

    def param_count(self):
        return self.buckets.size + self.bias.size
