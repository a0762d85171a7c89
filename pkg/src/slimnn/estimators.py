"""scikit-learn estimator facades over the training engine.

Three classifiers cover the benchmark's architectures: a dense MLP with
iterative pruning (final_sparsity=0 gives the uncompressed baseline), a
hashed weight-sharing MLP, and the small conv net. All follow sklearn
conventions (params stored verbatim, fitted attributes carry a trailing
underscore, get_params/set_params work for grid composition).
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ConfigurationError
from .network import (
    ConvSpec,
    TrainHyper,
    conv_net_spec,
    hashed_mlp_spec,
    init_network,
    mlp_spec,
    softmax,
)
from .pruning import PruningPlan, current_sparsity, run_pruning
from .seeding import derive_seed, rng_for
from .training import evaluate, predict_logits, train_epochs


class _NetClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit/predict plumbing; subclasses build the architecture."""

    def _resolved_penalty(self):
        return self.penalty, self.alpha

    def _hyper(self):
        penalty, alpha = self._resolved_penalty()
        return TrainHyper(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            regularization=penalty,
            reg_lambda=alpha,
            max_epochs=self.max_epochs,
            patience=self.patience,
        )

    def _seed(self):
        return 0 if self.random_state is None else int(self.random_state)

    def _split_validation(self, X, y):
        n = len(X)
        n_val = int(round(self.validation_fraction * n))
        if n_val < 1 or n - n_val < 1:
            raise ConfigurationError(
                f"validation_fraction {self.validation_fraction} leaves an empty split for n={n}"
            )
        perm = rng_for(self._seed(), "val-split").permutation(n)
        val, train = perm[:n_val], perm[n_val:]
        return X[train], y[train], X[val], y[val]

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        spec = self._build_spec(X.shape[1], len(self.classes_))
        net = init_network(spec, derive_seed(self._seed(), "network"))
        xt, yt, xv, yv = self._split_validation(X, y_idx)
        result = run_pruning(
            net,
            self._plan(),
            self._hyper(),
            xt,
            yt,
            xv,
            yv,
            seed=derive_seed(self._seed(), "train"),
        )
        self.network_ = result.network
        self.last_network_ = result.last_network
        self.trajectory_ = result.trajectory
        self.best_validation_accuracy_ = result.best_val_accuracy
        self.n_epochs_ = result.epochs_run
        self.param_count_ = self.network_.param_count()
        self.sparsity_ = current_sparsity(self.network_)
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        logits = predict_logits(self.network_, X)
        return self.classes_[logits.argmax(axis=1)]

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        return softmax(predict_logits(self.network_, X))


class PrunedMLPClassifier(_NetClassifier):
    """Single-hidden-layer MLP trained by SGD with iterative pruning.

    With final_sparsity=0 this is the plain uncompressed baseline (same
    epoch structure, no edges removed). method selects the saliency rule:
    "mag_l1"/"mag_l2" rank edges by |w|, "obd" by w^2 * d2L/dw2 estimated
    from a diagonal curvature pass. penalty="auto" picks the conventional
    regularizer for the method (l1 at 1e-5 for mag_l1, else l2 at 1e-3).
    """

    def __init__(self, hidden_units=100, activation="relu", method="mag_l2",
                 final_sparsity=0.0, prune_steps=20, schedule_exponent=3.0,
                 prune_interval=10, warmup_epochs=20, schedule="root",
                 scope="global", trigger="interval", plateau_patience=3,
                 obd_sample_size=1000, hessian_variant="gauss_newton",
                 penalty="auto", alpha=None, learning_rate=1e-2, batch_size=16,
                 max_epochs=400, patience=10, validation_fraction=0.1,
                 random_state=0):
        self.hidden_units = hidden_units
        self.activation = activation
        self.method = method
        self.final_sparsity = final_sparsity
        self.prune_steps = prune_steps
        self.schedule_exponent = schedule_exponent
        self.prune_interval = prune_interval
        self.warmup_epochs = warmup_epochs
        self.schedule = schedule
        self.scope = scope
        self.trigger = trigger
        self.plateau_patience = plateau_patience
        self.obd_sample_size = obd_sample_size
        self.hessian_variant = hessian_variant
        self.penalty = penalty
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _resolved_penalty(self):
        penalty = self.penalty
        if penalty == "auto":
            penalty = "l1" if self.method == "mag_l1" else "l2"
        alpha = self.alpha
        if alpha is None:
            alpha = 1e-5 if penalty == "l1" else 1e-3
        return penalty, alpha

    def _build_spec(self, n_features, n_classes):
        return mlp_spec(self.hidden_units, in_dim=n_features, n_classes=n_classes,
                        activation=self.activation)

    def _plan(self):
        return PruningPlan(
            final_sparsity=self.final_sparsity,
            steps=self.prune_steps,
            exponent=self.schedule_exponent,
            epochs_between_prunes=self.prune_interval,
            warmup_epochs=self.warmup_epochs,
            method=self.method,
            obd_sample_size=self.obd_sample_size,
            schedule=self.schedule,
            scope=self.scope,
            trigger=self.trigger,
            plateau_patience=self.plateau_patience,
            hessian_variant=self.hessian_variant,
        )


class HashedMLPClassifier(_NetClassifier):
    """MLP whose weight matrices live in hashed shared buckets.

    Bucket counts per layer are ceil(compression_ratio * virtual edges).
    Training runs `pretrain_epochs` unconditionally, then continues to a
    validation plateau, mirroring the pruning runs' epoch budget.
    """

    def __init__(self, hidden_units=100, compression_ratio=0.1, sign_hash=False,
                 activation="relu", penalty="l2", alpha=1e-3, learning_rate=1e-2,
                 batch_size=16, pretrain_epochs=220, max_epochs=400, patience=10,
                 validation_fraction=0.1, random_state=0):
        self.hidden_units = hidden_units
        self.compression_ratio = compression_ratio
        self.sign_hash = sign_hash
        self.activation = activation
        self.penalty = penalty
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _build_spec(self, n_features, n_classes):
        return hashed_mlp_spec(
            self.hidden_units,
            self.compression_ratio,
            in_dim=n_features,
            n_classes=n_classes,
            activation=self.activation,
            sign_hash=self.sign_hash,
        )

    def _plan(self):
        # no pruning; reuse the run loop for the epoch budget + patience tail
        return PruningPlan(
            final_sparsity=0.0,
            steps=1,
            exponent=1.0,
            epochs_between_prunes=1,
            warmup_epochs=max(self.pretrain_epochs - 1, 0),
        )


class SimpleConvClassifier(_NetClassifier):
    """conv -> maxpool -> (dropout) -> linear, trained a fixed epoch count.

    Matches the sweep protocol: no early stopping, accuracy read at the
    final epoch. Input rows are flattened images; `input_shape` restores
    the (H, W) grid.
    """

    def __init__(self, kernel=5, out_channels=4, stride=1, pool=2, dropout=0.0,
                 activation="relu", input_shape=(28, 28), penalty="l2", alpha=1e-3,
                 learning_rate=1e-2, batch_size=16, epochs=30, random_state=0):
        self.kernel = kernel
        self.out_channels = out_channels
        self.stride = stride
        self.pool = pool
        self.dropout = dropout
        self.activation = activation
        self.input_shape = input_shape
        self.penalty = penalty
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def conv_spec(self):
        return ConvSpec(
            kernel=self.kernel,
            out_channels=self.out_channels,
            stride=self.stride,
            pool=self.pool,
            dropout=self.dropout,
        )

    def _hyper(self):
        return TrainHyper(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            regularization=self.penalty,
            reg_lambda=self.alpha,
            max_epochs=self.epochs,
            patience=self.epochs,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        h, w = self.input_shape
        if h * w != X.shape[1]:
            raise ValueError(
                f"input_shape {self.input_shape} does not match {X.shape[1]} features"
            )
        spec = conv_net_spec(self.conv_spec(), input_hw=(h, w),
                             n_classes=len(self.classes_), activation=self.activation)
        net = init_network(spec, derive_seed(self._seed(), "network"))
        losses = train_epochs(
            net, self._hyper(), X, y_idx, self.epochs,
            seed=derive_seed(self._seed(), "train"),
        )
        self.network_ = net
        self.loss_curve_ = losses
        self.n_epochs_ = self.epochs
        self.param_count_ = net.param_count()
        return self
