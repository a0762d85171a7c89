"""Plain SGD training loops and evaluation.

The epoch structure (warmup / prune / patience phases) lives in the pruning
module; this one only knows how to run seeded epochs and score networks.
"""

import numpy as np

from .data import batch_indices
from .errors import DataError, TrainingDivergedError
from .network import Network, TrainHyper
from .seeding import derive_seed, rng_for

EVAL_BATCH = 512


def predict_logits(net: Network, images):
    """Deterministic forward pass (dropout off), chunked over the input."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, len(images), EVAL_BATCH):
        out.append(net.forward(images[start : start + EVAL_BATCH], training=False))
    return np.concatenate(out) if out else np.empty((0, 0))


def evaluate(net: Network, images, labels):
    """Fraction of argmax(logits) == label, in [0, 1]."""
    if len(images) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    logits = predict_logits(net, images)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))


def evaluate_dataset(net: Network, ds):
    return evaluate(net, ds.images, ds.labels)


def train_epoch(net: Network, hyper: TrainHyper, images, labels, epoch, seed,
                dropout_rng=None):
    """One seeded pass over the data; returns the mean per-batch loss.

    Batch order comes from (seed, epoch) so a run replays exactly; the
    dropout stream is owned by the caller.
    """
    labels = np.asarray(labels)
    losses = []
    order_seed = derive_seed(seed, "order", epoch)
    try:
        for idx in batch_indices(len(images), hyper.batch_size, order_seed):
            loss, grads = net.loss_and_grad(images[idx], labels[idx], rng=dropout_rng)
            net.sgd_step(grads, hyper)
            losses.append(loss)
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(str(exc), epoch=epoch) from None
    return float(np.mean(losses))


def train_epochs(net: Network, hyper: TrainHyper, images, labels, n_epochs, seed,
                 start_epoch=0, dropout_rng=None):
    """Run a fixed number of epochs; returns the list of mean losses."""
    if dropout_rng is None:
        dropout_rng = rng_for(seed, "dropout")
    return [
        train_epoch(net, hyper, images, labels, start_epoch + e, seed, dropout_rng)
        for e in range(n_epochs)
    ]
