"""Reference architectures and source-model training."""
from __future__ import annotations

import logging

import numpy as np

from .adapt import Adam
from .losses import cross_entropy
from .nn import (BN_MOMENTUM, TRAIN_STATS, AvgPool2, BatchNorm, Conv3x3, Dense, Flatten,
                 GroupNorm, ReLU, backward, forward, init_model)
from .rng import RngStream
from .shiftbench import batches

log = logging.getLogger(__name__)


def _norm(kind, channels, groups):
    if kind == "batch":
        return BatchNorm(channels)
    return GroupNorm(channels, groups)


def mlp2d(hidden=32, num_classes=2, norm="batch", groups=4):
    """Dense -> Norm -> ReLU -> Dense over 2-D points."""
    return [Dense(2, hidden), _norm(norm, hidden, groups), ReLU(), Dense(hidden, num_classes)], (2,)


def small_cnn(image_size=8, channels=(8, 16), num_classes=6, norm="batch", groups=4):
    """Conv -> Norm -> ReLU -> AvgPool2 -> Conv -> Norm -> ReLU -> Flatten -> Dense."""
    c1, c2 = channels
    half = image_size // 2
    layers = [Conv3x3(1, c1), _norm(norm, c1, groups), ReLU(), AvgPool2(),
              Conv3x3(c1, c2), _norm(norm, c2, groups), ReLU(), Flatten(),
              Dense(c2 * half * half, num_classes)]
    return layers, (1, image_size, image_size)


class NonFiniteLoss(FloatingPointError):
    pass


def train_source(layers, input_shape, ds, rng: RngStream, epochs=20, batch_size=64, lr=1e-2):
    """Minibatch cross-entropy training with Adam; updates running statistics."""
    model = init_model(layers, input_shape, rng.child("init").generator())
    opt = Adam(lr)
    names = list(model.params)
    for epoch in range(epochs):
        losses = []
        for x, y in batches(ds, batch_size, shuffle_seed=rng.child("epoch", epoch).seed):
            if len(x) < 2:
                continue
            logits, cache = forward(model, x, TRAIN_STATS)
            loss, glog = cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite training loss in epoch {epoch}")
            stats = cache.batch_stats()
            grads, _ = backward(model, cache, glog)
            model = model.with_params(opt.step(model.params, grads, names))
            upd = {}
            for i, (mu, var) in stats.items():
                rm, rv = model.running_stats[f"{i}.mean"], model.running_stats[f"{i}.var"]
                upd[f"{i}.mean"] = (1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu
                upd[f"{i}.var"] = (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * var
            if upd:
                model = model.with_running_stats(upd)
            losses.append(loss)
        log.info("epoch %d: mean loss %.4f", epoch, float(np.mean(losses)))
    return model
