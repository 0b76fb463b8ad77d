"""Energy view of a classifier.

The marginal energy of an input is the negative log-sum-exp of its logits;
lower energy means higher unnormalized density. The partition function is
never evaluated, so only unnormalized log-densities are available.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import TRAIN_STATS, ModelState, backward, forward


def _check_logits(logits):
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ValueError(f"logits must be [batch, K] with K >= 1, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    return logits


def logsumexp(logits):
    """Row-wise max-shifted log-sum-exp."""
    logits = _check_logits(logits)
    m = logits.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]


def softmax(logits):
    logits = _check_logits(logits)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def energy_joint(logits, labels):
    """``E(x, y) = -logits[y]`` per sample."""
    logits = _check_logits(logits)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ValueError("need one label per row")
    if np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    return -logits[np.arange(len(labels)), labels]


def energy_marginal(logits):
    """``E(x) = -log sum_y exp(logits[y])`` per sample."""
    return -logsumexp(logits)


def energy_grad_logits(logits):
    """Derivative of each sample's marginal energy with respect to its logits."""
    return -softmax(logits)


def unnormalized_log_density(energies):
    """``log p(x) + log Z = -E(x)``."""
    return -np.asarray(energies)


@dataclass(frozen=True)
class EnergyView:
    """Read-only energy landscape of a model.

    Usable as an SGLD target through :meth:`energy_and_input_grad`.
    """

    model: ModelState
    stats_mode: str = TRAIN_STATS

    def energy_and_input_grad(self, x):
        """Per-sample energies and the input gradient of their *sum*."""
        energies, xgrad, _ = energy_of_inputs(self, x, want_params=False)
        return energies, xgrad * len(energies)


def energy_of_inputs(view: EnergyView, batch, want_params=True):
    """Energies of a batch with gradients of the batch-mean energy.

    Returns ``(energies [N], input_grad, param_grads)``; ``param_grads`` is a
    dict keyed like ``model.params`` (None when ``want_params`` is false).
    """
    logits, cache = forward(view.model, batch, view.stats_mode)
    energies = energy_marginal(logits)
    glog = energy_grad_logits(logits) / logits.shape[0]
    pgrads, xgrad = backward(view.model, cache, glog)
    return energies, xgrad, (pgrads if want_params else None)
