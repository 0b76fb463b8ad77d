"""Scalar losses over logits, each returning ``(value, d value / d logits)``."""
import numpy as np

from .energy import energy_grad_logits, energy_marginal, logsumexp, softmax


def sum_logits(logits, labels=None):
    return float(np.sum(logits)), np.ones_like(logits)


def mean_energy(logits, labels=None):
    n = logits.shape[0]
    return float(energy_marginal(logits).mean()), energy_grad_logits(logits) / n


def entropy(logits):
    """Per-sample Shannon entropy of the softmax, in nats."""
    logp = logits - logsumexp(logits)[:, None]
    return -(np.exp(logp) * logp).sum(axis=1)


def mean_entropy(logits, labels=None):
    n = logits.shape[0]
    logp = logits - logsumexp(logits)[:, None]
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    # dH/dz_j = -p_j (log p_j + H)
    grad = -p * (logp + h[:, None]) / n
    return float(h.mean()), grad


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    rows = np.arange(n)
    value = float((logsumexp(logits) - logits[rows, labels]).mean())
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return value, grad / n


LOSSES = {
    "sum": sum_logits,
    "energy": mean_energy,
    "entropy": mean_entropy,
    "cross_entropy": cross_entropy,
}


def get_loss(loss):
    if callable(loss):
        return loss
    try:
        return LOSSES[loss]
    except KeyError:
        raise ValueError(f"unknown loss {loss!r}; choose from {sorted(LOSSES)}") from None
