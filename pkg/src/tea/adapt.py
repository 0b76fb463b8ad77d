"""Test-time adaptation of normalization affine parameters.

Methods:

``TEA``
    Contrastive divergence on the energy: lower the mean energy of the test
    batch, raise the mean energy of SGLD negatives drawn from the model.
``TENT``
    Minimize the mean prediction entropy.
``PL``
    Cross-entropy on confident pseudo-labels.
``BN``
    Replace batch-norm running statistics with test-batch statistics.
``SOURCE``
    No adaptation.

Only parameters flagged in an adaptable mask (by default the ``gamma`` and
``beta`` of every BatchNorm/GroupNorm layer) are ever changed, and running
statistics are never written except by ``BN``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import EnergyView, energy_marginal, energy_of_inputs, softmax
from .losses import cross_entropy, mean_entropy
from .nn import EVAL_STATS, TRAIN_STATS, ModelState, backward, forward
from .rng import RngStream
from .sgld import SgldConfig, sgld_chain

log = logging.getLogger(__name__)

METHODS = ("TEA", "BN", "TENT", "PL", "SOURCE")


@dataclass(frozen=True)
class AdaptConfig:
    method: str = "TEA"
    steps: int = 1
    rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "continual"
    sgld: SgldConfig = field(default_factory=SgldConfig)
    pl_threshold: float = 0.9

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("adaptation steps must be a positive integer")
        if not self.rate > 0:
            raise ValueError("adaptation rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.mode not in ("continual", "episodic"):
            raise ValueError("mode must be 'continual' or 'episodic'")
        if not self.pl_threshold >= 0:
            raise ValueError("pl_threshold must be non-negative")


def norm_affine_mask(model: ModelState):
    """Flag exactly the normalization scale/shift tensors."""
    norm = set(model.norm_param_names())
    return {k: k in norm for k in model.params}


def empty_mask(model: ModelState):
    return {k: False for k in model.params}


class Adam:
    def __init__(self, rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.rate, self.beta1, self.beta2, self.eps = rate, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, names):
        """Return updated copies of ``params[name]`` for ``name`` in ``names``."""
        self.t += 1
        out = {}
        for k in names:
            g = np.asarray(grads[k], dtype=np.float64)
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p = params[k]
            out[k] = (p - self.rate * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        return out


class SGD:
    def __init__(self, rate):
        self.rate = rate

    def step(self, params, grads, names):
        return {k: (params[k] - self.rate * grads[k]).astype(params[k].dtype) for k in names}


def make_optimizer(cfg: AdaptConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.rate, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(cfg.rate)


@dataclass
class StepRecord:
    method: str
    batch: int
    step: int
    loss: float | None
    e_test: float
    e_neg: float | None = None
    acc: float | None = None
    rejected: bool = False
    note: str = ""


@dataclass
class AdaptTrace:
    records: list = field(default_factory=list)
    logits: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self):
        """CSV text with columns ``step,loss,e_test,e_neg,acc``."""
        def fmt(v):
            return "" if v is None else repr(float(v))
        rows = ["step,loss,e_test,e_neg,acc"]
        for j, r in enumerate(self.records):
            rows.append(",".join([str(j), fmt(r.loss), fmt(r.e_test), fmt(r.e_neg), fmt(r.acc)]))
        return "\n".join(rows) + "\n"


def cd_loss(e_test, e_neg):
    """``mean(e_test) - mean(e_neg)``."""
    e_test, e_neg = np.asarray(e_test, dtype=float), np.asarray(e_neg, dtype=float)
    if e_test.size == 0 or e_neg.size == 0:
        raise ValueError("cd_loss needs non-empty energy vectors")
    return float(e_test.mean() - e_neg.mean())


def _apply(model, mask, grads, optimizer):
    names = [k for k in model.params if mask.get(k, False)]
    if not names:
        return model
    return model.with_params(optimizer.step(model.params, grads, names))


def _finite(loss, grads, mask):
    if not np.isfinite(loss):
        return False
    return all(np.all(np.isfinite(grads[k])) for k in grads if mask.get(k, False))


def _batch_acc(logits, labels):
    if labels is None:
        return None
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def tea_step(model, mask, batch, cfg: AdaptConfig, rng: RngStream, optimizer=None,
             negatives=None, labels=None):
    """One contrastive-divergence update of the masked parameters.

    Negatives come from a fresh SGLD chain (or are given) and are treated as
    constants. Returns ``(model, StepRecord)``; a non-finite loss or gradient
    rejects the step and returns the input model.
    """
    optimizer = optimizer or make_optimizer(cfg)
    view = EnergyView(model, TRAIN_STATS)
    batch = np.asarray(batch, dtype=model.dtype)
    try:
        if negatives is None:
            negatives, _ = sgld_chain(view, cfg.sgld, batch.shape, rng, dtype=model.dtype)
        logits, cache = forward(model, batch, TRAIN_STATS)
        e_test = energy_marginal(logits)
        gt, _ = backward(model, cache, -softmax(logits) / len(batch))
        e_neg, _, gn = energy_of_inputs(view, negatives)
    except FloatingPointError as err:
        log.warning("TEA step rejected: %s", err)
        return model, StepRecord("TEA", 0, 0, float("nan"), float("nan"), rejected=True, note=str(err))
    loss = cd_loss(e_test, e_neg)
    grads = {k: gt[k] - gn[k] for k in gt}
    rec = StepRecord("TEA", 0, 0, loss, float(e_test.mean()), float(e_neg.mean()),
                     acc=_batch_acc(logits, labels))
    if not _finite(loss, grads, mask):
        rec.rejected, rec.note = True, "non-finite loss or gradient"
        return model, rec
    return _apply(model, mask, grads, optimizer), rec


def tent_step(model, mask, batch, cfg: AdaptConfig, optimizer=None, labels=None):
    """One entropy-minimization update of the masked parameters."""
    optimizer = optimizer or make_optimizer(cfg)
    try:
        logits, cache = forward(model, batch, TRAIN_STATS)
    except FloatingPointError as err:
        return model, StepRecord("TENT", 0, 0, float("nan"), float("nan"), rejected=True, note=str(err))
    loss, glog = mean_entropy(logits)
    grads, _ = backward(model, cache, glog)
    rec = StepRecord("TENT", 0, 0, loss, float(energy_marginal(logits).mean()),
                     acc=_batch_acc(logits, labels))
    if not _finite(loss, grads, mask):
        rec.rejected, rec.note = True, "non-finite loss or gradient"
        return model, rec
    return _apply(model, mask, grads, optimizer), rec


def pl_step(model, mask, batch, cfg: AdaptConfig, optimizer=None, labels=None):
    """Cross-entropy on pseudo-labels whose confidence reaches the threshold."""
    optimizer = optimizer or make_optimizer(cfg)
    try:
        logits, cache = forward(model, batch, TRAIN_STATS)
    except FloatingPointError as err:
        return model, StepRecord("PL", 0, 0, float("nan"), float("nan"), rejected=True, note=str(err))
    probs = softmax(logits)
    pseudo = np.argmax(probs, axis=1)  # ties -> lowest index
    keep = probs.max(axis=1) >= cfg.pl_threshold
    e_test = float(energy_marginal(logits).mean())
    acc = _batch_acc(logits, labels)
    if not keep.any():
        return model, StepRecord("PL", 0, 0, 0.0, e_test, acc=acc, note="no confident samples")
    loss, gk = cross_entropy(logits[keep], pseudo[keep])
    glog = np.zeros_like(logits)
    glog[keep] = gk
    grads, _ = backward(model, cache, glog)
    rec = StepRecord("PL", 0, 0, loss, e_test, acc=acc, note=f"kept {int(keep.sum())}/{len(keep)}")
    if not _finite(loss, grads, mask):
        rec.rejected, rec.note = True, "non-finite loss or gradient"
        return model, rec
    return _apply(model, mask, grads, optimizer), rec


def bn_stats_adapt(model: ModelState, batch):
    """Set every BatchNorm's running statistics to those of ``batch``."""
    if not any(l.kind in ("BatchNorm", "GroupNorm") for l in model.layers):
        raise ValueError("model has no normalization layer")
    batch = np.asarray(batch)
    if batch.shape[0] < 2:
        raise ValueError("batch statistics need at least 2 samples")
    _, cache = forward(model, batch, TRAIN_STATS)
    updates = {}
    for i, (mu, var) in cache.batch_stats().items():
        updates[f"{i}.mean"] = mu
        updates[f"{i}.var"] = var
    return model.with_running_stats(updates)


def predict(model, batch, method):
    """Logits the way each method makes predictions."""
    mode = EVAL_STATS if method in ("SOURCE", "BN") else TRAIN_STATS
    logits, _ = forward(model, batch, mode)
    return logits


def _iter_batches(batches, labels):
    if labels is None:
        for b in batches:
            if isinstance(b, tuple):
                yield b[0], None
            else:
                yield b, None
    else:
        yield from zip(batches, labels)


def adapt_run(model: ModelState, batches, cfg: AdaptConfig, rng: RngStream, labels=None, mask=None):
    """Adapt over a stream of test batches.

    ``batches`` yields arrays (or ``(x, y)`` tuples); ``labels`` are used for
    reporting accuracy only. Returns ``(adapted model, AdaptTrace)``; the trace
    also holds the post-adaptation logits of every batch.
    """
    source = model
    mask = norm_affine_mask(model) if mask is None else mask
    optimizer = make_optimizer(cfg)
    trace = AdaptTrace()
    episodic = cfg.mode == "episodic"
    for b, (x, y) in enumerate(_iter_batches(batches, labels)):
        x = np.asarray(x, dtype=model.dtype)
        if episodic:
            model = source
            optimizer = make_optimizer(cfg)
        # an episode is independent of its position in the stream, SGLD noise included
        key = 0 if episodic else b
        for i in range(cfg.steps):
            if cfg.method == "TEA":
                model, rec = tea_step(model, mask, x, cfg, rng.child("tea", key, i), optimizer, labels=y)
            elif cfg.method == "TENT":
                model, rec = tent_step(model, mask, x, cfg, optimizer, labels=y)
            elif cfg.method == "PL":
                model, rec = pl_step(model, mask, x, cfg, optimizer, labels=y)
            else:
                if cfg.method == "BN":
                    model = bn_stats_adapt(model, x)
                logits = predict(model, x, cfg.method)
                rec = StepRecord(cfg.method, b, i, None, float(energy_marginal(logits).mean()),
                                 acc=_batch_acc(logits, y))
            rec.method, rec.batch, rec.step = cfg.method, b, i
            trace.records.append(rec)
        trace.logits.append(predict(model, x, cfg.method))
    return model, trace


def with_method(cfg: AdaptConfig, method: str, **changes):
    return replace(cfg, method=method, **changes)
