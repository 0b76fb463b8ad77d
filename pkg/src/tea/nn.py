"""Minimal network kernel with hand-derived forward and backward passes.

Tensors are numpy arrays: float32 at runtime, float64 for gradient checks.
Models are sequences of :class:`LayerSpec` with parameters named
``"<layer index>.<name>"`` (``W``, ``b``, ``gamma``, ``beta``) and batch-norm
running statistics named ``"<layer index>.mean"`` / ``"<layer index>.var"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1

TRAIN_STATS = "train-stats"
EVAL_STATS = "eval-stats"
STATS_MODES = (TRAIN_STATS, EVAL_STATS)

LAYER_KINDS = ("Dense", "Conv3x3", "ReLU", "AvgPool2", "Flatten", "BatchNorm", "GroupNorm")
NORM_KINDS = ("BatchNorm", "GroupNorm")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


class CacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: tuple = ()
    group_count: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        need = {"Dense": 2, "Conv3x3": 2, "BatchNorm": 1, "GroupNorm": 1}.get(self.kind, 0)
        if len(self.dims) != need or any(d < 1 for d in self.dims):
            raise ValueError(f"{self.kind} takes {need} positive dims, got {self.dims}")
        if self.kind == "GroupNorm":
            if self.group_count < 1 or self.dims[0] % self.group_count:
                raise ValueError(f"group_count {self.group_count} must divide {self.dims[0]} channels")


def Dense(n_in, n_out):
    return LayerSpec("Dense", (n_in, n_out))


def Conv3x3(c_in, c_out):
    return LayerSpec("Conv3x3", (c_in, c_out))


def ReLU():
    return LayerSpec("ReLU")


def AvgPool2():
    return LayerSpec("AvgPool2")


def Flatten():
    return LayerSpec("Flatten")


def BatchNorm(channels):
    return LayerSpec("BatchNorm", (channels,))


def GroupNorm(channels, groups):
    return LayerSpec("GroupNorm", (channels,), group_count=groups)


def infer_shapes(layers, input_shape):
    """Per-sample output shape after each layer; raises ShapeError on mismatch."""
    shape = tuple(input_shape)
    out = []
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "Dense":
            if shape != (layer.dims[0],):
                raise ShapeError(f"layer {i} Dense expects ({layer.dims[0]},), got {shape}")
            shape = (layer.dims[1],)
        elif k == "Conv3x3":
            if len(shape) != 3 or shape[0] != layer.dims[0]:
                raise ShapeError(f"layer {i} Conv3x3 expects {layer.dims[0]} channels, got {shape}")
            shape = (layer.dims[1],) + shape[1:]
        elif k == "AvgPool2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ShapeError(f"layer {i} AvgPool2 needs even spatial dims, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif k == "Flatten":
            shape = (int(np.prod(shape)),)
        elif k in NORM_KINDS:
            if shape[0] != layer.dims[0] or len(shape) not in (1, 3):
                raise ShapeError(f"layer {i} {k} expects {layer.dims[0]} channels, got {shape}")
        out.append(shape)
    return out


def param_shapes(layer):
    k = layer.kind
    if k == "Dense":
        return {"W": layer.dims, "b": (layer.dims[1],)}
    if k == "Conv3x3":
        c_in, c_out = layer.dims
        return {"W": (c_out, c_in, 3, 3), "b": (c_out,)}
    if k in NORM_KINDS:
        return {"gamma": layer.dims, "beta": layer.dims}
    return {}


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelState:
    """Topology, parameters and running statistics of a network.

    Arrays are read-only; updates go through :meth:`with_params` and
    :meth:`with_running_stats`, which return new states.
    """

    layers: tuple
    input_shape: tuple
    params: dict
    running_stats: dict = field(default_factory=dict)
    mode: str = EVAL_STATS

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.mode not in STATS_MODES:
            raise ValueError(f"mode must be one of {STATS_MODES}")
        shapes = infer_shapes(self.layers, self.input_shape)
        if not shapes or len(shapes[-1]) != 1:
            raise ShapeError("network must end in a flat [K] output")
        expected = set()
        for i, layer in enumerate(self.layers):
            for name, shp in param_shapes(layer).items():
                key = f"{i}.{name}"
                expected.add(key)
                if key not in self.params:
                    raise ShapeError(f"missing parameter {key}")
                if tuple(self.params[key].shape) != tuple(shp):
                    raise ShapeError(f"parameter {key} has shape {self.params[key].shape}, expected {shp}")
            if layer.kind == "BatchNorm":
                for stat in ("mean", "var"):
                    key = f"{i}.{stat}"
                    if key not in self.running_stats or self.running_stats[key].shape != layer.dims:
                        raise ShapeError(f"missing or malformed running stat {key}")
                if np.any(self.running_stats[f"{i}.var"] < 0):
                    raise ValueError(f"negative running variance in layer {i}")
        extra = set(self.params) - expected
        if extra:
            raise ShapeError(f"unexpected parameters {sorted(extra)}")
        dtype = self.dtype
        object.__setattr__(self, "params", {k: _frozen(v, dtype) for k, v in self.params.items()})
        object.__setattr__(self, "running_stats",
                           {k: _frozen(v, dtype) for k, v in self.running_stats.items()})

    @property
    def dtype(self):
        for v in self.params.values():
            return np.asarray(v).dtype
        return np.dtype(np.float32)

    @property
    def num_classes(self):
        return infer_shapes(self.layers, self.input_shape)[-1][0]

    def with_params(self, updates):
        params = dict(self.params)
        for k, v in updates.items():
            if k not in params:
                raise KeyError(k)
            params[k] = v
        return ModelState(self.layers, self.input_shape, params, self.running_stats, self.mode)

    def with_running_stats(self, updates):
        stats = dict(self.running_stats)
        stats.update(updates)
        return ModelState(self.layers, self.input_shape, self.params, stats, self.mode)

    def astype(self, dtype):
        dtype = np.dtype(dtype)
        return ModelState(self.layers, self.input_shape,
                          {k: v.astype(dtype) for k, v in self.params.items()},
                          {k: v.astype(dtype) for k, v in self.running_stats.items()}, self.mode)

    def norm_param_names(self):
        return [f"{i}.{n}" for i, l in enumerate(self.layers) if l.kind in NORM_KINDS
                for n in ("gamma", "beta")]

    def same_as(self, other):
        """Bit-identical parameters, running stats and topology."""
        if self.layers != other.layers or self.input_shape != other.input_shape:
            return False
        for a, b in ((self.params, other.params), (self.running_stats, other.running_stats)):
            if a.keys() != b.keys():
                return False
            for k in a:
                if a[k].dtype != b[k].dtype or a[k].tobytes() != b[k].tobytes():
                    return False
        return True


def init_model(layers, input_shape, rng: np.random.Generator, dtype=np.float32):
    """He-initialized weights, zero biases, unit norm scales."""
    params, stats = {}, {}
    for i, layer in enumerate(layers):
        for name, shp in param_shapes(layer).items():
            if name == "W":
                fan_in = int(np.prod(shp[1:])) if layer.kind == "Conv3x3" else shp[0]
                params[f"{i}.W"] = rng.standard_normal(shp) * np.sqrt(2.0 / fan_in)
            elif name == "gamma":
                params[f"{i}.gamma"] = np.ones(shp)
            else:
                params[f"{i}.{name}"] = np.zeros(shp)
        if layer.kind == "BatchNorm":
            stats[f"{i}.mean"] = np.zeros(layer.dims)
            stats[f"{i}.var"] = np.ones(layer.dims)
    params = {k: v.astype(dtype) for k, v in params.items()}
    stats = {k: v.astype(dtype) for k, v in stats.items()}
    return ModelState(tuple(layers), tuple(input_shape), params, stats)


class ForwardCache:
    """Saved activations for one backward pass. Single use."""

    def __init__(self, model, records, stats_mode, input_shape):
        self.model = model
        self.records = records
        self.stats_mode = stats_mode
        self.input_shape = input_shape
        self.used = False

    def batch_stats(self):
        """``{layer index: (mean, var)}`` of every BatchNorm computed from the batch."""
        return {i: (r["mu"], r["var"]) for i, r in enumerate(self.records)
                if r is not None and "mu" in r and self.model.layers[i].kind == "BatchNorm"}


def _bcast(v, ndim):
    # per-channel vector -> broadcastable against [N, C] or [N, C, H, W]
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _norm_fwd(x, axes):
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    return (x - mu) * inv, mu, var, inv


def _norm_bwd(dxhat, xhat, inv, axes):
    m = 1
    for a in axes:
        m *= dxhat.shape[a]
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    return inv / m * (m * dxhat - s1 - xhat * s2)


def _forward_layer(model, i, layer, x, mode):
    k = layer.kind
    p = model.params
    if k == "Dense":
        return x @ p[f"{i}.W"] + p[f"{i}.b"], {"x": x}
    if k == "Conv3x3":
        x = np.ascontiguousarray(x)
        return kernels.conv3x3_forward(x, p[f"{i}.W"], p[f"{i}.b"]), {"x": x}
    if k == "ReLU":
        return np.maximum(x, 0), {"mask": x > 0}
    if k == "AvgPool2":
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), None
    if k == "Flatten":
        return x.reshape(x.shape[0], -1), {"shape": x.shape}
    gamma = _bcast(p[f"{i}.gamma"], x.ndim)
    beta = _bcast(p[f"{i}.beta"], x.ndim)
    if k == "BatchNorm":
        axes = (0,) + tuple(range(2, x.ndim))
        if mode == TRAIN_STATS:
            xhat, mu, var, inv = _norm_fwd(x, axes)
            rec = {"xhat": xhat, "inv": inv, "axes": axes,
                   "mu": mu.reshape(-1), "var": var.reshape(-1)}
        else:
            mu = _bcast(model.running_stats[f"{i}.mean"], x.ndim)
            var = _bcast(model.running_stats[f"{i}.var"], x.ndim)
            inv = 1.0 / np.sqrt(var + NORM_EPS)
            xhat = (x - mu) * inv
            rec = {"xhat": xhat, "inv": inv, "axes": None}
        return gamma * xhat + beta, rec
    # GroupNorm: per-sample statistics in both modes
    n, c = x.shape[:2]
    g = layer.group_count
    xg = x.reshape(n, g, -1)
    xhat_g, _, _, inv = _norm_fwd(xg, (2,))
    xhat = xhat_g.reshape(x.shape)
    return gamma * xhat + beta, {"xhat": xhat, "inv": inv, "group_shape": xg.shape}


def _backward_layer(model, i, layer, rec, dout):
    k = layer.kind
    p = model.params
    if k == "Dense":
        x = rec["x"]
        return dout @ p[f"{i}.W"].T, {f"{i}.W": x.T @ dout, f"{i}.b": dout.sum(axis=0)}
    if k == "Conv3x3":
        dx, dw, db = kernels.conv3x3_backward(rec["x"], p[f"{i}.W"], np.ascontiguousarray(dout))
        return dx, {f"{i}.W": dw, f"{i}.b": db}
    if k == "ReLU":
        return dout * rec["mask"], {}
    if k == "AvgPool2":
        return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * 0.25, {}
    if k == "Flatten":
        return dout.reshape(rec["shape"]), {}
    xhat = rec["xhat"]
    red = (0,) + tuple(range(2, dout.ndim))
    grads = {f"{i}.gamma": (dout * xhat).sum(axis=red), f"{i}.beta": dout.sum(axis=red)}
    dxhat = dout * _bcast(p[f"{i}.gamma"], dout.ndim)
    if k == "BatchNorm":
        if rec["axes"] is None:
            dx = dxhat * rec["inv"]
        else:
            dx = _norm_bwd(dxhat, xhat, rec["inv"], rec["axes"])
    else:
        gs = rec["group_shape"]
        dx = _norm_bwd(dxhat.reshape(gs), xhat.reshape(gs), rec["inv"], (2,)).reshape(dout.shape)
    return dx, grads


def forward(model: ModelState, batch, stats_mode=None):
    """Run the network; returns ``(logits [N, K], cache)``."""
    mode = stats_mode or model.mode
    if mode not in STATS_MODES:
        raise ValueError(f"stats_mode must be one of {STATS_MODES}")
    x = np.asarray(batch)
    if x.ndim < 1 or x.shape[0] < 1 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input {model.input_shape}")
    x = x.astype(model.dtype, copy=False)
    records = []
    for i, layer in enumerate(model.layers):
        # overflow surfaces as NonFiniteError below, not as a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            x, rec = _forward_layer(model, i, layer, x, mode)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite activation after layer {i} ({layer.kind})", layer=i)
        records.append(rec)
    return x, ForwardCache(model, records, mode, np.asarray(batch).shape)


def backward(model: ModelState, cache: ForwardCache, grad_logits):
    """Gradients of ``sum(grad_logits * logits)``; returns ``(param_grads, input_grad)``."""
    if cache.used:
        raise CacheError("forward cache already consumed")
    if cache.model is not model:
        raise CacheError("cache was produced by a different model")
    if len(cache.records) != len(model.layers):
        raise CacheError("cache layer count does not match model")
    cache.used = True
    g = np.asarray(grad_logits, dtype=model.dtype)
    expected = (cache.input_shape[0], model.num_classes)
    if g.shape != expected:
        raise ShapeError(f"grad_logits shape {g.shape} != logits shape {expected}")
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        g, pg = _backward_layer(model, i, model.layers[i], cache.records[i], g)
        grads.update(pg)
    return {k: grads[k] for k in model.params}, g


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def failures(self):
        return {k: e for k, e in self.errors.items() if e >= self.tolerance}


def rel_error(a, b, floor=1e-6):
    """``||a - b|| / max(||a|| + ||b||, floor)``.

    The floor makes the measure absolute for gradients that vanish
    analytically (e.g. a bias feeding a batch-statistics norm), where the
    finite-difference value is pure round-off.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x, h=1e-4):
    """Central differences of scalar ``f`` with respect to every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        fp = f(x)
        flat[j] = old - h
        fm = f(x)
        flat[j] = old
        gflat[j] = (fp - fm) / (2 * h)
    return g


def grad_check(model: ModelState, batch, loss, labels=None, stats_mode=TRAIN_STATS,
               h=1e-4, tolerance=1e-4):
    """Compare analytic and central-difference gradients of a scalar loss.

    ``loss`` is a name from :data:`tea.losses.LOSSES` or a callable
    ``loss(logits, labels) -> (value, grad_logits)``. Requires a float64 model.
    The report holds one relative error per parameter tensor plus ``"input"``.
    """
    from .losses import get_loss

    if model.dtype != np.float64:
        raise TypeError("grad_check needs a float64 model (use model.astype(np.float64))")
    loss_fn = get_loss(loss)
    batch = np.asarray(batch, dtype=np.float64)

    def value(m, x):
        logits, _ = forward(m, x, stats_mode)
        return loss_fn(logits, labels)[0]

    logits, cache = forward(model, batch, stats_mode)
    _, glog = loss_fn(logits, labels)
    pgrads, xgrad = backward(model, cache, glog)
    errors = {}
    for name in model.params:
        num = numeric_grad(lambda p: value(model.with_params({name: p}), batch), model.params[name], h)
        errors[name] = rel_error(pgrads[name], num)
    num = numeric_grad(lambda x: value(model, x), batch, h)
    errors["input"] = rel_error(xgrad, num)
    return GradCheckReport(errors, tolerance)
