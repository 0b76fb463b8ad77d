"""Langevin negative sampler over an energy landscape.

One update is ``x <- x - (step_size / 2) * dE/dx + scale * eps`` with
``eps ~ N(0, I)``. The noise scale depends on ``scaling_mode``:

``paper-literal``
    ``scale = step_size`` (drift and noise share the step size).
``decoupled``
    ``scale = noise_std`` (the default, step size 0.1 with std 0.01).
``exact-langevin``
    ``scale = sqrt(step_size)``, whose stationary law is ``exp(-E)``; used to
    validate the sampler against analytic energies.

A target is anything with ``energy_and_input_grad(x) -> (energies, grad)``
where ``grad`` is the gradient of the summed energy, i.e. each sample's own
energy gradient for per-sample energies.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .rng import ElementStreams, RngStream

log = logging.getLogger(__name__)

SCALING_MODES = ("paper-literal", "decoupled", "exact-langevin")
INIT_KINDS = ("uniform", "gaussian")


@dataclass(frozen=True)
class SgldConfig:
    steps: int = 20
    step_size: float = 0.1
    noise_std: float = 0.01
    init: str = "uniform"
    clamp_to_range: bool = False
    scaling_mode: str = "decoupled"

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("SGLD steps must be a positive integer")
        if not self.step_size > 0:
            raise ValueError("SGLD step_size must be positive")
        if not self.noise_std >= 0:
            raise ValueError("SGLD noise_std must be non-negative")
        if self.init not in INIT_KINDS:
            raise ValueError(f"init must be one of {INIT_KINDS}")
        if self.scaling_mode not in SCALING_MODES:
            raise ValueError(f"scaling_mode must be one of {SCALING_MODES}")

    @property
    def noise_scale(self):
        if self.scaling_mode == "paper-literal":
            return self.step_size
        if self.scaling_mode == "exact-langevin":
            return math.sqrt(self.step_size)
        return self.noise_std


class QuadraticEnergy:
    """``E(x) = ||x||^2 / 2`` per sample; its Boltzmann law is N(0, I)."""

    def energy_and_input_grad(self, x):
        x = np.asarray(x)
        flat = x.reshape(len(x), -1)
        return 0.5 * (flat * flat).sum(axis=1), x.copy()


def _streams(rng, n):
    return rng if isinstance(rng, ElementStreams) else ElementStreams(rng, n)


def init_negatives(cfg: SgldConfig, shape, rng, dtype=np.float32):
    """Draw ``shape = [n, ...]`` initial samples, element i from stream i."""
    shape = tuple(shape)
    streams = _streams(rng, shape[0])
    if cfg.init == "uniform":
        return streams.uniform(shape[1:], -1.0, 1.0, dtype=dtype)
    return streams.normal(shape[1:], dtype=dtype)


def sgld_step(target, x, cfg: SgldConfig, rng, step_index=0):
    """One Langevin update; returns ``(x_next, energies of x)``."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite SGLD state at step {step_index}")
    energies, grad = target.energy_and_input_grad(x)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite energy gradient at SGLD step {step_index}")
    scale = cfg.noise_scale
    with np.errstate(over="ignore", invalid="ignore"):  # checked below
        out = x - (0.5 * cfg.step_size) * grad
        if scale > 0:
            out = out + scale * _streams(rng, len(x)).normal(x.shape[1:], dtype=x.dtype)
        if cfg.clamp_to_range:
            out = np.clip(out, -1.0, 1.0)
        out = out.astype(x.dtype, copy=False)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite SGLD sample at step {step_index}")
    return out, energies


def sgld_chain(target, cfg: SgldConfig, batch_shape, rng: RngStream, dtype=np.float32):
    """Initialize from ``p0`` and run ``cfg.steps`` updates.

    Returns ``(negatives, energy_trace)`` where ``energy_trace[t]`` is the mean
    energy of the chain state before update ``t``. The final iterate is
    returned as the negative sample.
    """
    streams = _streams(rng, tuple(batch_shape)[0])
    x = init_negatives(cfg, batch_shape, streams, dtype)
    trace = np.empty(cfg.steps)
    for t in range(cfg.steps):
        x, energies = sgld_step(target, x, cfg, streams, step_index=t)
        trace[t] = float(np.mean(energies))
    if cfg.steps > 1:
        rises = int(np.sum(np.diff(trace) > 1e-6))
        log.debug("sgld chain: %d/%d energy increases, final mean energy %.6g",
                  rises, cfg.steps - 1, trace[-1])
    return x, trace


def trace_to_csv(trace):
    """CSV text with ``step,mean_energy`` rows."""
    lines = ["step,mean_energy"]
    lines += [f"{t},{float(e)!r}" for t, e in enumerate(trace)]
    return "\n".join(lines) + "\n"
