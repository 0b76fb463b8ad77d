"""Accuracy, corruption-grid aggregates, calibration and energy statistics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_BINS = 10
# exact decimal edges: k/10 is correctly rounded, unlike repeated addition of 0.1
BIN_EDGES = np.arange(N_BINS + 1) / N_BINS


def accuracy(logits, labels):
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) < 1:
        raise ValueError("accuracy needs at least one sample")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class CorruptionGrid:
    """Top-1 error rates ``errors[c][s]`` for corruption ``c`` at severity ``s``."""

    corruptions: list
    severities: list
    errors: np.ndarray
    method: str = ""

    def __post_init__(self):
        self.corruptions = list(self.corruptions)
        self.severities = list(self.severities)
        self.errors = np.asarray(self.errors, dtype=float)
        if self.errors.shape != (len(self.corruptions), len(self.severities)):
            raise ValueError("error grid shape does not match corruption/severity lists")

    @classmethod
    def from_cells(cls, cells, method=""):
        """Build from ``{(kind, severity): error}``; missing cells become NaN."""
        kinds = sorted({k for k, _ in cells}, key=_kind_order)
        sevs = sorted({s for _, s in cells})
        errors = np.full((len(kinds), len(sevs)), np.nan)
        for (k, s), e in cells.items():
            errors[kinds.index(k), sevs.index(s)] = e
        return cls(kinds, sevs, errors, method)

    @property
    def complete(self):
        return bool(np.all(np.isfinite(self.errors)))

    def check_complete(self):
        if not self.complete:
            holes = [(self.corruptions[c], self.severities[s])
                     for c, s in zip(*np.nonzero(~np.isfinite(self.errors)))]
            raise ValueError(f"incomplete corruption grid, missing cells {holes}")


def _kind_order(kind):
    from .shiftbench import CORRUPTIONS
    return (CORRUPTIONS.index(kind) if kind in CORRUPTIONS else len(CORRUPTIONS), kind)


def average_accuracy(grid: CorruptionGrid):
    """One minus the mean error over all corruptions and severities."""
    grid.check_complete()
    return float(1.0 - grid.errors.mean())


def mce(grid_f: CorruptionGrid, grid_f0: CorruptionGrid):
    """Mean corruption error of ``grid_f`` relative to baseline ``grid_f0``, in percent."""
    grid_f.check_complete()
    grid_f0.check_complete()
    if set(grid_f.corruptions) != set(grid_f0.corruptions) or \
            list(grid_f.severities) != list(grid_f0.severities):
        raise ValueError("grids cover different corruptions or severities")
    ratios = []
    for c, kind in enumerate(grid_f.corruptions):
        base = grid_f0.errors[grid_f0.corruptions.index(kind)].sum()
        if base <= 0:
            raise ZeroDivisionError(f"baseline error sum is zero for corruption {kind!r}")
        ratios.append(grid_f.errors[c].sum() / base)
    return float(100.0 * np.mean(ratios))


@dataclass
class ReliabilityBins:
    """Ten confidence bins ``(k/10, (k+1)/10]``."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros(N_BINS, dtype=np.int64))
    conf_sum: np.ndarray = field(default_factory=lambda: np.zeros(N_BINS))
    correct: np.ndarray = field(default_factory=lambda: np.zeros(N_BINS, dtype=np.int64))

    @property
    def n(self):
        return int(self.counts.sum())

    @property
    def confidence(self):
        """Mean confidence per bin; 0 for empty bins."""
        return np.divide(self.conf_sum, self.counts, out=np.zeros(N_BINS), where=self.counts > 0)

    @property
    def accuracy(self):
        return np.divide(self.correct, self.counts, out=np.zeros(N_BINS), where=self.counts > 0)

    def merge(self, other: "ReliabilityBins"):
        return ReliabilityBins(self.counts + other.counts, self.conf_sum + other.conf_sum,
                               self.correct + other.correct)

    def to_dict(self):
        return {"edges": BIN_EDGES.tolist(), "count": self.counts.tolist(),
                "confidence": self.confidence.tolist(), "accuracy": self.accuracy.tolist()}


def bin_index(conf):
    """Bin of each confidence; a value on an edge belongs to the lower bin."""
    idx = np.searchsorted(BIN_EDGES, conf, side="left") - 1
    return np.clip(idx, 0, N_BINS - 1)


def reliability(probs, labels, atol=1e-5):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("reliability needs a non-empty [n, K] probability matrix")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > atol):
        raise ValueError("rows of probs must be probability vectors")
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == labels
    b = bin_index(conf)
    return ReliabilityBins(np.bincount(b, minlength=N_BINS).astype(np.int64),
                           np.bincount(b, weights=conf, minlength=N_BINS),
                           np.bincount(b, weights=correct, minlength=N_BINS).astype(np.int64))


def ece_mce(bins: ReliabilityBins):
    """Expected and maximum calibration error over the non-empty bins."""
    n = bins.n
    if n < 1:
        raise ValueError("no predictions in bins")
    used = bins.counts > 0
    gap = np.abs(bins.accuracy - bins.confidence)[used]
    ece = float(np.sum(bins.counts[used] / n * gap))
    return ece, float(gap.max())


DECILES = tuple(range(10, 100, 10))


def energy_summary(energies):
    """Mean, population std, min, max and deciles (linear interpolation)."""
    e = np.asarray(energies, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("energy_summary needs at least one value")
    q = np.percentile(e, DECILES, method="linear")
    return {"mean": float(e.mean()), "std": float(e.std()), "min": float(e.min()),
            "max": float(e.max()), "deciles": [float(v) for v in q]}
