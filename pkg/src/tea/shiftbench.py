"""Distribution-shift benchmarks.

* 2-D Gaussian mixtures whose test split is rotated/translated/scaled/noised
  (covariate shift with labels untouched).
* Small synthetic single-channel glyph images.
* Seven parametric image corruptions at severities 1-5, with parameters from
  the versioned table ``data/severity_table.json``.
* IDX (MNIST-format) reading and writing.

Images are in [-1, 1] everywhere. Every generator is a pure function of its
spec and :class:`~tea.rng.RngStream`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .rng import RngStream

CORRUPTIONS = ("gaussian_noise", "shot_noise", "impulse_noise", "defocus_blur",
               "contrast", "brightness", "pixelate")
SEVERITIES = (1, 2, 3, 4, 5)


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)
    value_range: tuple | None = (-1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) < 1 or len(self.inputs) != len(self.labels):
            raise ValueError("dataset needs n >= 1 inputs with one label each")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")
        if self.value_range is not None:
            lo, hi = self.value_range
            if self.inputs.min() < lo or self.inputs.max() > hi:
                raise ValueError(f"inputs outside declared range {self.value_range}")

    def __len__(self):
        return len(self.labels)


# --- 2-D mixtures -------------------------------------------------------------

@dataclass(frozen=True)
class Shift2D:
    rotation_deg: float = 0.0
    translation: tuple = (0.0, 0.0)
    scale: float = 1.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class Mixture2DSpec:
    means: tuple
    covs: tuple
    n_per_class: int = 500
    shift: Shift2D = Shift2D()

    def __post_init__(self):
        if len(self.means) != len(self.covs) or len(self.means) < 1:
            raise ValueError("need one covariance per class mean")
        if not self.shift.scale > 0:
            raise ValueError("shift scale must be positive")
        if self.shift.noise_std < 0:
            raise ValueError("shift noise_std must be non-negative")
        for c in self.covs:
            c = np.asarray(c, dtype=float)
            if c.shape != (2, 2) or not np.allclose(c, c.T):
                raise ValueError("covariances must be symmetric 2x2")
            if np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValueError("covariance is not positive definite")

    @property
    def num_classes(self):
        return len(self.means)


def rotation_matrix(deg):
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def apply_shift(points, shift: Shift2D, rng: RngStream | None = None):
    """Rotate, translate, scale about the origin, then add isotropic noise."""
    out = points @ rotation_matrix(shift.rotation_deg).T
    out = (out + np.asarray(shift.translation, dtype=float)) * shift.scale
    if shift.noise_std > 0:
        out = out + shift.noise_std * rng.child("shift-noise").generator().standard_normal(out.shape)
    return out


def gen_mixture2d(spec: Mixture2DSpec, split: str, rng: RngStream, dtype=np.float32):
    """Sample a split; the ``test`` split carries the covariate shift."""
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    r = rng.child("mixture2d", split)
    g = r.generator()
    xs, ys = [], []
    for k, (mu, cov) in enumerate(zip(spec.means, spec.covs)):
        chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
        z = g.standard_normal((spec.n_per_class, 2))
        xs.append(np.asarray(mu, dtype=float) + z @ chol.T)
        ys.append(np.full(spec.n_per_class, k))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if split == "test":
        x = apply_shift(x, spec.shift, r)
    prov = {"kind": "mixture2d", "split": split,
            "shift": {"rotation_deg": spec.shift.rotation_deg,
                      "translation": list(spec.shift.translation),
                      "scale": spec.shift.scale, "noise_std": spec.shift.noise_std}}
    return LabeledDataset(x.astype(dtype), y, prov, value_range=None)


# --- glyph images -------------------------------------------------------------

GLYPHS = ("hbar", "vbar", "diag", "antidiag", "box", "plus")


def _draw_glyph(kind, size, g):
    img = np.zeros((size, size))
    if kind in ("hbar", "vbar"):
        length = int(g.integers(4, size + 1))
        line = int(g.integers(1, size - 1))
        start = int(g.integers(0, size - length + 1))
        if kind == "hbar":
            img[line, start:start + length] = 1.0
        else:
            img[start:start + length, line] = 1.0
    elif kind in ("diag", "antidiag"):
        length = int(g.integers(4, size + 1))
        r0 = int(g.integers(0, size - length + 1))
        c0 = int(g.integers(0, size - length + 1))
        t = np.arange(length)
        cols = c0 + t if kind == "diag" else c0 + length - 1 - t
        img[r0 + t, cols] = 1.0
    elif kind == "box":
        side = int(g.integers(4, min(6, size) + 1))
        r0 = int(g.integers(0, size - side + 1))
        c0 = int(g.integers(0, size - side + 1))
        img[r0, c0:c0 + side] = img[r0 + side - 1, c0:c0 + side] = 1.0
        img[r0:r0 + side, c0] = img[r0:r0 + side, c0 + side - 1] = 1.0
    else:
        arm = int(g.integers(1, 3))
        r = int(g.integers(arm, size - arm))
        c = int(g.integers(arm, size - arm))
        img[r - arm:r + arm + 1, c] = 1.0
        img[r, c - arm:c + arm + 1] = 1.0
    return img


def gen_glyphs(n, rng: RngStream, size=8, num_classes=len(GLYPHS), pixel_noise=0.05,
               dtype=np.float32):
    """``n`` glyph images ``[n, 1, size, size]`` with balanced labels.

    Sample ``i`` uses element stream ``i`` of ``rng.child("glyphs")``.
    """
    if not 2 <= num_classes <= len(GLYPHS):
        raise ValueError(f"num_classes must be in [2, {len(GLYPHS)}]")
    base = rng.child("glyphs")
    x = np.empty((n, 1, size, size))
    y = np.arange(n) % num_classes
    for i in range(n):
        g = base.stream(i).generator()
        fg = g.uniform(0.6, 1.0)
        bg = g.uniform(0.0, 0.25)
        shape = _draw_glyph(GLYPHS[y[i]], size, g)
        img = bg + (fg - bg) * shape + pixel_noise * g.standard_normal((size, size))
        x[i, 0] = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    prov = {"kind": "glyphs", "size": size, "num_classes": num_classes}
    return LabeledDataset(x.astype(dtype), y, prov)


# --- corruptions --------------------------------------------------------------

def severity_table():
    text = resources.files("tea").joinpath("data/severity_table.json").read_text()
    return json.loads(text)


_TABLE = severity_table()


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    param: float | None = None  # overrides the table value

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValueError("severity must be an integer in 1..5")

    @property
    def value(self):
        if self.param is not None:
            return self.param
        return _TABLE["kinds"][self.kind]["values"][self.severity - 1]


def _box_blur(u, k):
    # u: [H, W]; k x k mean filter with edge replication
    p = k // 2
    up = np.pad(u, p, mode="edge")
    c = np.cumsum(np.cumsum(np.pad(up, ((1, 0), (1, 0))), axis=0), axis=1)
    h, w = u.shape
    s = c[k:k + h, k:k + w] - c[0:h, k:k + w] - c[k:k + h, 0:w] + c[0:h, 0:w]
    return s / (k * k)


def _pixelate(u, block):
    h, w = u.shape
    out = np.empty_like(u)
    for r in range(0, h, block):
        for c in range(0, w, block):
            out[r:r + block, c:c + block] = u[r:r + block, c:c + block].mean()
    return out


def _corrupt_one(u, kind, v, g):
    # u: one channel plane in [0, 1]
    if kind == "gaussian_noise":
        return u + v * g.standard_normal(u.shape)
    if kind == "shot_noise":
        return g.poisson(u * v) / v
    if kind == "impulse_noise":
        out = u.copy()
        hit = g.random(u.shape) < v
        out[hit] = (g.random(int(hit.sum())) < 0.5).astype(float)
        return out
    if kind == "defocus_blur":
        return _box_blur(u, int(v))
    if kind == "contrast":
        m = u.mean()
        return (u - m) * v + m
    if kind == "brightness":
        return u + v
    return _pixelate(u, int(v))


def corrupt(images, spec: CorruptionSpec, rng: RngStream, clip=True):
    """Corrupt ``[n, C, H, W]`` images in [-1, 1]; image i uses element stream i.

    With ``clip=False`` the unclamped result is returned (for distortion
    measurements); it may leave [-1, 1].
    """
    x = np.asarray(images)
    if x.ndim != 4:
        raise ValueError("images must be [n, C, H, W]")
    if x.min() < -1.0 or x.max() > 1.0:
        raise ValueError("images must lie in [-1, 1]")
    u = (x.astype(np.float64) + 1.0) / 2.0
    base = rng.child("corrupt", spec.kind, spec.severity)
    out = np.empty_like(u)
    v = spec.value
    for i in range(len(u)):
        g = base.stream(i).generator()
        for c in range(u.shape[1]):
            out[i, c] = _corrupt_one(u[i, c], spec.kind, v, g)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return (out * 2.0 - 1.0).astype(x.dtype)


def corrupt_dataset(ds: LabeledDataset, spec: CorruptionSpec, rng: RngStream):
    prov = dict(ds.provenance, corruption=spec.kind, severity=spec.severity)
    return LabeledDataset(corrupt(ds.inputs, spec, rng), ds.labels.copy(), prov)


# --- IDX ----------------------------------------------------------------------

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path, magic, ndim):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    payload = data[4 + 4 * ndim:]
    size = int(np.prod(dims))
    if len(payload) < size:
        raise IdxFormatError(f"{path}: truncated payload ({len(payload)} of {size} bytes)")
    return np.frombuffer(payload[:size], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, dtype=np.float32):
    """Read an IDX image/label pair; pixels map to ``2 * p / 255 - 1``."""
    imgs = _read_idx(images_path, _IDX_IMAGES, 3)
    labels = _read_idx(labels_path, _IDX_LABELS, 1)
    if len(imgs) != len(labels):
        raise IdxFormatError(f"{len(imgs)} images but {len(labels)} labels")
    x = (2.0 * (imgs.astype(np.float64) / 255.0) - 1.0).astype(dtype)
    prov = {"kind": "idx", "images": str(images_path), "labels": str(labels_path)}
    return LabeledDataset(x, labels.astype(np.int64), prov)


def write_idx(images_path, labels_path, images_u8, labels_u8):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", _IDX_IMAGES) + struct.pack(">3I", *images_u8.shape))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", _IDX_LABELS) + struct.pack(">I", len(labels_u8)))
        f.write(labels_u8.tobytes())


# --- batching -----------------------------------------------------------------

def batches(ds: LabeledDataset, batch_size, shuffle_seed=None):
    """Split into ``(x, y)`` batches; shuffled when a seed is given. Last partial batch kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = RngStream(shuffle_seed).child("shuffle").generator().permutation(n)
    return [(ds.inputs[order[s:s + batch_size]], ds.labels[order[s:s + batch_size]])
            for s in range(0, n, batch_size)]
