"""Synthetic classification datasets.

Three generators stand in for image benchmarks:

* ``blobs``     Gaussian clusters in ``dims`` dimensions (MLP tasks).
* ``spiral``    interleaved 2-D spirals, optionally lifted to ``dims`` (harder MLP).
* ``shapes8x8`` procedural one-channel 8x8 images; each class is a stroke
  pattern (bars, crosses, corners, blobs) rendered at a random offset and
  intensity with additive noise (CNN / attention tasks).

Files on disk use the checkpoint container; see ``checkpoint.save_dataset``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

KINDS = ("blobs", "spiral", "shapes8x8")


@dataclass
class Dataset:
    x: torch.Tensor
    y: torch.Tensor
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if len(self.y) == 0:
            raise ValueError("dataset is empty")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.provenance.get("classes", int(self.y.max()) + 1))

    def subset(self, fraction: float, seed: int = 0) -> "Dataset":
        n = max(1, int(round(len(self) * fraction)))
        idx = torch.randperm(len(self), generator=torch.Generator().manual_seed(seed))[:n].sort().values
        return Dataset(self.x[idx], self.y[idx], self.split, dict(self.provenance, fraction=fraction))


def _balanced_labels(rng: np.random.Generator, size: int, classes: int) -> np.ndarray:
    y = np.arange(size) % classes
    rng.shuffle(y)
    return y


def _patterns() -> np.ndarray:
    """Ten 6x6 stroke templates, one per class."""
    p = np.zeros((10, 6, 6))
    p[0, 2:4, :] = 1  # horizontal bar
    p[1, :, 2:4] = 1  # vertical bar
    p[2, 2:4, :] = 1
    p[2, :, 2:4] = 1  # plus
    np.fill_diagonal(p[3], 1)
    p[3, 1:, :-1] += np.eye(5)  # diagonal
    p[4] = np.fliplr(p[3])  # anti-diagonal
    p[5, :, :2] = 1
    p[5, 4:, :] = 1  # L corner
    p[6, 0, :] = 1
    p[6, -1, :] = 1
    p[6, :, 0] = 1
    p[6, :, -1] = 1  # hollow square
    yy, xx = np.mgrid[:6, :6]
    p[7] = ((yy - 2.5) ** 2 + (xx - 2.5) ** 2 < 4.5).astype(float)  # disc
    p[8, ::2, :] = 1  # stripes
    p[9] = ((yy + xx) % 3 == 0).astype(float)  # diagonal lattice
    return np.clip(p, 0, 1)


def _shapes8x8(rng, size, classes, dims, noise=0.45):
    if classes > 10:
        raise ValueError("shapes8x8 supports at most 10 classes")
    templates = _patterns()[:classes]
    y = _balanced_labels(rng, size, classes)
    x = np.zeros((size, 1, 8, 8))
    offs = rng.integers(0, 3, size=(size, 2))
    amp = rng.uniform(0.6, 1.4, size=size)
    for n in range(size):
        oy, ox = offs[n]
        x[n, 0, oy : oy + 6, ox : ox + 6] = amp[n] * templates[y[n]]
    x += rng.normal(0.0, noise, size=x.shape)
    return x, y


def gen_dataset(kind: str, seed: int, size: int, classes: int, dims: int = 2, split: str = "train", **kw) -> Dataset:
    """Generate a deterministic synthetic dataset.

    Train and test splits drawn with the same ``seed`` share class structure
    (blob centres, spiral lift) but not samples: the sample stream is seeded
    separately per split.
    """
    if size < classes:
        raise ValueError(f"size ({size}) must be at least the class count ({classes})")
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    structure = np.random.default_rng([seed, 0])
    samples = np.random.default_rng([seed, 1 if split == "train" else 2])
    if kind == "blobs":
        x, y = _blobs_split(structure, samples, size, classes, dims, kw.get("spread", 4.0))
    elif kind == "spiral":
        x, y = _spiral_split(structure, samples, size, classes, dims)
    else:
        x, y = _shapes8x8(samples, size, classes, dims, kw.get("noise", 0.45))
    prov = {"kind": kind, "seed": seed, "size": size, "classes": classes, "dims": dims, **kw}
    return Dataset(
        torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(y, dtype=torch.int64), split, prov
    )


def _blobs_split(structure, samples, size, classes, dims, spread):
    centers = structure.normal(0.0, spread, size=(classes, dims))
    y = _balanced_labels(samples, size, classes)
    x = centers[y] + samples.normal(0.0, 1.0, size=(size, dims))
    return x, y


def _spiral_split(structure, samples, size, classes, dims):
    lift = structure.normal(0.0, 1.0, size=(2, max(dims, 2)))
    y = _balanced_labels(samples, size, classes)
    t = samples.uniform(0.15, 1.0, size=size)
    angle = 2.5 * np.pi * t + 2 * np.pi * y / classes
    pts = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
    pts += samples.normal(0.0, 0.03, size=pts.shape)
    if dims > 2:
        pts = pts @ lift
    return pts[:, :dims] * 3.0, y


def train_test(kind: str, seed: int, train_size: int, test_size: int, classes: int, dims: int = 2, **kw):
    return (
        gen_dataset(kind, seed, train_size, classes, dims, split="train", **kw),
        gen_dataset(kind, seed, test_size, classes, dims, split="test", **kw),
    )


def as_tokens(ds: Dataset) -> Dataset:
    """View 1x8x8 images as 8 tokens of 8 features (rows) for attention models."""
    x = ds.x
    if x.dim() == 4:
        x = x[:, 0]
    return Dataset(x, ds.y, ds.split, dict(ds.provenance, view="tokens"))
