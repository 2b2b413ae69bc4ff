"""Datasets: CIFAR-10 binary batches and a deterministic synthetic task."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD = 3073
CIFAR_HW = 32


@dataclass
class Dataset:
    images: np.ndarray  # [n, h, w, c] float64 in [0, 1]
    labels: np.ndarray  # [n] int
    split: str = "train"
    provenance: str = ""
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be [n, h, w, c] with one label each")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.provenance, self.num_classes)


class CifarFormatError(ValueError):
    pass


def parse_cifar10(buf: bytes, source: str = "<bytes>") -> Dataset:
    if len(buf) == 0 or len(buf) % RECORD:
        raise CifarFormatError(f"{source}: size {len(buf)} is not a positive multiple of {RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise CifarFormatError(f"{source}: label {labels.max()} outside 0-9")
    # planes R, G, B each row-major 32x32 -> [n, 32, 32, 3]
    images = raw[:, 1:].reshape(-1, 3, CIFAR_HW, CIFAR_HW).transpose(0, 2, 3, 1) / 255.0
    return Dataset(images, labels, split="test" if "test" in source else "train", provenance=source)


def load_cifar10(path) -> Dataset:
    """Load one binary batch file, or every ``*.bin`` batch in a directory."""
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise CifarFormatError(f"{path}: no .bin batches found")
    parts = [parse_cifar10(f.read_bytes(), str(f)) for f in files]
    if len(parts) == 1:
        return parts[0]
    return Dataset(
        np.concatenate([d.images for d in parts]),
        np.concatenate([d.labels for d in parts]),
        parts[0].split,
        str(path),
    )


def cifar10_bytes(images_u8: np.ndarray, labels) -> bytes:
    """Encode ``[n, 32, 32, 3]`` uint8 images in the CIFAR-10 record layout."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    planes = images_u8.transpose(0, 3, 1, 2).reshape(len(labels), -1)
    return np.concatenate([labels[:, None], planes], axis=1).tobytes()


def save_cifar10(dataset: Dataset, path) -> None:
    u8 = np.rint(dataset.images * 255.0).astype(np.uint8)
    Path(path).write_bytes(cifar10_bytes(u8, dataset.labels))


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 1000
    h: int = 16
    w: int = 16
    c: int = 3
    classes: int = 4
    noise: float = 0.08
    amplitude: float = 0.275
    phase_jitter: float = 0.6


_SPLIT_TAG = {"train": 1, "test": 2}


def make_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0, split: str = "train") -> Dataset:
    """Oriented-grating classification task.

    Class ``k`` is a sinusoidal grating at orientation ``k * pi / classes``
    with a class colour tint; phase, frequency and contrast are jittered
    around class values, on a noisy grey background.  The label is carried by the
    whole image, so a handful of pixels cannot remove it, yet an
    undefended network stays easy to fool.  Train and test draw from
    disjoint seed streams.
    """
    if split not in _SPLIT_TAG:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    rng = np.random.default_rng([int(seed), _SPLIT_TAG[split]])
    palette = np.random.default_rng([int(seed), 0]).uniform(0.4, 1.0, size=(spec.classes, spec.c))
    labels = np.arange(spec.n) % spec.classes
    labels = labels[rng.permutation(spec.n)]
    yy, xx = np.mgrid[0 : spec.h, 0 : spec.w].astype(np.float64)
    theta = labels * np.pi / spec.classes
    freq = rng.uniform(0.55, 0.8, size=spec.n)
    base_phase = np.random.default_rng([int(seed), 0, 1]).uniform(0.0, 2 * np.pi, size=spec.classes)
    phase = base_phase[labels] + rng.uniform(-spec.phase_jitter, spec.phase_jitter, size=spec.n)
    contrast = rng.uniform(0.7, 1.0, size=spec.n)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    wave = np.sin(freq[:, None, None] * proj + phase[:, None, None]) * contrast[:, None, None]
    tint = palette[labels][:, None, None, :]
    img = 0.5 + spec.amplitude * wave[..., None] * tint
    img = img + spec.noise * rng.standard_normal(img.shape)
    return Dataset(
        np.clip(img, 0.0, 1.0),
        labels,
        split,
        provenance=f"synthetic:{spec}:seed={seed}",
        num_classes=spec.classes,
    )
