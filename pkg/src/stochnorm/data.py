"""Desk-scale synthetic image datasets and augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    classes: int

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])


def _smooth_field(rng: np.random.Generator, shape: tuple[int, ...], width: float) -> np.ndarray:
    """Unit-variance Gaussian random field blurred over the last two axes."""
    noise = rng.standard_normal(shape)
    sigma = (0,) * (len(shape) - 2) + (width, width)
    field = ndimage.gaussian_filter(noise, sigma=sigma, mode="wrap")
    return field / field.std(axis=(-2, -1), keepdims=True)


def make_dataset(
    kind: str = "gaussian-clusters-images",
    n_train: int = 512,
    val_fraction: float = 0.1,
    classes: int = 10,
    size: int = 8,
    channels: int = 1,
    noise: float = 1.0,
    label_noise: float = 0.1,
    correlation: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Generate a labelled image set and split it into disjoint train/val parts.

    ``gaussian-clusters-images``: each class has a smooth random prototype and
    samples add i.i.d. pixel noise of std ``noise``. ``correlated-spatial``:
    the per-sample noise is a smooth field of width ``correlation``, so pixels
    of one image are strongly correlated. A ``label_noise`` fraction of labels
    is replaced by uniformly random classes.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n_total = int(round(n_train / (1 - val_fraction)))
    prototypes = _smooth_field(rng, (classes, channels, size, size), 1.0)
    labels = rng.integers(0, classes, n_total)
    if kind == "gaussian-clusters-images":
        pixel_noise = rng.standard_normal((n_total, channels, size, size))
    elif kind == "correlated-spatial":
        pixel_noise = _smooth_field(rng, (n_total, channels, size, size), correlation)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    x = prototypes[labels] + noise * pixel_noise
    flip = rng.random(n_total) < label_noise
    labels = np.where(flip, rng.integers(0, classes, n_total), labels)
    perm = rng.permutation(n_total)
    tr, va = perm[:n_train], perm[n_train:]
    return Dataset(x[tr], labels[tr], x[va], labels[va], classes)


def correlated_images(
    n: int, size: int, rng: np.random.Generator, correlation: float = 0.9, channels: int = 1
) -> np.ndarray:
    """Standard-normal images where every pixel shares a per-image component.

    Each pixel is ``sqrt(rho) * a + sqrt(1 - rho) * e`` with a per-image ``a``,
    so pixels have unit variance and pairwise correlation ``rho``.
    """
    shared = rng.standard_normal((n, channels, 1, 1))
    own = rng.standard_normal((n, channels, size, size))
    return np.sqrt(correlation) * shared + np.sqrt(1 - correlation) * own


def augment(x: np.ndarray, rng: np.random.Generator, shift: int = 2, flip: bool = True) -> np.ndarray:
    """Random translations of up to ``shift`` pixels (zero padded) and horizontal flips."""
    k, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (shift, shift), (shift, shift)))
    dy = rng.integers(0, 2 * shift + 1, k)
    dx = rng.integers(0, 2 * shift + 1, k)
    out = np.empty_like(x)
    for i in range(k):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    if flip:
        mask = rng.random(k) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    return out
