"""Accuracy (SSIM, CC, Dice, Jaccard) and sharpness (SMD, Tenengrad) metrics.

Intensities are assumed to lie in [0, 1]; SSIM uses a dynamic range of 1.
Sharpness values are only meaningful relative to other images of the same
size and content.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DegenerateInputError, DimensionError

__all__ = [
    "MetricsReport", "ssim", "cc", "dice_jaccard", "smd", "tenengrad",
    "crop", "evaluate",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricsReport:
    ssim: Optional[float] = None
    cc: Optional[float] = None
    dice: Optional[float] = None
    jaccard: Optional[float] = None
    smd: Optional[float] = None
    tenengrad: Optional[float] = None

    def to_dict(self):
        return asdict(self)


def _pair(a, b):
    x = np.asarray(getattr(a, "data", a), dtype=np.float64)
    y = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"extents differ: {x.shape} vs {y.shape}")
    return x, y


def _gaussian_taps(size, sigma):
    r = size // 2
    k = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def ssim(a, b, data_range=1.0):
    """Mean structural similarity over all fully-contained Gaussian windows.

    The window is 11 taps (sigma 1.5) per axis; on an axis shorter than 11 it
    shrinks to the largest odd size that fits.
    """
    x, y = _pair(a, b)
    sizes = [min(SSIM_WINDOW, n if n % 2 else n - 1) for n in x.shape]

    def filt(img):
        out = img
        for axis, size in enumerate(sizes):
            out = correlate1d(out, _gaussian_taps(size, SSIM_SIGMA), axis=axis, mode="constant")
        return out[tuple(slice(s // 2, n - s // 2) for s, n in zip(sizes, x.shape))]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def cc(a, b):
    """Pearson correlation of all voxel intensities."""
    x, y = _pair(a, b)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.sum(dx * dx)
    syy = np.sum(dy * dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation is undefined for a constant image")
    return float(np.sum(dx * dy) / np.sqrt(sxx * syy))


def dice_jaccard(a, b):
    """Mean Dice and Jaccard over nonzero labels present in either map."""
    x, y = _pair_labels(a, b)
    labels = np.union1d(np.unique(x), np.unique(y))
    labels = labels[labels != 0]
    if labels.size == 0:
        raise DegenerateInputError("no foreground labels to compare")
    dice, jac = [], []
    for lab in labels:
        ma = x == lab
        mb = y == lab
        inter = np.count_nonzero(ma & mb)
        na, nb = np.count_nonzero(ma), np.count_nonzero(mb)
        dice.append(2.0 * inter / (na + nb))
        jac.append(inter / (na + nb - inter))
    return float(np.mean(dice)), float(np.mean(jac))


def _pair_labels(a, b):
    x = np.asarray(getattr(a, "data", a))
    y = np.asarray(getattr(b, "data", b))
    if x.shape != y.shape:
        raise DimensionError(f"extents differ: {x.shape} vs {y.shape}")
    return x, y


def smd(img):
    """Sum modulus difference: absolute forward differences over all axes, per voxel."""
    x = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if any(n < 2 for n in x.shape):
        raise DimensionError("SMD needs every axis >= 2")
    total = sum(np.sum(np.abs(np.diff(x, axis=a))) for a in range(x.ndim))
    return float(total / x.size)


def tenengrad(img):
    """Mean squared Sobel gradient magnitude over interior voxels, no threshold."""
    x = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if any(n < 3 for n in x.shape):
        raise DimensionError("Tenengrad needs every axis >= 3")
    interior = tuple(slice(1, -1) for _ in x.shape)
    energy = np.zeros(tuple(n - 2 for n in x.shape))
    for a in range(x.ndim):
        g = correlate1d(x, [-1.0, 0.0, 1.0], axis=a, mode="nearest")
        for b in range(x.ndim):
            if b != a:
                g = correlate1d(g, [1.0, 2.0, 1.0], axis=b, mode="nearest")
        energy += g[interior] ** 2
    return float(np.mean(energy))


def crop(img, margin):
    """Drop ``margin`` voxels from each side of every axis."""
    x = np.asarray(getattr(img, "data", img))
    if margin <= 0:
        return x
    return x[tuple(slice(margin, n - margin) for n in x.shape)]


def evaluate(warped, target, warped_labels=None, target_labels=None, margin=2):
    """Metrics for one registration result.

    Accuracy metrics compare ``warped`` with ``target``; sharpness metrics are
    taken on ``warped`` with a border of ``margin`` voxels removed, since the
    zero boundary of the warp is not blur.  Undefined entries (e.g. CC of a
    constant image) are left as ``None``.
    """
    out = {"ssim": ssim(warped, target)}
    try:
        out["cc"] = cc(warped, target)
    except DegenerateInputError:
        out["cc"] = None
    if warped_labels is not None and target_labels is not None:
        out["dice"], out["jaccard"] = dice_jaccard(warped_labels, target_labels)
    inner = crop(warped, margin)
    out["smd"] = smd(inner)
    out["tenengrad"] = tenengrad(inner)
    return MetricsReport(**out)
