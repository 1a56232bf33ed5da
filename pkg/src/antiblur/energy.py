"""Registration objective: image similarity plus bending-energy smoothness.

Similarity terms are normalized (MSE is a mean over voxels, NCC is a
correlation ratio).  :func:`bending_energy` is a plain sum over interior grid
points; inside the objective it is divided by the number of interior points
(``reg_norm="mean"``, the default) so that ``lam`` has the same meaning on any
grid size, or used as is (``reg_norm="sum"``).
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DegenerateInputError, DimensionError, ParameterError
from .grid import DeformationField
from .sampler import compose_channels, warp_array

__all__ = [
    "LossConfig", "LossValue", "mse", "ncc_loss", "bending_energy",
    "total_loss", "loss_gradient_wrt_field", "stage_objective",
]

NCC_EPS = 1e-10
SIMILARITIES = ("mse", "ncc_global", "ncc_windowed")


@dataclass(frozen=True)
class LossConfig:
    similarity: str = "mse"
    lam: float = 10.0
    window: int = 9
    reg_norm: str = "mean"

    def __post_init__(self):
        if self.similarity not in SIMILARITIES:
            raise ParameterError(f"similarity must be one of {SIMILARITIES}")
        if not self.lam >= 0:
            raise ParameterError("lam must be >= 0")
        if self.similarity == "ncc_windowed" and (self.window < 3 or self.window % 2 == 0):
            raise ParameterError("NCC window must be odd and >= 3")
        if self.reg_norm not in ("mean", "sum"):
            raise ParameterError("reg_norm must be 'mean' or 'sum'")

    def reg_scale(self, dims):
        """Factor turning a summed bending energy into the objective's term."""
        if self.reg_norm == "sum":
            return 1.0
        return 1.0 / float(np.prod([d - 2 for d in dims]))


@dataclass(frozen=True)
class LossValue:
    similarity: float
    regularizer: float
    total: float


def _arrays(a, b):
    x = np.asarray(getattr(a, "data", a), dtype=np.float64)
    y = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"image extents differ: {x.shape} vs {y.shape}")
    return x, y


def _mse(a, b, grad=False):
    diff = a - b
    val = float(np.mean(diff * diff))
    if grad:
        return val, diff * (2.0 / diff.size)
    return val


def _ncc_global(a, b, grad=False):
    da = a - a.mean()
    db = b - b.mean()
    cross = np.sum(da * db)
    va = np.sum(da * da)
    vb = np.sum(db * db)
    if va == 0.0 or vb == 0.0:
        raise DegenerateInputError("global NCC is undefined for a constant image")
    denom = va * vb + NCC_EPS
    val = float(1.0 - cross * cross / denom)
    if not grad:
        return val
    g = -(2.0 * cross / denom) * db + (2.0 * cross * cross * vb / denom ** 2) * da
    return val, g


def _ncc_windowed(a, b, window, grad=False):
    n = float(window ** a.ndim)

    def box(x):
        return uniform_filter(x, size=window, mode="constant") * n

    sa, sb = box(a), box(b)
    cross = box(a * b) - sa * sb / n
    va = box(a * a) - sa * sa / n
    vb = box(b * b) - sb * sb / n
    denom = va * vb + NCC_EPS
    cc = cross * cross / denom
    val = float(1.0 - np.mean(cc))
    if not grad:
        return val
    coef_b = 2.0 * cross / denom
    coef_a = 2.0 * cross * cross * vb / denom ** 2
    g = (box(coef_b) * b - box(coef_b * sb / n)
         - box(coef_a) * a + box(coef_a * sa / n))
    return val, g * (-1.0 / a.size)


def _similarity(warped, target, cfg, grad=False):
    if cfg.similarity == "mse":
        return _mse(warped, target, grad)
    if cfg.similarity == "ncc_global":
        return _ncc_global(warped, target, grad)
    return _ncc_windowed(warped, target, cfg.window, grad)


def mse(a, b):
    """Mean squared intensity difference."""
    return _mse(*_arrays(a, b))


def ncc_loss(a, b, cfg=None):
    """One minus squared normalized cross-correlation, in ``[0, 1]``.

    Global mode correlates the whole images.  Windowed mode averages the same
    statistic over ``cfg.window``-wide cubes centred on every voxel, with
    zero padding; windows where either image is flat score 0, so the loss of
    an image against itself is the fraction of flat windows.
    """
    cfg = cfg or LossConfig(similarity="ncc_global")
    x, y = _arrays(a, b)
    if cfg.similarity == "ncc_windowed":
        return _ncc_windowed(x, y, cfg.window)
    return _ncc_global(x, y)


def _interior(ndim, shift=None):
    shift = shift or {}
    return (slice(None),) + tuple(
        slice(1 + shift.get(a, 0), -1 + shift.get(a, 0) or None) for a in range(ndim))


def _bending(ch, grad=False):
    """Bending energy of a channel-first field ``(ndim, *dims)``."""
    ndim = ch.ndim - 1
    if any(d < 3 for d in ch.shape[1:]):
        raise DimensionError("bending energy needs every axis >= 3")
    centre = _interior(ndim)
    total = 0.0
    g = np.zeros_like(ch) if grad else None
    for a in range(ndim):
        up, down = _interior(ndim, {a: 1}), _interior(ndim, {a: -1})
        pure = ch[up] - 2.0 * ch[centre] + ch[down]
        total += np.sum(pure * pure)
        if grad:
            g[up] += 2.0 * pure
            g[centre] -= 4.0 * pure
            g[down] += 2.0 * pure
    for a in range(ndim):
        for b in range(a + 1, ndim):
            pp = _interior(ndim, {a: 1, b: 1})
            pm = _interior(ndim, {a: 1, b: -1})
            mp = _interior(ndim, {a: -1, b: 1})
            mm = _interior(ndim, {a: -1, b: -1})
            mixed = 0.25 * (ch[pp] - ch[pm] - ch[mp] + ch[mm])
            total += 2.0 * np.sum(mixed * mixed)
            if grad:
                g[pp] += mixed
                g[pm] -= mixed
                g[mp] -= mixed
                g[mm] += mixed
    if grad:
        return float(total), g
    return float(total)


def bending_energy(field):
    """Sum of squared second differences (pure plus twice the mixed ones).

    Only interior points whose whole 3x3(x3) stencil lies on the grid
    contribute.  Vanishes exactly on affine fields.
    """
    return _bending(field.channels())


def total_loss(warped, target, combined_fields, cfg):
    """``similarity(warped, target) + lam * sum_k R(field_k)``.

    ``R`` is the bending energy, averaged over interior points unless
    ``cfg.reg_norm == "sum"``.
    """
    x, y = _arrays(warped, target)
    sim = _similarity(x, y, cfg)
    reg = 0.0
    for fld in combined_fields:
        if fld.dims != x.shape:
            raise DimensionError("field extents differ from the image")
        reg += bending_energy(fld) * cfg.reg_scale(fld.dims)
    return LossValue(sim, reg, sim + cfg.lam * reg)


def stage_objective(moving, target, prev, inc, cfg, through_composition=True):
    """Loss and gradient of one stage with respect to the incremental field.

    Arrays are channel-first.  With ``through_composition`` the similarity is
    measured on ``warp(moving, compose(prev, inc))`` (the anti-blur path, where
    ``moving`` is the raw source).  Otherwise it is measured on
    ``warp(moving, inc)`` where ``moving`` is the previous warped image.  The
    regularizer always acts on the combined field.

    Returns ``(similarity, regularizer, gradient)``.
    """
    combined, jac = compose_channels(prev, inc, gradient=True)
    warp_field = combined if through_composition else inc
    warped, dwarp = warp_array(moving, warp_field, gradient=True)
    sim, gsim = _similarity(warped, target, cfg, grad=True)
    g_sim = gsim * dwarp
    scale = cfg.reg_scale(combined.shape[1:])
    if cfg.lam > 0:
        reg, g_reg = _bending(combined, grad=True)
        g_reg *= cfg.lam * scale
    else:
        reg, g_reg = _bending(combined), np.zeros_like(combined)
    reg *= scale
    if through_composition:
        g_comb = g_sim + g_reg
        grad = g_comb + np.einsum("cb...,c...->b...", jac, g_comb)
    else:
        grad = g_sim + g_reg + np.einsum("cb...,c...->b...", jac, g_reg)
    return sim, reg, grad


def loss_gradient_wrt_field(src, target, prev_combined, inc, cfg):
    """Gradient of the stage loss with respect to ``inc``.

    The stage loss is ``similarity(warp(src, compose(prev, inc)), target) +
    lam * R(compose(prev, inc))`` with ``R`` the (normalized) bending energy.
    """
    x, y = _arrays(src, target)
    if prev_combined.dims != x.shape or inc.dims != x.shape:
        raise DimensionError("field extents differ from the image")
    _, _, grad = stage_objective(x, y, prev_combined.channels(), inc.channels(), cfg)
    return DeformationField.from_channels(grad)
