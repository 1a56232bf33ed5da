"""Multi-stage registration by per-stage variational optimization.

Each stage estimates an incremental field with Adam, starting from zero.  The
field is parameterized as a Gaussian-smoothed latent grid (``smoothing``
voxels); Adam updates the latent values elementwise and the chain rule carries
the gradient back through the (self-adjoint) smoothing.  Without it the
per-element step normalization of Adam injects voxel-scale noise that the
bending energy then fights.  ``smoothing=0`` optimizes the field directly.

Three modes are supported:

``abn``
    The incremental field is composed into the running combined field and
    the *source* is warped once with the result, so the output has been
    interpolated exactly once no matter how many stages ran.
``crn``
    The previous stage's warped image is warped again by the incremental
    field.  This is the repeated-interpolation control; the combined field
    is still tracked for the regularizer and for reporting.
``single``
    One stage; identical to the other two modes at ``stages=1``.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .energy import LossConfig, LossValue, stage_objective, total_loss
from .errors import DimensionError, DivergenceError, ParameterError
from .grid import DeformationField, Image, StageTrace, zero_field
from .sampler import compose_fields, warp_image

__all__ = [
    "AdamConfig", "AdamState", "PipelineConfig", "RegistrationResult",
    "adam_step", "estimate_incremental_field", "run_pipeline", "blur_stress",
]

log = logging.getLogger(__name__)

MODES = ("abn", "crn", "single")


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be > 0")


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0)


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "abn"
    stages: Optional[int] = None
    inner_iters: int = 100
    smoothing: float = 3.0
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        stages = self.stages
        if stages is None:
            stages = 1 if self.mode == "single" else 10
        if self.mode == "single" and stages != 1:
            raise ParameterError("single mode runs exactly one stage")
        if stages < 1:
            raise ParameterError("stages must be >= 1")
        if self.inner_iters < 1:
            raise ParameterError("inner_iters must be >= 1")
        if not self.smoothing >= 0:
            raise ParameterError("smoothing must be >= 0")
        object.__setattr__(self, "stages", int(stages))


@dataclass(frozen=True)
class RegistrationResult:
    final_warped: Image
    final_field: DeformationField
    traces: tuple
    loss_history: tuple
    final_loss: LossValue


def adam_step(params, grad, state, cfg):
    """One bias-corrected Adam update; returns ``(params, state)``.

    ``params`` and ``grad`` may be arrays or :class:`DeformationField`; the
    updated parameters keep the type of ``params``.
    """
    p = np.asarray(getattr(params, "data", params), dtype=np.float64)
    g = np.asarray(getattr(grad, "data", grad), dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise DimensionError(f"Adam shapes differ: {p.shape}, {g.shape}, {state.m.shape}")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (g * g)
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    p = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    new_state = AdamState(m, v, t)
    if isinstance(params, DeformationField):
        return DeformationField(p), new_state
    return p, new_state


def _smooth(channels, sigma):
    if sigma == 0:
        return channels
    return np.stack([gaussian_filter(c, sigma, mode="constant", truncate=3.0)
                     for c in channels])


def _optimize_stage(moving, target, prev, cfg, through_composition, stage=1):
    """Run ``inner_iters`` Adam steps; return the best iterate and the loss trace.

    Arrays are float64; fields are channel-first.  The best iterate (lowest
    stage loss, the zero start included) is returned, so a stage can never
    make its own objective worse.
    """
    lam = cfg.loss.lam
    latent = np.zeros_like(prev)
    state = AdamState.fresh(latent.shape)
    history = []
    best_total, best_inc = None, latent
    for it in range(cfg.inner_iters + 1):
        inc = _smooth(latent, cfg.smoothing)
        sim, reg, grad = stage_objective(moving, target, prev, inc, cfg.loss,
                                         through_composition=through_composition)
        total = sim + lam * reg
        if not np.isfinite(total) or not np.all(np.isfinite(grad)):
            raise DivergenceError(stage, it, total)
        history.append(total)
        if best_total is None or total < best_total:
            best_total, best_inc = total, inc
        if it == cfg.inner_iters:
            break
        latent, state = adam_step(latent, _smooth(grad, cfg.smoothing), state, cfg.optimizer)
    return best_inc, tuple(history)


def _as_array(img):
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def estimate_incremental_field(source_ctx, target, prev_combined, cfg, stage=1):
    """Incremental field for one stage.

    In ``abn``/``single`` mode ``source_ctx`` is the raw source and the loss
    is taken through the composition with ``prev_combined``; in ``crn`` mode
    it is the previous warped image, warped directly by the increment.
    """
    dims = tuple(target.dims)
    if tuple(source_ctx.dims) != dims or tuple(prev_combined.dims) != dims:
        raise DimensionError("source, target and field extents differ")
    inc, _ = _optimize_stage(_as_array(source_ctx), _as_array(target), prev_combined.channels(),
                             cfg, cfg.mode != "crn", stage)
    return DeformationField.from_channels(inc)


def run_pipeline(source, target, cfg):
    """Register ``source`` to ``target`` with ``cfg.stages`` stages."""
    if tuple(source.dims) != tuple(target.dims):
        raise DimensionError(f"source {source.dims} and target {target.dims} differ")
    tgt = _as_array(target)
    combined = zero_field(source.dims)
    warped = source
    traces, history = [], []
    compose_path = cfg.mode != "crn"
    for k in range(1, cfg.stages + 1):
        moving = source if compose_path else warped
        inc_ch, stage_hist = _optimize_stage(_as_array(moving), tgt, combined.channels(),
                                             cfg, compose_path, k)
        inc = DeformationField.from_channels(inc_ch)
        combined = compose_fields(combined, inc)
        warped = warp_image(source, combined) if compose_path else warp_image(warped, inc)
        stage_loss = total_loss(warped, target, [combined], cfg.loss)
        traces.append(StageTrace(k, inc, combined, warped, stage_loss.similarity,
                                 stage_loss.regularizer, stage_hist))
        history.extend(stage_hist)
        log.debug("stage %d: sim=%.6g reg=%.6g", k, stage_loss.similarity, stage_loss.regularizer)
    final = total_loss(warped, target, [t.combined_field for t in traces], cfg.loss)
    return RegistrationResult(warped, combined, tuple(traces), tuple(history), final)


def blur_stress(image, field_pairs, mode):
    """Apply ``K`` (field, approximate inverse) pairs without any optimization.

    ``crn`` warps ``2K`` times in sequence; ``abn`` composes the ``2K`` fields
    and warps the original image once.
    """
    if mode not in ("abn", "crn"):
        raise ParameterError("mode must be 'abn' or 'crn'")
    fields = [f for pair in field_pairs for f in pair]
    for f in fields:
        if tuple(f.dims) != tuple(image.dims):
            raise DimensionError("field extents differ from the image")
    if not fields:
        return image
    if mode == "crn":
        out = image
        for f in fields:
            out = warp_image(out, f)
        return out
    combined = fields[0]
    for f in fields[1:]:
        combined = compose_fields(combined, f)
    return warp_image(image, combined)
