"""Distillation objectives.

Teacher-side inputs are always treated as constants: only their ``.data``
is read, so no gradient can reach teacher parameters.

All losses accept a single utterance ``(T, D)`` or a batch ``(B, T, D)``
and sum over frames and batch.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from ctcd.ctc import Labels, beam_nbest
from ctcd.errors import ConfigError, UsageError
from ctcd.numcore import (
    DenseArray,
    add,
    log_softmax,
    mean,
    mul,
    relu,
    scale,
    softmax,
    softmax_np,
    sum_,
)
from ctcd.numcore.autodiff import _sigmoid_np

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class LayerPair:
    teacher_layer: int = -1
    student_layer: int = -1


@dataclass
class DistillPlan:
    """Which teachers feed which stage, and the loss weights."""

    skd_teacher: str | None = None
    rkd_teacher: str | None = None
    layer_pairs: list[LayerPair] = field(default_factory=lambda: [LayerPair()])
    lambda_skd: float = 0.25
    tau: float = 1.0
    guided_weight: float = 0.5
    nbest_n: int = 5
    beam_width: int = 8
    frame_weighting: bool = True
    adapter_width: int = 3

    def __post_init__(self):
        if self.lambda_skd < 0:
            raise ConfigError("lambda_skd must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.guided_weight < 0:
            raise ConfigError("guided_weight must be >= 0")
        if self.nbest_n < 1 or self.beam_width < self.nbest_n:
            raise ConfigError("need beam_width >= nbest_n >= 1")
        if self.adapter_width < 1 or self.adapter_width % 2 == 0:
            raise ConfigError("adapter_width must be a positive odd number")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, DenseArray) else np.asarray(x, dtype=np.float64)


def frame_weight_mask(w_tea) -> np.ndarray:
    """sigmoid of each frame's mean activation, repeated across the hidden axis."""
    w = _data(w_tea)
    if w.ndim < 2 or w.shape[-1] < 1 or w.shape[-2] < 1:
        raise ConfigError(f"teacher representation must be (..., T>=1, D>=1), got {w.shape}")
    row = _sigmoid_np(w.mean(axis=-1, keepdims=True))
    return np.repeat(row, w.shape[-1], axis=-1)


def rkd_loss(
    w_tea,
    w_stu: DenseArray,
    adapter: Callable[[DenseArray], DenseArray],
    frame_weighting: bool = True,
) -> DenseArray:
    """Squared distance between the teacher representation and the adapted
    student representation, weighted per frame by ``frame_weight_mask``."""
    target = _data(w_tea)
    if target.shape[-2] != w_stu.shape[-2] or target.ndim != w_stu.ndim:
        raise ConfigError(f"time/batch mismatch: teacher {target.shape} vs student {w_stu.shape}")
    projected = adapter(w_stu)
    if projected.shape != target.shape:
        raise ConfigError(f"adapter output {projected.shape} does not match teacher {target.shape}")
    diff = add(projected, -target)
    if frame_weighting:
        diff = mul(diff, frame_weight_mask(target))
    return sum_(mul(diff, diff))


def skd_loss(f_tea, f_stu: DenseArray, tau: float = 1.0) -> DenseArray:
    if tau <= 0:
        raise ConfigError("tau must be > 0")
    t_logits = _data(f_tea)
    if t_logits.shape != f_stu.shape:
        raise ConfigError(f"logit shapes differ: {t_logits.shape} vs {f_stu.shape}")
    p_tea = softmax_np(t_logits / tau, axis=-1)
    p_stu = softmax(scale(f_stu, 1.0 / tau), axis=-1)
    diff = add(p_stu, -p_tea)
    return sum_(mul(diff, diff))


def combined_loss(ctc: DenseArray, skd: DenseArray, lambda_skd: float) -> DenseArray:
    if lambda_skd < 0:
        raise ConfigError("lambda_skd must be >= 0")
    return add(ctc, scale(skd, lambda_skd))


def floored_log_softmax(f: DenseArray) -> DenseArray:
    """ln(max(softmax(f), 1e-12)), written as floor + relu(log p - floor)."""
    return add(relu(add(log_softmax(f, axis=-1), -LOG_FLOOR)), LOG_FLOOR)


def frame_kd_loss(p_tea, f_stu: DenseArray) -> DenseArray:
    """Frame-level cross-entropy against teacher posteriors (baseline)."""
    target = _data(p_tea)
    if target.shape != f_stu.shape:
        raise ConfigError(f"shapes differ: {target.shape} vs {f_stu.shape}")
    return scale(sum_(mul(floored_log_softmax(f_stu), target)), -1.0)


def guided_mask(p_tea) -> np.ndarray:
    """One-hot of the per-frame argmax (ties to the lowest index)."""
    grid = _data(p_tea)
    mask = np.zeros_like(grid)
    np.put_along_axis(mask, np.argmax(grid, axis=-1)[..., None], 1.0, axis=-1)
    return mask


def guided_loss(mask, f_stu: DenseArray, guided_weight: float) -> DenseArray:
    """``guided_weight`` times the frame-averaged NLL of the teacher's argmax
    labels, summed over utterances."""
    m = _data(mask)
    if m.shape != f_stu.shape:
        raise ConfigError(f"shapes differ: {m.shape} vs {f_stu.shape}")
    per_frame = sum_(mul(floored_log_softmax(f_stu), m), axis=-1)
    per_utt = mean(per_frame, axis=-1)
    return scale(sum_(per_utt), -guided_weight)


def seq_kd_targets(teacher_grid, n: int = 5, beam_width: int = 8) -> list[tuple[Labels, float]]:
    """Teacher n-best with weights renormalized over the returned hypotheses."""
    if n < 1:
        raise UsageError("n must be >= 1")
    hyps = beam_nbest(_data(teacher_grid), beam_width=max(beam_width, n), n=n)
    scores = np.array([lp for _, lp in hyps])
    weights = softmax_np(scores) if len(scores) else scores
    return [(h, float(w)) for (h, _), w in zip(hyps, weights)]
