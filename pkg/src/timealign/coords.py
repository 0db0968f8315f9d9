"""Time-aligned coordinate expression and the normalized-sigmoid baseline.

Segments are decoded from reference points that live on the actual video
timeline (seconds).  Centers move by offsets scaled with the current width
and widths update multiplicatively, so a decode is equivariant to shifting
and rescaling the timeline.  The normalized baseline keeps ``(c, d)`` in
``(0, 1)`` through a logistic link and multiplies by the video duration.

The array-level helpers (``time_aligned_update``, ``normalized_update``,
``time_to_index``) accept Python floats, numpy arrays or torch tensors so
the model, the selection code and the tests share one implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .timeline import Segment, VideoMeta

try:  # torch is a hard dependency of the model, optional for pure coordinate use
    import torch
except ImportError:  # pragma: no cover
    torch = None


class GridMode(str, Enum):
    UNIT_CONSISTENT = "unit_consistent"
    PAPER_LITERAL = "paper_literal"


class CoordMode(str, Enum):
    TIME_ALIGNED = "time_aligned"
    NORMALIZED = "normalized"


def _is_tensor(x) -> bool:
    return torch is not None and isinstance(x, torch.Tensor)


def _exp(x):
    if _is_tensor(x):
        return torch.exp(x)
    if isinstance(x, np.ndarray):
        return np.exp(x)
    return math.exp(x)


def _log(x):
    if _is_tensor(x):
        return torch.log(x)
    if isinstance(x, np.ndarray):
        return np.log(x)
    return math.log(x)


def sigmoid(x):
    if _is_tensor(x):
        return torch.sigmoid(x)
    if isinstance(x, np.ndarray):
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def logit(p):
    return _log(p) - _log(1.0 - p)


@dataclass(frozen=True)
class OffsetPair:
    d_center: float
    d_logwidth: float

    def __post_init__(self):
        if not (math.isfinite(self.d_center) and math.isfinite(self.d_logwidth)):
            raise ValueError("offsets must be finite")


@dataclass(frozen=True, eq=False)
class ReferenceGrid:
    level: int
    centers: np.ndarray
    width: float
    base_scale: float
    mode: GridMode = GridMode.UNIT_CONSISTENT

    def __len__(self):
        return len(self.centers)


def level_length(num_features: int, level: int) -> int:
    """Temporal length of pyramid level ``level`` (1-based), ceil halving."""
    factor = 2 ** (level - 1)
    return -(-num_features // factor)


def level_step_sec(meta: VideoMeta, level: int) -> float:
    return meta.stride * 2 ** (level - 1) / meta.fps


def make_reference_grid(
    meta: VideoMeta,
    level: int,
    base_scale: float = 2.0,
    mode: GridMode | str = GridMode.UNIT_CONSISTENT,
    num_levels: int | None = None,
) -> ReferenceGrid:
    mode = GridMode(mode)
    if level < 1 or (num_levels is not None and level > num_levels):
        raise ValueError(f"level {level} out of range [1, {num_levels}]")
    if not base_scale > 0:
        raise ValueError(f"base_scale must be > 0, got {base_scale}")
    n = level_length(meta.num_features, level)
    t = np.arange(1, n + 1, dtype=np.float64)
    factor = 2 ** (level - 1)
    if mode is GridMode.UNIT_CONSISTENT:
        step = meta.stride * factor / meta.fps
        centers = (t - 0.5) * step
        width = base_scale * step
    else:
        # formula exactly as printed; kept for auditability only
        centers = t * meta.fps / (meta.stride * factor) + meta.stride * factor / 2.0
        width = base_scale * meta.fps * factor
    return ReferenceGrid(level, centers, float(width), float(base_scale), mode)


def time_to_index(time, meta_or_step, level: int = 1):
    """Fractional feature index of ``time`` at ``level``.

    Inverse of the unit-consistent grid: index ``i`` (0-based) has its
    snippet midpoint at ``(i + 0.5) * step``.  ``meta_or_step`` is either a
    :class:`VideoMeta` or the level-1 step in seconds.
    """
    step = meta_or_step.snippet_sec if isinstance(meta_or_step, VideoMeta) else meta_or_step
    return time / (step * 2 ** (level - 1)) - 0.5


def time_aligned_update(center, width, d_center, d_logwidth):
    """Shared decode/refine rule: ``c + dc * w`` and ``exp(ln w + dd)``.

    The width is evaluated as ``w * exp(dd)``, which is the same quantity and
    keeps zero offsets an exact fixed point.
    """
    return center + d_center * width, width * _exp(d_logwidth)


def time_aligned_encode(ref_center, ref_width, center, width):
    """Offsets that map the reference onto ``(center, width)``."""
    return (center - ref_center) / ref_width, _log(width) - _log(ref_width)


def normalized_update(c, d, d_center, d_logwidth):
    return sigmoid(logit(c) + d_center), sigmoid(logit(d) + d_logwidth)


def decode_time_aligned(ref_center: float, ref_width: float, off: OffsetPair) -> Segment:
    if not ref_width > 0:
        raise ValueError("reference width must be > 0")
    c, w = time_aligned_update(ref_center, ref_width, off.d_center, off.d_logwidth)
    return Segment(c, w)


def refine_time_aligned(prev: Segment, off: OffsetPair) -> Segment:
    c, w = time_aligned_update(prev.center, prev.width, off.d_center, off.d_logwidth)
    return Segment(c, w)


def decode_normalized_baseline(raw_center: float, raw_width: float, duration: float) -> Segment:
    """Legacy decode: ``start/end = (sigma(c) -/+ sigma(d)) * duration``.

    Degenerate (zero-width) limits cannot be represented as a Segment; use
    :func:`normalized_start_end` for those.
    """
    start, end = normalized_start_end(raw_center, raw_width, duration)
    return Segment.from_start_end(start, end)


def normalized_start_end(raw_center, raw_width, duration):
    if not duration > 0:
        raise ValueError("duration must be > 0")
    c, d = sigmoid(raw_center), sigmoid(raw_width)
    return (c - d) * duration, (c + d) * duration


def refine_normalized_baseline(prev_norm: tuple[float, float], off: OffsetPair) -> tuple[float, float]:
    c, d = prev_norm
    if not (0.0 < c < 1.0 and 0.0 < d < 1.0):
        raise ValueError(f"normalized coordinates must lie strictly inside (0, 1), got {prev_norm}")
    c2, d2 = normalized_update(c, d, off.d_center, off.d_logwidth)
    return float(c2), float(d2)
