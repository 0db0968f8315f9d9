"""Timeline domain types: videos, segments, annotations, features, detections.

All times are seconds on the actual video timeline. A :class:`Segment` is
stored as ``(center, width)`` where ``width`` is the *half*-length, so
``start = center - width`` and ``end = center + width``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

MIN_CLIP_LENGTH = 1e-4


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    fps: float
    stride: int
    num_features: int
    channels: int
    duration_sec: float

    def __post_init__(self):
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise ValueError(f"{self.video_id}: fps must be > 0, got {self.fps}")
        for name in ("stride", "num_features", "channels"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{self.video_id}: {name} must be a positive integer, got {value}")
        if not self.duration_sec > 0:
            raise ValueError(f"{self.video_id}: duration_sec must be > 0")
        covered = (self.num_features - 1) * self.stride / self.fps
        if self.duration_sec < covered - 1e-9:
            raise ValueError(
                f"{self.video_id}: duration_sec {self.duration_sec} shorter than feature span {covered}"
            )

    @property
    def snippet_sec(self) -> float:
        """Seconds covered by one level-1 feature step."""
        return self.stride / self.fps


@dataclass(frozen=True)
class Segment:
    """Interval on the video timeline; ``width`` is the half-length."""

    center: float
    width: float

    def __post_init__(self):
        if not (math.isfinite(self.center) and math.isfinite(self.width)):
            raise ValueError(f"non-finite segment ({self.center}, {self.width})")
        if not self.width > 0:
            raise ValueError(f"segment half-width must be > 0, got {self.width}")

    @classmethod
    def from_start_end(cls, start: float, end: float) -> "Segment":
        if not end > start:
            raise ValueError(f"segment end {end} must exceed start {start}")
        return cls(center=0.5 * (start + end), width=0.5 * (end - start))

    @property
    def start(self) -> float:
        return self.center - self.width

    @property
    def end(self) -> float:
        return self.center + self.width

    @property
    def length(self) -> float:
        return 2.0 * self.width

    def start_end(self) -> tuple[float, float]:
        return self.start, self.end


@dataclass(frozen=True)
class ActionInstance:
    start: float
    end: float
    label: int

    def __post_init__(self):
        if not (self.start >= 0 and self.end > self.start):
            raise ValueError(f"invalid action instance [{self.start}, {self.end}]")

    @property
    def segment(self) -> Segment:
        return Segment.from_start_end(self.start, self.end)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    meta: VideoMeta
    values: np.ndarray

    def __post_init__(self):
        shape = (self.meta.num_features, self.meta.channels)
        if self.values.shape != shape:
            raise ValueError(
                f"{self.meta.video_id}: feature matrix shape {self.values.shape} != {shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.meta.video_id}: non-finite feature values")


@dataclass(frozen=True)
class Detection:
    segment: Segment
    label: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass
class DetectionSet:
    video_id: str
    items: List[Detection] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def to_records(self) -> list[dict]:
        return [
            {"start": d.segment.start, "end": d.segment.end, "label": d.label, "score": d.score}
            for d in self.items
        ]

    @classmethod
    def from_records(cls, video_id: str, records: list[dict]) -> "DetectionSet":
        return cls(
            video_id,
            [
                Detection(Segment.from_start_end(r["start"], r["end"]), int(r["label"]), float(r["score"]))
                for r in records
            ],
        )


def interval_iou(s1: float, e1: float, s2: float, e2: float) -> float:
    inter = min(e1, e2) - max(s1, s2)
    if inter <= 0:
        return 0.0
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


def segment_iou(a: Segment, b: Segment) -> float:
    return interval_iou(a.start, a.end, b.start, b.end)


def clip_to_video(seg: Segment, meta: VideoMeta, min_length: Optional[float] = None) -> Segment:
    """Clamp a segment into ``[0, duration]``.

    If clamping collapses the interval, a ``min_length`` interval is kept
    against the clamp point (inside the video).
    """
    min_length = MIN_CLIP_LENGTH if min_length is None else min_length
    duration = meta.duration_sec
    start = min(max(seg.start, 0.0), duration)
    end = min(max(seg.end, 0.0), duration)
    if end - start >= min_length:
        return Segment.from_start_end(start, end)
    if end >= duration:
        return Segment.from_start_end(duration - min_length, duration)
    if start <= 0.0:
        return Segment.from_start_end(0.0, min_length)
    mid = 0.5 * (start + end)
    return Segment(mid, 0.5 * min_length)
