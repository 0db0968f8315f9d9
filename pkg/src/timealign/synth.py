"""Deterministic synthetic video features with ground-truth action intervals.

Each video is background Gaussian noise plus, over every action instance,
a fixed per-class signature vector modulated by a triangular envelope that
peaks at the instance center.  Video durations are log-uniform so the set
spans a wide range of lengths, and the instance count grows with duration.

On-disk layout (``save_dataset`` / ``load_dataset``)::

    manifest.json       {"version": 1, "videos": [{id, fps, stride, num_features,
                          channels, duration_sec, feature_file, split, sha256}]}
    annotations.json    {id: [{"start", "end", "label"}]}
    labels.json         {label index: name}
    features/<id>.f32   little-endian float32, row-major T0 x C, no header
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from .config import GenConfig
from .timeline import ActionInstance, FeatureSequence, VideoMeta

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SIGNATURE_STREAM = 2**31 - 1


class DatasetError(Exception):
    pass


@dataclass(eq=False)
class Video:
    features: FeatureSequence
    instances: List[ActionInstance]
    split: str = "train"

    @property
    def meta(self) -> VideoMeta:
        return self.features.meta

    @property
    def video_id(self) -> str:
        return self.features.meta.video_id


@dataclass(eq=False)
class Dataset:
    videos: List[Video]
    num_classes: int
    label_names: dict = field(default_factory=dict)

    def split(self, name: str) -> "Dataset":
        return Dataset([v for v in self.videos if v.split == name], self.num_classes, self.label_names)

    def __len__(self):
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def ground_truth(self) -> dict:
        return {v.video_id: list(v.instances) for v in self.videos}

    @property
    def channels(self) -> int:
        return self.videos[0].meta.channels


def class_signatures(cfg: GenConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, SIGNATURE_STREAM])
    sig = rng.standard_normal((cfg.num_classes, cfg.class_signature_dim))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    # unit-norm signature spread over the signature channels, scaled per channel
    return sig * math.sqrt(cfg.class_signature_dim) * cfg.signal_amplitude


def _place_instances(rng, duration: float, lengths: np.ndarray, min_gap: float):
    """Random non-overlapping placement; None when the lengths cannot fit."""
    n = len(lengths)
    slack = duration - lengths.sum() - min_gap * (n + 1)
    if slack < 0:
        return None
    # split the slack into n+1 random gaps
    cuts = np.sort(rng.uniform(0.0, slack, size=n))
    gaps = np.diff(np.concatenate([[0.0], cuts]))
    starts = []
    cursor = min_gap
    for length, gap in zip(lengths, gaps):
        cursor += gap
        starts.append(cursor)
        cursor += length + min_gap
    return np.array(starts)


def generate_video(cfg: GenConfig, index: int, signatures: np.ndarray, split: str) -> Video:
    rng = np.random.default_rng([cfg.seed, index])
    video_id = f"video_{index:05d}"
    duration = float(math.exp(rng.uniform(math.log(cfg.min_sec), math.log(cfg.max_sec))))
    snippet = cfg.stride / cfg.fps
    num_features = int(math.ceil(duration / snippet))
    meta = VideoMeta(video_id, cfg.fps, cfg.stride, num_features, cfg.channels, duration)

    count = max(1, int(rng.poisson(duration * cfg.instances_per_minute / 60.0)))
    max_len = max(cfg.max_instance_frac * duration, cfg.min_instance_sec * 1.0001)
    labels = rng.integers(0, cfg.num_classes, size=count)
    lengths = np.exp(rng.uniform(math.log(cfg.min_instance_sec), math.log(max_len), size=count))
    starts = _place_instances(rng, duration, lengths, cfg.min_gap_sec)
    while starts is None:
        logger.info("%s: %d instances do not fit, retrying with %d", video_id, count, count - 1)
        count -= 1
        labels, lengths = labels[:count], lengths[:count]
        if count == 0:
            raise DatasetError(f"{video_id}: cannot place even one instance")
        starts = _place_instances(rng, duration, lengths, cfg.min_gap_sec)

    values = rng.standard_normal((num_features, cfg.channels)) * cfg.noise_std
    times = (np.arange(num_features) + 0.5) * snippet
    instances = []
    for s, length, label in zip(starts, lengths, labels):
        e = s + length
        center, half = 0.5 * (s + e), 0.5 * length
        tri = np.clip(1.0 - np.abs(times - center) / half, 0.0, None)
        env = np.where(tri > 0, cfg.envelope_floor + (1 - cfg.envelope_floor) * tri, 0.0)
        values[:, : cfg.class_signature_dim] += env[:, None] * signatures[label]
        instances.append(ActionInstance(float(s), float(e), int(label)))
    features = FeatureSequence(meta, values.astype(np.float32))
    return Video(features, instances, split)


def generate(cfg: GenConfig) -> Dataset:
    cfg.validate()
    signatures = class_signatures(cfg)
    n_train = cfg.num_videos - cfg.val_videos
    videos = [
        generate_video(cfg, i, signatures, "train" if i < n_train else "val")
        for i in range(cfg.num_videos)
    ]
    names = {i: f"class_{i}" for i in range(cfg.num_classes)}
    return Dataset(videos, cfg.num_classes, names)


# -- file I/O -----------------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries, annotations = [], {}
    for video in dataset.videos:
        meta = video.meta
        rel = f"features/{meta.video_id}.f32"
        data = np.ascontiguousarray(video.features.values, dtype="<f4").tobytes()
        (out / rel).write_bytes(data)
        entries.append({
            "id": meta.video_id,
            "fps": meta.fps,
            "stride": meta.stride,
            "num_features": meta.num_features,
            "channels": meta.channels,
            "duration_sec": meta.duration_sec,
            "feature_file": rel,
            "split": video.split,
            "sha256": _sha256(data),
        })
        annotations[meta.video_id] = [
            {"start": a.start, "end": a.end, "label": a.label} for a in video.instances
        ]
    manifest = {"version": MANIFEST_VERSION, "num_classes": dataset.num_classes, "videos": entries}
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "annotations.json", annotations)
    _write_json(out / "labels.json", {str(k): v for k, v in dataset.label_names.items()})
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from None


def load_dataset(data_dir: str | Path) -> Dataset:
    root = Path(data_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    manifest = _read_json(root / "manifest.json")
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION or "videos" not in manifest:
        raise DatasetError(f"malformed manifest header in {root / 'manifest.json'}")
    annotations = _read_json(root / "annotations.json")
    labels_path = root / "labels.json"
    label_names = {int(k): v for k, v in _read_json(labels_path).items()} if labels_path.exists() else {}
    videos = []
    for entry in manifest["videos"]:
        try:
            meta = VideoMeta(entry["id"], float(entry["fps"]), int(entry["stride"]), int(entry["num_features"]),
                             int(entry["channels"]), float(entry["duration_sec"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"malformed manifest entry {entry.get('id', '?')}: {exc}") from None
        path = root / entry["feature_file"]
        if not path.exists():
            raise DatasetError(f"{meta.video_id}: missing feature file {path}")
        data = path.read_bytes()
        expected = meta.num_features * meta.channels * 4
        if len(data) != expected:
            raise DatasetError(
                f"{meta.video_id}: shape mismatch, {path} holds {len(data)} bytes, expected {expected} "
                f"for {meta.num_features}x{meta.channels} float32"
            )
        if "sha256" in entry and _sha256(data) != entry["sha256"]:
            raise DatasetError(f"{meta.video_id}: checksum failure for {path}")
        values = np.frombuffer(data, dtype="<f4").reshape(meta.num_features, meta.channels).astype(np.float32)
        inst = [ActionInstance(float(a["start"]), float(a["end"]), int(a["label"]))
                for a in annotations.get(meta.video_id, [])]
        videos.append(Video(FeatureSequence(meta, values), inst, entry.get("split", "train")))
    num_classes = int(manifest.get("num_classes", 1 + max((a.label for v in videos for a in v.instances), default=0)))
    return Dataset(videos, num_classes, label_names)


def dataset_summary(dataset: Dataset) -> dict:
    durations = np.array([v.meta.duration_sec for v in dataset.videos])
    counts = np.array([len(v.instances) for v in dataset.videos])
    q = np.quantile(durations, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "videos": len(dataset),
        "train": sum(v.split == "train" for v in dataset.videos),
        "val": sum(v.split == "val" for v in dataset.videos),
        "duration_quantiles": [round(float(x), 3) for x in q],
        "instances": int(counts.sum()),
        "instances_per_video_mean": round(float(counts.mean()), 3),
    }
