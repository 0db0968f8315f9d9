"""Detection metrics and training diagnostics.

* ``average_precision`` / ``mean_ap``: temporal mAP with greedy one-to-one
  assignment in descending score order and all-point interpolation.
* ``instability``: fraction of ground truths whose matched query slot
  changes between consecutive epochs.
* ``noise_probe``: mAP change when uniform noise is added to the final
  center (or width) pre-activation.
* ``nms``: classwise greedy suppression, for comparison runs only.
* ``false_negative_buckets``: miss rate grouped by instance length.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .config import EvalConfig
from .timeline import ActionInstance, Detection, DetectionSet, interval_iou

BUCKET_NAMES = ("XS", "S", "M", "L", "XL")


# -- mAP ------------------------------------------------------------------------------


def _class_predictions(preds: Mapping[str, DetectionSet], label: int):
    rows = []
    for vid in sorted(preds):
        for det in preds[vid].items:
            if det.label == label:
                rows.append((det.score, det.segment.start, vid, det.segment.end))
    # descending score; ties -> earlier start, then video id
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    return rows


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if len(tp) == 0 or n_gt == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(
    preds: Mapping[str, DetectionSet],
    gts: Mapping[str, Sequence[ActionInstance]],
    label: int,
    iou_thr: float,
) -> Optional[float]:
    """AP for one class; ``None`` when the class has no ground truth."""
    gt_by_video = {
        vid: [(a.start, a.end) for a in insts if a.label == label] for vid, insts in gts.items()
    }
    n_gt = sum(len(v) for v in gt_by_video.values())
    if n_gt == 0:
        return None
    used = {vid: np.zeros(len(v), dtype=bool) for vid, v in gt_by_video.items()}
    rows = _class_predictions(preds, label)
    tp = np.zeros(len(rows))
    for i, (_, start, vid, end) in enumerate(rows):
        cands = gt_by_video.get(vid, [])
        if not cands:
            continue
        ious = np.array([interval_iou(start, end, s, e) for s, e in cands])
        for j in np.argsort(-ious, kind="stable"):
            if ious[j] < iou_thr:
                break
            if not used[vid][j]:
                used[vid][j] = True
                tp[i] = 1.0
                break
    return _interpolated_ap(tp, n_gt)


def mean_ap(preds: Mapping[str, DetectionSet], gts: Mapping[str, Sequence[ActionInstance]], cfg: EvalConfig | None = None,
            thresholds: Sequence[float] | None = None) -> dict:
    """Per-threshold mAP over classes with ground truth, plus the average."""
    if thresholds is None:
        thresholds = (cfg or EvalConfig()).iou_thresholds
    labels = sorted({a.label for insts in gts.values() for a in insts})
    per_thr = []
    for thr in thresholds:
        aps = [average_precision(preds, gts, c, thr) for c in labels]
        aps = [a for a in aps if a is not None]
        per_thr.append(float(np.mean(aps)) if aps else 0.0)
    return {
        "thresholds": [float(t) for t in thresholds],
        "map": per_thr,
        "average": float(np.mean(per_thr)),
    }


# -- matching instability ------------------------------------------------------------------


@dataclass
class InstabilityLog:
    """Per epoch: ``{video_id: {gt_index: query_slot or None}}``."""

    epochs: List[Dict[str, Dict[int, Optional[int]]]] = field(default_factory=list)

    def new_epoch(self) -> Dict[str, Dict[int, Optional[int]]]:
        self.epochs.append({})
        return self.epochs[-1]

    def record(self, video_id: str, num_gt: int, gt_to_query: Mapping[int, int]) -> None:
        if not self.epochs:
            self.new_epoch()
        self.epochs[-1][video_id] = {g: gt_to_query.get(g) for g in range(num_gt)}

    def to_json(self) -> list:
        return [{vid: {str(g): q for g, q in m.items()} for vid, m in ep.items()} for ep in self.epochs]

    @classmethod
    def from_json(cls, data: list) -> "InstabilityLog":
        return cls([{vid: {int(g): q for g, q in m.items()} for vid, m in ep.items()} for ep in data])


def instability(log: InstabilityLog, epoch_i: int) -> float:
    if epoch_i < 1 or epoch_i >= len(log.epochs):
        raise ValueError(f"need epochs {epoch_i - 1} and {epoch_i} recorded, have {len(log.epochs)}")
    prev, cur = log.epochs[epoch_i - 1], log.epochs[epoch_i]
    if set(prev) != set(cur):
        raise ValueError("consecutive epochs cover different video sets")
    total = changed = 0
    for vid, assignment in cur.items():
        before = prev[vid]
        for g, slot in assignment.items():
            total += 1
            changed += before.get(g) != slot
    return changed / total if total else 0.0


def instability_curve(log: InstabilityLog) -> List[float]:
    return [instability(log, i) for i in range(1, len(log.epochs))]


# -- NMS -------------------------------------------------------------------------------


def nms(dets: DetectionSet, iou_thr: float) -> DetectionSet:
    if not 0.0 < iou_thr < 1.0:
        raise ValueError("iou_thr must lie in (0, 1)")
    by_class = defaultdict(list)
    for i, det in enumerate(dets.items):
        by_class[det.label].append(i)
    keep = []
    for label, idxs in by_class.items():
        order = sorted(idxs, key=lambda i: (-dets.items[i].score, dets.items[i].segment.start, i))
        kept = []
        for i in order:
            seg = dets.items[i].segment
            if all(interval_iou(seg.start, seg.end, dets.items[k].segment.start, dets.items[k].segment.end) <= iou_thr
                   for k in kept):
                kept.append(i)
        keep.extend(kept)
    return DetectionSet(dets.video_id, [dets.items[i] for i in sorted(keep)])


# -- false negatives by length ----------------------------------------------------------------


def length_bucket_edges(gts: Mapping[str, Sequence[ActionInstance]]) -> List[float]:
    lengths = [a.end - a.start for insts in gts.values() for a in insts]
    if not lengths:
        return [0.0, 0.0, 0.0, 0.0]
    return [float(x) for x in np.quantile(lengths, [0.2, 0.4, 0.6, 0.8])]


def false_negative_buckets(preds: Mapping[str, DetectionSet], gts: Mapping[str, Sequence[ActionInstance]],
                           cfg: EvalConfig | None = None, iou_thr: float = 0.5) -> dict:
    cfg = cfg or EvalConfig()
    edges = list(cfg.length_buckets) if cfg.length_buckets is not None else length_bucket_edges(gts)
    missed = np.zeros(5)
    counts = np.zeros(5)
    for vid, insts in gts.items():
        dets = preds.get(vid, DetectionSet(vid)).items
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].segment.start))
        hit = np.zeros(len(insts), dtype=bool)
        for i in order:
            d = dets[i]
            best, best_iou = -1, iou_thr
            for j, a in enumerate(insts):
                if hit[j] or a.label != d.label:
                    continue
                iou = interval_iou(d.segment.start, d.segment.end, a.start, a.end)
                if iou >= best_iou:
                    best, best_iou = j, iou
            if best >= 0:
                hit[best] = True
        for j, a in enumerate(insts):
            b = int(np.searchsorted(edges, a.end - a.start, side="right"))
            counts[b] += 1
            missed[b] += not hit[j]
    rates = {
        name: (float(missed[b] / counts[b]) if counts[b] else None) for b, name in enumerate(BUCKET_NAMES)
    }
    return {"edges": edges, "rates": rates, "counts": {n: int(c) for n, c in zip(BUCKET_NAMES, counts)}}


# -- noise sensitivity probe -------------------------------------------------------------


@dataclass(eq=False)
class FinalLayerCache:
    """Inputs of the last refinement step for every video, for re-decoding."""

    meta: object
    prev: tuple  # (c, d) normalized or (center, width) seconds
    offsets: np.ndarray  # (N, 2)
    probs: np.ndarray  # (N, C)
    normalized: bool


def collect_final_layer(model, videos) -> List[FinalLayerCache]:
    import torch

    caches = []
    with torch.no_grad():
        for video in videos:
            feats = video.features if hasattr(video, "features") else video
            out = model(feats)
            dec = out.decoder
            caches.append(FinalLayerCache(
                meta=feats.meta,
                prev=tuple(p.double().numpy() for p in dec.last_prev),
                offsets=dec.last_offsets.double().numpy(),
                probs=torch.sigmoid(dec.class_logits[-1]).double().numpy(),
                normalized=model.normalized,
            ))
    return caches


def decode_cached(cache: FinalLayerCache, center_noise=None, width_noise=None) -> DetectionSet:
    from .coords import normalized_update, time_aligned_update
    from .model import detections_from_arrays

    dc = cache.offsets[:, 0] + (0.0 if center_noise is None else center_noise)
    dd = cache.offsets[:, 1] + (0.0 if width_noise is None else width_noise)
    if cache.normalized:
        cn, wn = normalized_update(cache.prev[0], cache.prev[1], dc, dd)
        dur = cache.meta.duration_sec
        centers, widths = cn * dur, wn * dur
    else:
        centers, widths = time_aligned_update(cache.prev[0], cache.prev[1], dc, dd)
    return detections_from_arrays(cache.meta, centers, widths, cache.probs)


def noise_probe(model, videos, noise_alpha: float, target: str = "center", trials: int = 20, seed: int = 0,
                gts=None, cfg: EvalConfig | None = None, caches: List[FinalLayerCache] | None = None) -> dict:
    """Mean mAP@AVG(perturbed) - mAP@AVG(clean) over ``trials`` noise draws.

    Noise ``U(-noise_alpha, noise_alpha)`` is added per prediction to the
    final center (or width) pre-activation: the logit for the normalized
    expression, the width-scaled offset for the time-aligned one.
    """
    if noise_alpha < 0:
        raise ValueError("noise_alpha must be >= 0")
    if target not in ("center", "width"):
        raise ValueError("target must be 'center' or 'width'")
    if caches is None:
        caches = collect_final_layer(model, videos)
    if gts is None:
        gts = {v.video_id: list(v.instances) for v in videos}
    clean = mean_ap({c.meta.video_id: decode_cached(c) for c in caches}, gts, cfg)["average"]
    rng = np.random.default_rng(seed)
    deltas = []
    for _ in range(trials):
        preds = {}
        for c in caches:
            eps = rng.uniform(-noise_alpha, noise_alpha, size=len(c.offsets))
            kw = {"center_noise": eps} if target == "center" else {"width_noise": eps}
            preds[c.meta.video_id] = decode_cached(c, **kw)
        deltas.append(mean_ap(preds, gts, cfg)["average"] - clean)
    return {
        "noise_alpha": noise_alpha,
        "target": target,
        "clean_map": clean,
        "delta_map": float(np.mean(deltas)) if deltas else 0.0,
        "deltas": [float(d) for d in deltas],
    }
