import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from timealign.config import EvalConfig
from timealign.metrics import (InstabilityLog, average_precision, false_negative_buckets, instability, mean_ap, nms,
                               noise_probe)
from timealign.model import TemporalDetector
from timealign.timeline import ActionInstance, Detection, DetectionSet, Segment, interval_iou
from conftest import random_video, tiny_model_config
from helpers import reference_ap


def dets(vid, rows):
    return DetectionSet(vid, [Detection(Segment.from_start_end(s, e), lab, sc) for s, e, sc, lab in rows])


def gts_of(rows):
    return [ActionInstance(s, e, lab) for s, e, lab in rows]


def test_ap_examples():
    gt = {"v": gts_of([(0, 1, 0), (2, 3, 0)])}
    p = {"v": dets("v", [(0, 1, 0.9, 0), (2, 3, 0.8, 0), (4, 5, 0.7, 0)])}
    assert average_precision(p, gt, 0, 0.5) == 1.0
    gt = {"v": gts_of([(0, 1, 0)])}
    assert average_precision({"v": dets("v", [(0.5, 1.5, 0.9, 0)])}, gt, 0, 0.5) == 0.0
    assert average_precision({}, gt, 0, 0.5) == 0.0
    assert average_precision({}, gt, 3, 0.5) is None


def test_mean_ap_examples():
    gt = {"v": gts_of([(0, 1, 0), (2, 3, 1)])}
    perfect = {"v": dets("v", [(0, 1, 0.9, 0), (2, 3, 0.8, 1)])}
    table = mean_ap(perfect, gt, EvalConfig())
    assert table["map"] == [1.0] * 5 and table["average"] == 1.0
    # (0, 1.2) has IoU 1/1.2 with (0, 1): a hit up to 0.8, a miss at 0.9
    gt1 = {"v": gts_of([(0, 1, 0)])}
    t = mean_ap({"v": dets("v", [(0, 1.2, 0.9, 0)])}, gt1, thresholds=[0.5, 0.8, 0.9])
    assert t["map"] == [1.0, 1.0, 0.0] and t["average"] == pytest.approx(2 / 3)


def random_case(rng, n_pred, n_videos=2, n_classes=2):
    gts, preds = {}, {}
    for v in range(n_videos):
        vid = f"v{v}"
        gts[vid] = [ActionInstance(float(s), float(s + rng.integers(1, 4)), int(rng.integers(n_classes)))
                    for s in rng.choice(np.arange(0, 40, 5), size=rng.integers(1, 4), replace=False)]
    rows = {f"v{v}": [] for v in range(n_videos)}
    for _ in range(n_pred):
        vid = f"v{rng.integers(n_videos)}"
        s = float(rng.integers(0, 40)) + rng.choice([0.0, 0.5])
        rows[vid].append((s, s + float(rng.integers(1, 4)), float(rng.integers(1, 6)) / 6, int(rng.integers(n_classes))))
    preds = {vid: dets(vid, r) for vid, r in rows.items()}
    return preds, gts


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 20), st.integers(0, 2**31))
def test_ap_matches_reference(n_pred, seed):
    preds, gts = random_case(np.random.default_rng(seed), n_pred)
    for label in (0, 1):
        for thr in (0.3, 0.5, 0.7):
            assert average_precision(preds, gts, label, thr) == pytest.approx(reference_ap(preds, gts, label, thr), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31), st.floats(0.1, 1.0))
def test_ap_rank_only_and_order_free(n_pred, seed, scale):
    rng = np.random.default_rng(seed)
    preds, gts = random_case(rng, n_pred)
    base = mean_ap(preds, gts)
    scaled = {vid: DetectionSet(vid, [Detection(d.segment, d.label, d.score * scale) for d in ds.items])
              for vid, ds in preds.items()}
    shuffled = {vid: DetectionSet(vid, [ds.items[i] for i in rng.permutation(len(ds))]) for vid, ds in preds.items()}
    assert mean_ap(scaled, gts)["map"] == pytest.approx(base["map"], abs=1e-12)
    assert mean_ap(shuffled, gts) == base


def test_dropping_false_positive_never_hurts():
    gt = {"v": gts_of([(0, 1, 0), (5, 6, 0)])}
    p = dets("v", [(0, 1, 0.9, 0), (10, 11, 0.8, 0), (5, 6, 0.7, 0)])
    before = average_precision({"v": p}, gt, 0, 0.5)
    lowered = dets("v", [(0, 1, 0.9, 0), (10, 11, 0.1, 0), (5, 6, 0.7, 0)])
    assert average_precision({"v": lowered}, gt, 0, 0.5) >= before


def test_instability_examples():
    log = InstabilityLog()
    log.record("a", 3, {0: 1, 1: 2, 2: 3})
    log.new_epoch()
    log.record("a", 3, {0: 1, 1: 2, 2: 3})
    assert instability(log, 1) == 0.0
    log.new_epoch()
    log.record("a", 3, {0: 5, 1: 6})  # gt 2 unmatched now
    assert instability(log, 2) == 1.0
    log2 = InstabilityLog([{"v": {g: g for g in range(10)}}, {"v": {g: (g + 100 if g < 3 else g) for g in range(10)}}])
    assert instability(log2, 1) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        instability(log2, 0)


def test_instability_relabel_invariant():
    rng = np.random.default_rng(0)
    a = {"v": {g: int(rng.integers(20)) for g in range(15)}}
    b = {"v": {g: int(rng.integers(20)) for g in range(15)}}
    relabel = rng.permutation(20)
    ra = {"v": {g: int(relabel[q]) for g, q in a["v"].items()}}
    rb = {"v": {g: int(relabel[q]) for g, q in b["v"].items()}}
    assert instability(InstabilityLog([a, b]), 1) == instability(InstabilityLog([ra, rb]), 1)
    log = InstabilityLog([a, b])
    assert InstabilityLog.from_json(log.to_json()).epochs == log.epochs


def test_nms_examples():
    two = dets("v", [(0, 2, 0.9, 0), (0, 2, 0.8, 0)])
    assert [d.score for d in nms(two, 0.5).items] == [0.9]
    disjoint = dets("v", [(0, 1, 0.9, 0), (3, 4, 0.8, 0)])
    assert nms(disjoint, 0.5).to_records() == disjoint.to_records()
    chain = dets("v", [(0, 2, 0.9, 0), (0.5, 2.5, 0.8, 0), (1.0, 3.0, 0.7, 0)])
    # a-b IoU 0.6, b-c IoU 0.6, a-c IoU 1/3
    assert [d.score for d in nms(chain, 0.5).items] == [0.9, 0.7]
    with pytest.raises(ValueError):
        nms(chain, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 20), st.integers(0, 2**31), st.floats(0.1, 0.9))
def test_nms_subset_and_idempotent(n, seed, thr):
    preds, _ = random_case(np.random.default_rng(seed), n, n_videos=1)
    d = preds["v0"]
    once = nms(d, thr)
    recs = d.to_records()
    assert all(r in recs for r in once.to_records())
    assert nms(once, thr).to_records() == once.to_records()


def test_fn_bucket_examples():
    cfg = EvalConfig(length_buckets=[1.0, 2.0, 3.0, 4.0])
    gt = {"v": gts_of([(0, 5, 0), (10, 15, 0), (20, 25, 1), (30, 35, 1), (40, 40.5, 0)])}
    perfect = {"v": dets("v", [(a.start, a.end, 0.9, a.label) for a in gt["v"]])}
    res = false_negative_buckets(perfect, gt, cfg)
    assert all(v == 0.0 for v in res["rates"].values() if v is not None)
    none = false_negative_buckets({}, gt, cfg)
    assert none["rates"]["XS"] == 1.0 and none["rates"]["XL"] == 1.0 and none["rates"]["M"] is None
    miss_one = {"v": dets("v", [(a.start, a.end, 0.9, a.label) for a in gt["v"][1:4]])}
    assert false_negative_buckets(miss_one, gt, cfg)["rates"]["XL"] == 0.25


def test_noise_probe_zero_alpha_and_validation():
    torch.manual_seed(0)
    model = TemporalDetector(tiny_model_config())
    video = random_video(48)
    from types import SimpleNamespace

    vids = [SimpleNamespace(features=video, video_id="v0", instances=[ActionInstance(1.0, 4.0, 0)])]
    out = noise_probe(model, vids, 0.0, "center", trials=3)
    assert out["delta_map"] == 0.0
    with pytest.raises(ValueError):
        noise_probe(model, vids, -0.1)
    with pytest.raises(ValueError):
        noise_probe(model, vids, 0.1, target="start")
