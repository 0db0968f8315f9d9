import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from timealign.timeline import (ActionInstance, Detection, DetectionSet, FeatureSequence, Segment, VideoMeta,
                                clip_to_video, interval_iou, segment_iou)

finite = st.floats(-1e4, 1e4, allow_nan=False)
pos = st.floats(1e-3, 1e3, allow_nan=False)


def seg(s, e):
    return Segment.from_start_end(s, e)


def test_iou_examples():
    assert segment_iou(seg(0, 2), seg(0, 2)) == 1.0
    assert segment_iou(seg(0, 1), seg(2, 3)) == 0.0
    assert segment_iou(seg(0, 1), seg(0.5, 1.5)) == pytest.approx(1 / 3, abs=1e-12)


def test_clip_examples():
    meta = VideoMeta("v", 25.0, 8, 10, 4, 10.0)
    out = clip_to_video(seg(-1, 3), meta)
    assert (out.start, out.end) == pytest.approx((0, 3))
    out = clip_to_video(seg(2, 4), meta)
    assert (out.start, out.end) == pytest.approx((2, 4))
    out = clip_to_video(seg(11, 13), meta)
    assert out.start == pytest.approx(9.9999, abs=1e-9)
    assert out.end == pytest.approx(10.0, abs=1e-12)


def test_half_width_convention():
    s = Segment(5.0, 2.0)
    assert (s.start, s.end, s.length) == (3.0, 7.0, 4.0)


@given(finite, pos)
def test_start_end_round_trip(c, w):
    s = Segment(c, w)
    r = Segment.from_start_end(s.start, s.end)
    assert abs(r.center - c) <= 1e-9 * max(1, abs(c)) and abs(r.width - w) <= 1e-9 * max(1, w)


@given(finite, pos, finite, pos)
def test_iou_symmetric_and_bounded(c1, w1, c2, w2):
    a, b = Segment(c1, w1), Segment(c2, w2)
    assert segment_iou(a, b) == segment_iou(b, a)
    assert 0.0 <= segment_iou(a, b) <= 1.0
    assert segment_iou(a, a) == 1.0


@given(st.integers(-50, 50), st.integers(1, 20), st.integers(-50, 50), st.integers(1, 20), st.integers(-64, 64))
def test_iou_translation_invariant(s1, l1, s2, l2, shift):
    # integer endpoints keep the shifted arithmetic exact
    base = interval_iou(s1, s1 + l1, s2, s2 + l2)
    assert interval_iou(s1 + shift, s1 + l1 + shift, s2 + shift, s2 + l2 + shift) == base


@given(st.integers(-50, 50), st.integers(1, 20), st.integers(-50, 50), st.integers(1, 20), st.sampled_from([0.25, 2, 8]))
def test_iou_scale_invariant(s1, l1, s2, l2, s):
    base = interval_iou(s1, s1 + l1, s2, s2 + l2)
    assert interval_iou(s * s1, s * (s1 + l1), s * s2, s * (s2 + l2)) == base


def test_iou_shrinks_with_translation():
    a = seg(0, 2)
    vals = [segment_iou(a, seg(d, d + 2)) for d in np.linspace(0, 3, 13)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))


def test_invalid_values_rejected():
    with pytest.raises(ValueError):
        Segment(0.0, 0.0)
    with pytest.raises(ValueError):
        ActionInstance(2.0, 1.0, 0)
    with pytest.raises(ValueError):
        VideoMeta("v", 0.0, 8, 10, 4, 10.0)
    with pytest.raises(ValueError):
        VideoMeta("v", 25.0, 8, 100, 4, 1.0)  # too short for its features
    meta = VideoMeta("v", 25.0, 8, 3, 2, 1.0)
    with pytest.raises(ValueError):
        FeatureSequence(meta, np.zeros((3, 3), np.float32))
    with pytest.raises(ValueError):
        FeatureSequence(meta, np.full((3, 2), np.nan, np.float32))
    with pytest.raises(ValueError):
        Detection(Segment(1, 1), 0, 1.5)


def test_detection_records_round_trip():
    ds = DetectionSet("v", [Detection(seg(1, 2), 1, 0.5), Detection(seg(3, 7), 0, 0.25)])
    back = DetectionSet.from_records("v", ds.to_records())
    assert [(d.segment.start, d.segment.end, d.label, d.score) for d in back.items] == \
           [(d.segment.start, d.segment.end, d.label, d.score) for d in ds.items]
    assert math.isclose(ds.items[1].segment.length, 4.0)
