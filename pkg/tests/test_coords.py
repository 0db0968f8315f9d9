import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from timealign.coords import (OffsetPair, decode_normalized_baseline, decode_time_aligned, logit,
                              make_reference_grid, normalized_start_end, refine_normalized_baseline,
                              refine_time_aligned, sigmoid, time_aligned_encode, time_to_index)
from timealign.timeline import Segment, VideoMeta

offsets = st.floats(-5, 5, allow_nan=False)


def meta(T=3, fps=1.0, stride=1):
    return VideoMeta("v", fps, stride, T, 4, T * stride / fps)


def test_grid_unit_consistent_example():
    g = make_reference_grid(meta(3), 1, 2.0, "unit_consistent")
    np.testing.assert_allclose(g.centers, [0.5, 1.5, 2.5])
    assert g.width == 2.0


def test_grid_paper_literal_example():
    g = make_reference_grid(meta(3), 1, 1.0, "paper_literal")
    assert g.centers[0] == 1.5 and g.width == 1.0


def test_grid_level_doubles_spacing_and_width():
    m = VideoMeta("v", 25.0, 8, 50, 4, 16.0)
    g1 = make_reference_grid(m, 1, 2.0)
    g2 = make_reference_grid(m, 2, 2.0)
    assert np.diff(g2.centers)[0] == pytest.approx(2 * np.diff(g1.centers)[0])
    assert g2.width == pytest.approx(2 * g1.width)
    assert len(g2) == 25 and len(make_reference_grid(m, 3, 2.0)) == 13


def test_grid_errors():
    with pytest.raises(ValueError):
        make_reference_grid(meta(3), 0, 2.0)
    with pytest.raises(ValueError):
        make_reference_grid(meta(3), 1, 0.0)
    with pytest.raises(ValueError):
        make_reference_grid(meta(3), 3, 2.0, num_levels=2)


def test_index_bridge_hits_grid_positions():
    m = VideoMeta("v", 25.0, 8, 50, 4, 16.0)
    for level in (1, 2, 3):
        g = make_reference_grid(m, level, 2.0)
        np.testing.assert_allclose(time_to_index(g.centers, m, level), np.arange(len(g)), atol=1e-12)


def test_decode_examples():
    s = decode_time_aligned(10.0, 2.0, OffsetPair(0, 0))
    assert (s.center, s.width) == (10.0, 2.0)
    s = decode_time_aligned(10.0, 2.0, OffsetPair(0.5, math.log(2)))
    assert s.center == 11.0 and s.width == pytest.approx(4.0, rel=1e-15)
    s = decode_time_aligned(100.0, 20.0, OffsetPair(0.5, math.log(2)))
    assert s.center == 110.0 and s.width == pytest.approx(40.0, rel=1e-15)


def test_refine_examples():
    assert refine_time_aligned(Segment(5, 1), OffsetPair(0, 0)) == Segment(5, 1)
    assert refine_time_aligned(Segment(5, 1), OffsetPair(-1, 0)) == Segment(4, 1)
    s = refine_time_aligned(refine_time_aligned(Segment(5, 1.5), OffsetPair(0.3, 0.2)), OffsetPair(0, -0.7))
    assert s.width == pytest.approx(1.5 * math.exp(0.2 - 0.7), rel=1e-14)


@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), offsets, offsets)
def test_width_positive_and_inverse_consistent(c, w, dc, dd):
    s = decode_time_aligned(c, w, OffsetPair(dc, dd))
    assert s.width > 0
    rc, rd = time_aligned_encode(c, w, s.center, s.width)
    back = decode_time_aligned(c, w, OffsetPair(rc, rd))
    assert back.center == pytest.approx(s.center, rel=1e-9, abs=1e-9)
    assert back.width == pytest.approx(s.width, rel=1e-9)


def test_normalized_baseline_examples():
    s = decode_normalized_baseline(0.0, 0.0, 100.0)
    assert (s.start, s.end) == (0.0, 100.0)
    start, end = normalized_start_end(0.0, -1e3, 100.0)
    assert start == pytest.approx(50.0) and end == pytest.approx(50.0)
    shifted = decode_normalized_baseline(0.1, 0.0, 100.0).center - 50.0
    assert shifted == pytest.approx(2.498, abs=5e-4)


def test_normalized_sensitivity_grows_with_duration():
    for dur in (10.0, 100.0, 1000.0):
        x = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
        (sigmoid(x) * dur).backward()
        assert x.grad.item() == pytest.approx(0.25 * dur, rel=1e-12)


def test_refine_normalized_examples():
    assert refine_normalized_baseline((0.5, 0.5), OffsetPair(0, 0)) == (0.5, 0.5)
    c, d = refine_normalized_baseline((0.5, 0.5), OffsetPair(float(logit(0.7)), 0))
    assert c == pytest.approx(0.7, abs=1e-12) and d == 0.5
    for bad in [(0.0, 0.5), (0.5, 1.0)]:
        with pytest.raises(ValueError):
            refine_normalized_baseline(bad, OffsetPair(0, 0))


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), offsets, offsets)
def test_refine_normalized_stays_in_unit_interval(c, d, dc, dd):
    c2, d2 = refine_normalized_baseline((c, d), OffsetPair(dc, dd))
    assert 0 < c2 < 1 and 0 < d2 < 1


def test_offsets_must_be_finite():
    with pytest.raises(ValueError):
        OffsetPair(float("nan"), 0.0)
