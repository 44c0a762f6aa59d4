import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointnae.annot import PointSet
from pointnae.noise import (
    ConfigError, SamplingBounds, compose_offset, make_noised, radii, row_cap_constant,
    row_cap_perspective, sample_offset, sample_offsets, sampling_bounds, substream, window_size,
)

from oracles import brute_row_cap, chi_square_uniform


def test_row_cap_two_points():
    # upper point's larger d is capped by the non-increasing rule
    assert row_cap_perspective([5, 1], [2, 4], 6).tolist() == [2.0] * 6


def test_window_size():
    assert window_size(100) == 2
    assert window_size(49) == 1
    assert window_size(10) == 1
    assert window_size(512) == 10


def test_row_cap_single_point():
    assert row_cap_perspective([0], [3], 4).tolist() == [3.0] * 4


def test_row_cap_empty():
    with pytest.raises(ValueError, match="empty"):
        row_cap_perspective([], [], 10)
    with pytest.raises(ValueError, match="empty"):
        row_cap_constant([], 10)


def test_row_cap_grows_downwards():
    # a small object near the top, a large one near the bottom
    cap = row_cap_perspective([2.0, 90.0], [3.0, 20.0], 100)
    assert cap[0] == 3.0 and cap[99] == 20.0
    assert np.all(np.diff(cap) >= 0)


@pytest.mark.parametrize("d,h,expected", [([2, 4, 6], 3, [4, 4, 4]), ([1, 3], 2, [2, 2]), ([5], 1, [5])])
def test_row_cap_constant(d, h, expected):
    assert row_cap_constant(d, h).tolist() == expected


def _random_instance(rng):
    h = int(rng.integers(1, 513))
    n = int(rng.integers(1, 2001))
    y = rng.uniform(-2, h + 2, n)
    if rng.random() < 0.3:
        y = np.floor(y)  # integer rows hit the window edges exactly
    d = rng.exponential(10.0, n)
    return h, y, d


def test_row_cap_matches_reference_sample():
    rng = np.random.default_rng(11)
    for _ in range(100):
        h, y, d = _random_instance(rng)
        ref = brute_row_cap(np.column_stack([np.zeros_like(y), y, d]), h)
        got = row_cap_perspective(y, d, h)
        assert np.array_equal(got, ref)
        assert np.all(got[:-1] <= got[1:])


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 120),
    st.lists(st.tuples(st.floats(-3, 125, allow_nan=False), st.floats(0, 50, allow_nan=False)),
             min_size=1, max_size=40),
)
def test_row_cap_reference_property(h, pts):
    y = np.array([p[0] for p in pts])
    d = np.array([p[1] for p in pts])
    ref = brute_row_cap(np.column_stack([np.zeros_like(y), y, d]), h)
    assert np.array_equal(row_cap_perspective(y, d, h), ref)


def test_radii_examples():
    assert radii([0.0], [10.0], [6.0], 0.4)[0] == pytest.approx(2.4)
    assert radii([0.0], [4.0], [6.0], 0.5)[0] == 2.0


def test_radii_uses_floor_of_row():
    cap = np.array([1.0, 2.0, 3.0])
    assert radii([1.99, 2.5, 7.0, -1.0], [10, 10, 10, 10], cap, 0.5).tolist() == [1.0, 1.5, 1.5, 0.5]


@pytest.mark.parametrize("alpha", [0.0, -0.1, 0.6, 0.51])
def test_alpha_bounds(alpha):
    with pytest.raises(ConfigError):
        radii([0.0], [1.0], [1.0], alpha)


def test_alpha_overlap_override():
    assert radii([0.0], [10.0], [10.0], 0.6, allow_overlap=True)[0] == pytest.approx(6.0)


def test_radius_at_most_half_d():
    rng = np.random.default_rng(5)
    for mode in ("perspective", "constant"):
        for _ in range(20):
            xy = rng.uniform(0, 100, (int(rng.integers(2, 80)), 2))
            ps = PointSet(xy, (100, 100))
            b = sampling_bounds(ps, 0.5, mode)
            assert np.all(b.radius <= 0.5 * ps.nn_dist)


def test_bounds_policy_for_tiny_sets():
    b = sampling_bounds(PointSet([(3.0, 3.0)], (8, 8)), 0.4)
    assert b.radius.tolist() == [0.0]
    b = sampling_bounds(PointSet(np.zeros((0, 2)), (8, 8)), 0.4)
    assert len(b.radius) == 0


def test_duplicates_never_noised():
    ps = PointSet([(2.0, 2.0), (2.0, 2.0), (6.0, 6.0)], (10, 10))
    b = sampling_bounds(ps, 0.4, "constant")
    assert b.radius[:2].tolist() == [0.0, 0.0]


def test_unknown_mode():
    with pytest.raises(ConfigError):
        sampling_bounds(PointSet([(1, 1), (2, 2)], (4, 4)), 0.4, "median")


# -- sampler -------------------------------------------------------------------


def test_zero_radius_offset():
    s = sample_offset(substream(0), 0.0)
    assert s.offset == (0.0, 0.0)
    assert s.magnitude == 0.0


def test_offset_composition():
    assert compose_offset(0.0, 2.5).tolist() == [2.5, 0.0]
    ox, oy = compose_offset(math.pi / 2, 1.0)
    assert abs(ox) < 1e-12 and abs(oy - 1.0) < 1e-12


def test_sample_offset_fields_consistent():
    rng = substream(3)
    for _ in range(100):
        s = sample_offset(rng, 2.0)
        assert 0 <= s.direction < 2 * math.pi
        assert 0 <= s.magnitude <= 2.0
        assert s.offset[0] == pytest.approx(s.magnitude * math.cos(s.direction))
        assert math.hypot(*s.offset) == pytest.approx(s.magnitude)


def test_sampler_distribution_small():
    r = np.ones(100_000)
    o = sample_offsets(substream(1), r)
    mag = np.hypot(o[:, 0], o[:, 1])
    assert mag.max() <= 1.0 + 1e-12
    ang = np.mod(np.arctan2(o[:, 1], o[:, 0]), 2 * np.pi)
    assert chi_square_uniform(ang, 0, 2 * np.pi, 36)[1] > 1e-3
    assert chi_square_uniform(mag, 0, 1, 20)[1] > 1e-3


def test_substreams():
    a = substream(7, 3, 0).random(4)
    assert np.array_equal(a, substream(7, 3, 0).random(4))
    assert not np.array_equal(a, substream(7, 3, 1).random(4))
    assert not np.array_equal(a, substream(8, 3, 0).random(4))


# -- noised sets ---------------------------------------------------------------


def _scene(seed, n=30, size=(64, 64)):
    rng = np.random.default_rng(seed)
    return PointSet(rng.uniform(0, 1, (n, 2)) * (np.array(size) - 1), size)


def test_zero_radius_is_identity():
    ps = _scene(0)
    b = SamplingBounds(0.4, np.zeros(64), np.zeros(len(ps)))
    ns = make_noised(ps, b, substream(0))
    assert ns.noised == ps
    assert not ns.clamped.any()


def test_noise_within_radius_and_deterministic():
    ps = _scene(1)
    b = sampling_bounds(ps, 0.4, "perspective")
    a = make_noised(ps, b, substream(9, 0, 0))
    c = make_noised(ps, b, substream(9, 0, 0))
    assert np.array_equal(a.noised.xy, c.noised.xy)
    assert np.all(np.hypot(*a.offsets.T) <= b.radius)
    raw = ps.xy + a.offsets
    assert np.array_equal(a.noised.xy[~a.clamped], raw[~a.clamped])
    # effective displacement never exceeds the raw draw
    assert np.all(np.hypot(*a.effective.T) <= np.hypot(*a.offsets.T) + 1e-12)


def test_clamped_points_stay_inside():
    ps = PointSet([(0.0, 0.0), (9.0, 9.0), (0.0, 9.0), (9.0, 0.0)], (10, 10))
    b = SamplingBounds(0.5, np.full(10, 9.0), np.full(4, 4.5))
    ns = make_noised(ps, b, substream(2))
    assert ns.clamped.any()
    assert np.all((ns.noised.xy >= 0) & (ns.noised.xy <= 9))
