import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pointnae.annot import AnnotationError, PointSet
from pointnae.field import (
    VectorField, bilinear_sample, read_field, restore, sample, sample_torch, write_field,
)
from pointnae.noise import make_noised, sampling_bounds, substream

from oracles import manual_bilinear


def _random_field(seed, w=9, h=7):
    rng = np.random.default_rng(seed)
    return VectorField(rng.normal(size=(2, h, w)))


def test_integer_coords_exact():
    f = _random_field(0)
    assert bilinear_sample(f, 3, 5) == (f.data[0, 5, 3], f.data[1, 5, 3])


def test_midpoint_equal_weights():
    data = np.zeros((2, 2, 2))
    data[0] = [[0, 1], [2, 3]]
    assert bilinear_sample(VectorField(data), 0.5, 0.5)[0] == 1.5


def test_border_clamp():
    f = _random_field(1)
    assert bilinear_sample(f, -4, 2.0) == bilinear_sample(f, 0, 2.0)
    assert bilinear_sample(f, 100, 100) == bilinear_sample(f, 8, 6)


def test_nan_rejected():
    with pytest.raises(ValueError):
        bilinear_sample(_random_field(0), np.nan, 1.0)


def test_matches_manual_oracle():
    f = _random_field(2)
    rng = np.random.default_rng(2)
    xy = rng.uniform(-2, 11, (200, 2))
    got = sample(f, xy)
    for c in range(2):
        ref = [manual_bilinear(f.data[c].astype(np.float64), x, y) for x, y in xy]
        np.testing.assert_allclose(got[:, c], ref, rtol=0, atol=1e-12)


def test_nearest_mode():
    f = _random_field(3)
    assert sample(f, [[2.4, 3.6]], "nearest")[0].tolist() == f.data[:, 4, 2].tolist()


@settings(max_examples=50, deadline=None)
@given(st.integers(-500, 500), st.integers(-500, 500), st.floats(-1, 10), st.floats(-1, 8), st.integers(0, 1000))
def test_sampling_is_linear(a, b, x, y, seed):
    a, b = a / 100, b / 100
    f, g = _random_field(seed), _random_field(seed + 1)
    combo = VectorField(a * f.data.astype(np.float64) + b * g.data.astype(np.float64))
    lhs = sample(combo, [[x, y]])[0]
    rhs = a * sample(f, [[x, y]])[0] + b * sample(g, [[x, y]])[0]
    # combo is re-quantised to float32, hence the tolerance
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-6 * (abs(a) + abs(b)) * 5)


def test_torch_sampler_matches_numpy():
    f = _random_field(4)
    xy = np.random.default_rng(4).uniform(-3, 12, (100, 2))
    ref = sample(f, xy)
    got = sample_torch(torch.from_numpy(f.data.astype(np.float64)), torch.from_numpy(xy)).numpy()
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_torch_sampler_gradient():
    f = torch.from_numpy(_random_field(5).data.astype(np.float64)).requires_grad_()
    xy = torch.tensor([[1.3, 2.7], [7.9, 0.2], [-1.0, 3.5]], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda t: sample_torch(t, xy), (f,))


# -- restoration ---------------------------------------------------------------


def _points(seed, n=20, size=(32, 24)):
    rng = np.random.default_rng(seed)
    return PointSet(rng.uniform(0, 1, (n, 2)) * (np.array(size) - 1), size)


def test_restore_zero_field_identity():
    ps = _points(0)
    assert restore(ps, VectorField.zeros(*ps.size)) == ps


def test_restore_constant_field():
    ps = _points(1)
    data = np.zeros((2, ps.size[1], ps.size[0]))
    data[0] = 2.0
    out = restore(ps, VectorField(data))
    np.testing.assert_array_equal(out.xy[:, 0], np.minimum(ps.xy[:, 0] + 2, ps.size[0] - 1))
    np.testing.assert_array_equal(out.xy[:, 1], ps.xy[:, 1])


def test_restore_size_mismatch():
    with pytest.raises(ValueError):
        restore(_points(0), VectorField.zeros(10, 10))


def test_restore_recomputes_distances():
    ps = PointSet([(1.0, 1.0), (5.0, 1.0)], (8, 4))
    data = np.zeros((2, 4, 8))
    data[0, :, :4] = 1.0
    out = restore(ps, VectorField(data))
    assert out.nn_dist.tolist() == [3.0, 3.0]


def test_analytic_denoise_field_restores_originals():
    ps = _points(7, n=12, size=(64, 64))
    ps = PointSet(np.clip(ps.xy, 3, 60), ps.size)
    b = sampling_bounds(ps, 0.4, "constant")
    ns = make_noised(ps, b, substream(7))
    data = np.zeros((2, 64, 64))
    for (x, y), (ox, oy) in zip(ns.noised.xy, ns.effective):
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        data[0, y0 : y0 + 2, x0 : x0 + 2] = -ox
        data[1, y0 : y0 + 2, x0 : x0 + 2] = -oy
    back = restore(ns.noised, VectorField(data))
    err = np.hypot(*(back.xy - ps.xy).T)
    assert err.max() < 0.5


def test_restore_then_negated_restore_is_near_identity():
    h, w = 40, 50
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    amp, k = 0.8, 0.15
    data = np.stack([amp * np.sin(k * yy), amp * np.cos(k * xx)])
    f = VectorField(data)
    neg = VectorField(-data)
    ps = PointSet(np.random.default_rng(0).uniform(5, 35, (50, 2)), (w, h))
    twice = restore(restore(ps, f), neg)
    # each step moves by <= amp; the field varies by <= amp*k per pixel
    interp_err = amp * k * amp
    assert np.hypot(*(twice.xy - ps.xy).T).max() <= 2 * interp_err


# -- file format ---------------------------------------------------------------


def test_field_round_trip_1x1():
    f = VectorField(np.array([[[0.5]], [[-0.25]]]))
    data = write_field(f)
    assert len(data) == 16 + 1 * 1 * 2 * 4
    assert data[:4] == b"NAEF"
    back = read_field(data)
    assert back.data.tobytes() == f.data.tobytes()


def test_field_round_trip_random_bit_exact():
    f = _random_field(9, w=13, h=5)
    data = write_field(f)
    assert len(data) == 16 + 13 * 5 * 2 * 4
    assert read_field(data).data.tobytes() == f.data.tobytes()


@pytest.mark.parametrize("cut", [1, 7, 17])
def test_field_truncated(cut):
    data = write_field(_random_field(0))
    with pytest.raises(AnnotationError):
        read_field(data[:-cut])


def test_field_bad_magic():
    data = bytearray(write_field(_random_field(0)))
    data[:4] = b"NOPE"
    with pytest.raises(AnnotationError, match="magic"):
        read_field(bytes(data))


def test_field_shape_contract():
    with pytest.raises(ValueError):
        VectorField(np.zeros((3, 4, 4)))
