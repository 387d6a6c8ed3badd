import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qgbsde import (InvalidParameters, make_quadratic, smooth_clamp,
                    smooth_clamp_grad, truncate_driver)


def test_identity_region():
    assert smooth_clamp(5.0, 3.0) == 3.0
    assert smooth_clamp(5.0, -3.0) == -3.0
    assert smooth_clamp(5.0, 5.0) == 5.0
    assert smooth_clamp_grad(5.0, 2.0) == 1.0


def test_ramp_values():
    # quarter-polynomial ramp on [n, n+2]
    assert smooth_clamp(5.0, 6.0) == pytest.approx(5.75, abs=1e-15)
    assert smooth_clamp(5.0, 6.0) == pytest.approx(23.0 / 4.0, abs=1e-15)
    assert smooth_clamp_grad(5.0, 6.0) == pytest.approx(0.5, abs=1e-15)
    assert smooth_clamp(3.0, 4.0) == pytest.approx(3.75, abs=1e-15)


def test_saturation():
    assert smooth_clamp(5.0, 10.0) == 6.0
    assert smooth_clamp(5.0, -10.0) == -6.0
    assert smooth_clamp_grad(5.0, 7.0) == 0.0
    assert smooth_clamp_grad(5.0, 1e9) == 0.0


def test_vector_arguments():
    out = smooth_clamp(3.0, np.array([1.0, -1.0]))
    np.testing.assert_array_equal(out, [1.0, -1.0])
    out = smooth_clamp(3.0, np.array([10.0, -10.0]))
    np.testing.assert_array_equal(out, [4.0, -4.0])
    out = smooth_clamp(3.0, np.array([[4.0, 0.0]]))
    np.testing.assert_allclose(out, [[3.75, 0.0]], atol=1e-15)
    assert out.shape == (1, 2)


def test_c1_continuity_at_knots():
    for n in (0.0, 1.0, 2.5, 5.0):
        for knot in (n, -n, n + 2.0, -(n + 2.0)):
            lo, hi = knot - 1e-9, knot + 1e-9
            assert abs(smooth_clamp(n, hi) - smooth_clamp(n, lo)) < 1e-8
            assert abs(smooth_clamp_grad(n, hi) - smooth_clamp_grad(n, lo)) < 1e-8
        # value continuity to full precision at the knot itself
        assert smooth_clamp(n, n) == pytest.approx(n, abs=1e-12)
        assert smooth_clamp(n, n + 2.0) == pytest.approx(n + 1.0, abs=1e-12)
        assert smooth_clamp_grad(n, n) == pytest.approx(1.0, abs=1e-12)
        assert smooth_clamp_grad(n, n + 2.0) == pytest.approx(0.0, abs=1e-12)


def test_envelope_and_lipschitz_bulk():
    rng = np.random.default_rng(0)
    z = rng.uniform(-50.0, 50.0, 10 ** 6)
    for n in (0.0, 1.5, 5.0):
        h = smooth_clamp(n, z)
        assert np.all(np.abs(h) <= np.minimum(np.abs(z), n + 1.0) + 1e-12)
        assert np.all(np.abs(smooth_clamp_grad(n, z)) <= 1.0 + 1e-12)
        # sampled difference quotients never exceed 1
        order = np.argsort(z)
        dz = np.diff(z[order])
        dh = np.diff(h[order])
        mask = dz > 1e-9
        assert np.max(np.abs(dh[mask] / dz[mask])) <= 1.0 + 1e-9


@given(st.floats(0.0, 20.0), st.floats(-100.0, 100.0))
@settings(max_examples=300, deadline=None)
def test_odd_and_bounded(n, z):
    h = smooth_clamp(n, z)
    assert smooth_clamp(n, -z) == pytest.approx(-h, abs=1e-12)
    assert abs(h) <= min(abs(z), n + 1.0) + 1e-12
    assert 0.0 <= smooth_clamp_grad(n, z) <= 1.0


@given(st.floats(0.0, 20.0), st.floats(-50.0, 50.0))
@settings(max_examples=300, deadline=None)
def test_grad_matches_finite_difference(n, z):
    h = 1e-6
    fd = (smooth_clamp(n, z + h) - smooth_clamp(n, z - h)) / (2 * h)
    # away from the knots the clamp is polynomial, so central differences
    # are exact to O(h^2); skip the knot neighborhoods
    if min(abs(abs(z) - n), abs(abs(z) - (n + 2.0))) > 1e-3:
        assert smooth_clamp_grad(n, z) == pytest.approx(fd, abs=1e-6)


def test_level_validation():
    with pytest.raises(InvalidParameters):
        smooth_clamp(-1.0, 0.0)
    with pytest.raises(InvalidParameters):
        smooth_clamp(np.nan, 0.0)
    with pytest.raises(InvalidParameters):
        smooth_clamp_grad(np.inf, 0.0)


def test_truncated_driver_values():
    model = make_quadratic(gamma=1.0)
    trunc = truncate_driver(model, 4.0)
    x = np.zeros((1, 1))
    y = np.zeros(1)
    z = np.array([[100.0]])
    # clamp saturates at 5, so f = |5|^2 / 2
    assert trunc.f(0.0, x, y, z)[0] == pytest.approx(12.5, abs=1e-12)
    z = np.array([[2.0]])
    assert trunc.f(0.0, x, y, z)[0] == pytest.approx(2.0, abs=1e-12)


def test_truncated_lipschitz_certificate():
    model = make_quadratic(gamma=1.0)
    assert model.driver_z_lipschitz is None
    for n in (1.0, 4.0):
        trunc = truncate_driver(model, n)
        cert = trunc.driver_z_lipschitz
        assert cert == pytest.approx(model.growth_M * (3.0 + 2.0 * n))
        rng = np.random.default_rng(3)
        z1 = rng.uniform(-30, 30, (4096, 1))
        z2 = rng.uniform(-30, 30, (4096, 1))
        x = np.zeros((4096, 1))
        y = np.zeros(4096)
        df = np.abs(trunc.f(0.0, x, y, z1) - trunc.f(0.0, x, y, z2))
        dz = np.abs(z1 - z2)[:, 0]
        mask = dz > 1e-9
        assert np.max(df[mask] / dz[mask]) <= cert + 1e-9


def test_truncated_gradient_chain_rule():
    model = make_quadratic(gamma=2.0)
    trunc = truncate_driver(model, 3.0)
    rng = np.random.default_rng(1)
    z = rng.uniform(-8, 8, (256, 1))
    x = np.zeros((256, 1))
    y = np.zeros(256)
    fz = trunc.f_z(0.0, x, y, z)
    h = 1e-6
    fd = (trunc.f(0.0, x, y, z + h) - trunc.f(0.0, x, y, z - h)) / (2 * h)
    near_knot = np.minimum(np.abs(np.abs(z[:, 0]) - 3.0),
                           np.abs(np.abs(z[:, 0]) - 5.0)) < 1e-3
    np.testing.assert_allclose(fz[~near_knot, 0], fd[~near_knot], atol=1e-5)


def test_truncation_metadata():
    model = make_quadratic()
    trunc = truncate_driver(model, 6.0)
    assert trunc.meta["truncation_level"] == 6.0
    assert trunc.name.endswith("_n6")
    # original model untouched
    assert model.driver_z_lipschitz is None
    assert "truncation_level" not in model.meta
