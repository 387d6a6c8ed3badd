"""Tests for the backward regression and quadrature solvers."""

import numpy as np
import pytest

from qgbsde.errors import (DomainTooSmall, InvalidParameters, PicardDivergence,
                           RejectedModel)
from qgbsde.model import (ModelSpec, Partition, make_brownian, make_discount,
                          make_quadratic)
from qgbsde.oracle import cole_hopf_from_model
from qgbsde.regression import RegressionBasis
from qgbsde.sde import PathEnsemble, simulate_forward
from qgbsde.solver import (compute_zbar, project_window_average,
                           solve_backward_regression, solve_quadrature_1d)
from qgbsde.truncation import truncate_driver

GLOBAL2 = RegressionBasis(kind="global_polynomial", degree=2)


def _brownian_ensemble(n_steps=8, n_paths=20000, seed=3):
    model = make_brownian()
    part = Partition.uniform(model.T, n_steps)
    return model, simulate_forward(model, part, n_paths, seed=seed)


def test_terminal_slice_is_exact():
    model, ens = _brownian_ensemble(n_steps=4, n_paths=500)
    sol = solve_backward_regression(model, ens, GLOBAL2)
    np.testing.assert_array_equal(sol.Y[:, -1], ens.states[:, -1, 0])


def test_brownian_identity_solution():
    # exact solution Y = X, Z = 1; affine conditional means live inside the
    # basis, so only sampling noise separates the estimate from the truth
    model, ens = _brownian_ensemble()
    sol = solve_backward_regression(model, ens, GLOBAL2)
    err_y = np.sqrt(np.mean((sol.Y - ens.states[:, :, 0]) ** 2, axis=0))
    assert err_y.max() < 5e-2
    err_z = np.sqrt(np.mean((sol.Z[:, :, 0] - 1.0) ** 2, axis=0))
    assert err_z.max() < 2e-1
    assert abs(sol.y0) < 2e-2
    assert abs(sol.z0[0] - 1.0) < 5e-2


def test_constant_terminal_propagates_exactly():
    model = make_brownian(terminal="constant", kappa=0.7)
    part = Partition.uniform(model.T, 6)
    ens = simulate_forward(model, part, 2000, seed=1)
    sol = solve_backward_regression(model, ens, GLOBAL2)
    np.testing.assert_allclose(sol.Y, 0.7, atol=1e-8)
    np.testing.assert_allclose(sol.Z, 0.0, atol=1e-7)


def test_discount_matches_scheme_product():
    # with a constant target the regression is exact and each implicit step
    # multiplies by the cubic Picard polynomial of r dt, so the scheme value
    # is known in closed form; the continuous limit exp(-r T) is approached
    # at first order in dt
    rate, n = 0.1, 16
    model = make_discount(rate=rate)
    part = Partition.uniform(model.T, n)
    ens = simulate_forward(model, part, 1000, seed=2)
    sol = solve_backward_regression(model, ens, GLOBAL2, picard_iters=3)
    rdt = rate * model.T / n
    expected = (1.0 - rdt + rdt ** 2 - rdt ** 3) ** n
    assert sol.y0 == pytest.approx(expected, abs=1e-8)
    assert abs(sol.y0 - np.exp(-rate * model.T)) < 1e-3
    np.testing.assert_allclose(sol.Z, 0.0, atol=1e-7)


def test_more_picard_sweeps_tighten_the_implicit_step():
    rate, n = 0.4, 8
    model = make_discount(rate=rate)
    part = Partition.uniform(model.T, n)
    ens = simulate_forward(model, part, 500, seed=2)
    rdt = rate * model.T / n
    fixed_point = ((1.0 / (1.0 + rdt)) ** n)
    errs = []
    for k in (1, 2, 4):
        sol = solve_backward_regression(model, ens, GLOBAL2, picard_iters=k)
        errs.append(abs(sol.y0 - fixed_point))
    assert errs[0] > errs[1] > errs[2]


def test_raw_quadratic_driver_is_rejected():
    model = make_quadratic()
    part = Partition.uniform(model.T, 4)
    ens = simulate_forward(model, part, 500, seed=0)
    with pytest.raises(RejectedModel):
        solve_backward_regression(model, ens, GLOBAL2)
    with pytest.raises(RejectedModel):
        solve_quadrature_1d(model, part)


def test_picard_divergence_on_stiff_driver():
    # dt * f_y = 50/4 >> 1, the inner fixed point cannot contract
    model = make_discount(rate=0.1).with_driver(
        f=lambda t, x, y, z: 50.0 * y, driver_y_lipschitz=50.0)
    part = Partition.uniform(model.T, 4)
    ens = simulate_forward(model, part, 500, seed=0)
    with pytest.raises(PicardDivergence) as exc:
        solve_backward_regression(model, ens, GLOBAL2, picard_iters=4)
    assert exc.value.step is not None


def test_y_clamp_validation_and_effect():
    model, ens = _brownian_ensemble(n_steps=4, n_paths=500)
    with pytest.raises(InvalidParameters):
        solve_backward_regression(model, ens, GLOBAL2, y_clamp=0.0)
    with pytest.raises(InvalidParameters):
        solve_backward_regression(model, ens, GLOBAL2, picard_iters=0)
    sol = solve_backward_regression(model, ens, GLOBAL2, y_clamp=0.01)
    assert np.abs(sol.Y[:, :-1]).max() <= 0.01 + 1e-15


def test_dimension_mismatch_is_rejected():
    model2 = ModelSpec(
        name="planar", m=2, d=2, x0=np.zeros(2), T=1.0,
        b=lambda t, x: np.zeros_like(x),
        sigma=lambda t, x: np.broadcast_to(np.eye(2), x.shape + (2,)).copy(),
        f=lambda t, x, y, z: np.zeros(x.shape[0]),
        g=lambda x: x.sum(axis=1),
        driver_z_lipschitz=0.0)
    _, ens = _brownian_ensemble(n_steps=4, n_paths=500)
    with pytest.raises(InvalidParameters):
        solve_backward_regression(model2, ens, GLOBAL2)


def test_compute_zbar_projection():
    model, ens = _brownian_ensemble()
    sol = solve_backward_regression(model, ens, GLOBAL2)
    assert sol.Zbar is None
    sol2 = compute_zbar(sol, ens, GLOBAL2)
    assert sol.Zbar is None  # original untouched
    assert sol2.Zbar.shape == sol.Z.shape
    # Z is near-constant 1, so its state projection has to stay near 1
    assert np.sqrt(np.mean((sol2.Zbar - 1.0) ** 2)) < 5e-2


def test_project_window_average_on_nested_grids():
    model = make_brownian()
    fine = Partition.uniform(model.T, 16)
    coarse = Partition.uniform(model.T, 4)
    ens_f = simulate_forward(model, fine, 20000, seed=5)
    sol_f = solve_backward_regression(model, ens_f, GLOBAL2)
    proj = project_window_average(sol_f, ens_f, coarse, GLOBAL2)
    assert proj.shape == (20000, 4, 1)
    assert np.sqrt(np.mean((proj - 1.0) ** 2)) < 5e-2


def test_project_window_average_rejects_non_nested():
    from qgbsde.errors import GridMismatch
    model = make_brownian()
    fine = Partition.uniform(model.T, 16)
    ens_f = simulate_forward(model, fine, 1000, seed=5)
    sol_f = solve_backward_regression(model, ens_f, GLOBAL2)
    with pytest.raises(GridMismatch):
        project_window_average(sol_f, ens_f, Partition.uniform(model.T, 5), GLOBAL2)


def test_quadrature_brownian_identity_is_exact():
    model = make_brownian()
    y0, z0 = solve_quadrature_1d(model, Partition.uniform(model.T, 8))
    assert abs(y0) < 1e-6
    assert abs(z0 - 1.0) < 1e-6


def test_quadrature_discount_value():
    model = make_discount(rate=0.1)
    n = 16
    y0, z0 = solve_quadrature_1d(model, Partition.uniform(model.T, n))
    rdt = 0.1 / n
    assert y0 == pytest.approx((1.0 - rdt + rdt ** 2 - rdt ** 3) ** n, abs=1e-7)
    assert abs(z0) < 1e-7


def test_quadrature_matches_closed_form_reference():
    model = truncate_driver(make_quadratic(), level=6.0)
    ref = cole_hopf_from_model(make_quadratic())
    y0, z0 = solve_quadrature_1d(model, Partition.uniform(model.T, 32))
    assert abs(y0 - ref.y0) < 1e-4
    assert abs(z0 - ref.z0) < 1e-2  # z carries the larger time-grid bias


def test_quadrature_domain_guard():
    model = truncate_driver(make_quadratic(), level=6.0)
    with pytest.raises(DomainTooSmall):
        solve_quadrature_1d(model, Partition.uniform(model.T, 8), space_bound=0.5)
    with pytest.raises(InvalidParameters):
        solve_quadrature_1d(model, Partition.uniform(model.T, 8), space_nodes=4)


def test_solver_is_deterministic():
    model, ens = _brownian_ensemble(n_steps=4, n_paths=2000)
    a = solve_backward_regression(model, ens, GLOBAL2)
    b = solve_backward_regression(model, ens, GLOBAL2)
    assert np.array_equal(a.Y, b.Y)
    assert np.array_equal(a.Z, b.Z)
