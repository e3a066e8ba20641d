"""Lifted input dynamics, sigmoid surrogates, and LPV prediction."""

import warnings

import numpy as np
import pytest
import scipy.linalg

from koopeig import (
    DynSystem,
    EigenvalueSet,
    LiftedInputField,
    SimGrid,
    SpectralModel,
    fit_observable_projection,
    fit_sigmoid_surrogate,
    get_system,
    gradient_central_diff,
    lifted_input_samples,
    predict_lpv,
    sum_mean_absolute_error,
)
from koopeig.inputdyn import extend_field_with_constant
from koopeig.spatial import EigenfunctionField
from koopeig.spectral import ModeMatrix


def _field(grid, funcs):
    pts = grid.points()
    values = np.stack([f(pts[:, 0], pts[:, 1]).reshape(grid.counts) for f in funcs])
    return gradient_central_diff(
        EigenfunctionField(grid=grid, values=values, smoothing=1.0,
                           valid_mask=np.ones(tuple(grid.counts), dtype=bool))
    )


GRID = SimGrid(ranges=((-1, 1), (-1, 1)), counts=(25, 25))


def _closure_lift_field():
    return _field(GRID, [lambda x1, x2: x1, lambda x1, x2: x1**2,
                         lambda x1, x2: x2 - 1.25 * x1**2])


def test_lifted_samples_zero_input_field():
    base = get_system("closure")
    sys_ = DynSystem("zerog", 2, 2, base.drift,
                     lambda x: np.zeros(np.shape(x)[:-1] + (2, 2)),
                     known_fixed_points=((0.0, 0.0),))
    lifted = lifted_input_samples(_closure_lift_field(), sys_)
    assert lifted.values.shape == (3, 2, 25, 25)
    assert np.all(lifted.values == 0.0)


def test_lifted_samples_linear_eigenfunction_constant_row():
    sys_ = DynSystem("g10", 2, 1, get_system("closure").drift,
                     lambda x: np.broadcast_to(np.array([[1.0], [0.0]]), np.shape(x)[:-1] + (2, 1)))
    lifted = lifted_input_samples(_field(GRID, [lambda x1, x2: x1]), sys_)
    assert np.allclose(lifted.values[0, 0], 1.0, atol=1e-12)


def test_lifted_samples_analytic_closure_gamma():
    # grad of (x1, x1^2, x2 - 1.25 x1^2) times identity G
    lifted = lifted_input_samples(_closure_lift_field(), get_system("closure_controlled"))
    pts = GRID.points()
    x1 = pts[:, 0].reshape(25, 25)
    assert np.allclose(lifted.values[0, 0], 1.0, atol=1e-12)
    assert np.allclose(lifted.values[0, 1], 0.0, atol=1e-12)
    assert np.allclose(lifted.values[1, 0], 2 * x1, atol=1e-12)
    assert np.allclose(lifted.values[2, 0], -2.5 * x1, atol=1e-12)
    assert np.allclose(lifted.values[2, 1], 1.0, atol=1e-12)


def test_lifted_samples_bilinear_in_gradient_and_input():
    field = _closure_lift_field()
    base = lifted_input_samples(field, get_system("closure_controlled"))
    scaled_field = _field(GRID, [lambda x1, x2: 2.0 * x1, lambda x1, x2: 2.0 * x1**2,
                                 lambda x1, x2: 2.0 * (x2 - 1.25 * x1**2)])
    sys3 = DynSystem("g3", 2, 2, get_system("closure").drift,
                     lambda x: np.broadcast_to(3.0 * np.eye(2), np.shape(x)[:-1] + (2, 2)),
                     known_fixed_points=((0.0, 0.0),))
    both = lifted_input_samples(scaled_field, sys3)
    assert np.allclose(both.values, 6.0 * base.values, atol=1e-10)


def test_interpolant_matches_nodes():
    lifted = lifted_input_samples(_closure_lift_field(), get_system("closure_controlled"))
    gamma = lifted.interpolant()
    out = gamma([0.5, -0.25])
    assert out.shape == (3, 2)
    assert out[1, 0] == pytest.approx(1.0, abs=1e-9)  # 2 x1 at x1 = 0.5


def test_sigmoid_surrogate_constant_target_bias_only():
    vals = np.full((2, 1, 25, 25), 1.7)
    vals[1] = -0.4
    lifted = LiftedInputField(grid=GRID, values=vals, valid_mask=np.ones((25, 25), dtype=bool))
    sur, info = fit_sigmoid_surrogate(lifted, hidden=8, seed=0, refine_steps=0)
    assert info["stage_a_mse"] < 1e-10
    assert np.allclose(sur.b2 + sur.w2 @ np.full(8, 0.5) * 0, sur.b2)  # bias carries the level
    assert np.allclose(sur.evaluate([0.1, 0.2]).ravel(), [1.7, -0.4], atol=1e-5)


def test_sigmoid_surrogate_recovers_planted_sigmoid():
    rng = np.random.default_rng(9)
    pts = GRID.points()
    w = np.array([1.3, -0.8])
    z = 1.0 / (1.0 + np.exp(-(pts @ w - 0.2)))
    vals = z.reshape(1, 1, 25, 25)
    lifted = LiftedInputField(grid=GRID, values=vals, valid_mask=np.ones((25, 25), dtype=bool))
    sur, info = fit_sigmoid_surrogate(lifted, hidden=15, seed=3, refine_steps=3000)
    assert info["final_mse"] <= 1e-4


def test_sigmoid_refinement_never_worse_than_stage_a():
    pts = GRID.points()
    vals = np.sin(2 * pts[:, 0]).reshape(1, 1, 25, 25)
    lifted = LiftedInputField(grid=GRID, values=vals, valid_mask=np.ones((25, 25), dtype=bool))
    _, info = fit_sigmoid_surrogate(lifted, hidden=10, seed=1, refine_steps=500)
    assert info["stage_b_mse"] <= info["stage_a_mse"]


def test_sigmoid_divergent_refinement_returns_stage_a():
    pts = GRID.points()
    vals = np.cos(pts[:, 0]).reshape(1, 1, 25, 25)
    lifted = LiftedInputField(grid=GRID, values=vals, valid_mask=np.ones((25, 25), dtype=bool))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sur_div, info_div = fit_sigmoid_surrogate(lifted, hidden=6, seed=2,
                                                  refine_steps=400, learning_rate=1e4)
    assert any("diverged" in str(w.message) for w in caught)
    sur_a, info_a = fit_sigmoid_surrogate(lifted, hidden=6, seed=2, refine_steps=0)
    assert info_div["final_mse"] == pytest.approx(info_a["stage_a_mse"])
    assert np.array_equal(sur_div.w2, sur_a.w2)


def _exact_closure_model(with_gamma=True, hull=None):
    eigs = EigenvalueSet.from_pairs([[-0.1, 0.0], [-0.2, 0.0], [-1.0, 0.0]],
                                    fixed=[True, True, True])
    c = np.array([[1.0, 0.0, 0.0], [0.0, 1.25, 1.0]])  # x1 = p1, x2 = 1.25 p2 + p3
    modes = ModeMatrix(c_ref=c, ridge_weight=0.0)

    def gamma(x):
        x1 = x[0]
        return np.array([[1.0, 0.0], [2 * x1, 0.0], [-2.5 * x1, 1.0]])

    return SpectralModel(eigs, modes, None, gamma if with_gamma else None, hull=hull)


def _lift(x):
    return np.array([x[0], x[0] ** 2, x[1] - 1.25 * x[0] ** 2])


def test_predict_lpv_autonomous_reduces_to_linear_flow():
    model = _exact_closure_model(with_gamma=False)
    phi0 = _lift(np.array([0.8, -0.6]))
    lam = model.eigs.lam_matrix()

    def max_err(dt, n):
        xs, _ = predict_lpv(model, phi0, None, dt=dt, n_samples=n)
        t = np.arange(n) * dt
        exact = np.stack([model.modes.c_ref @ scipy.linalg.expm(lam * tk) @ phi0 for tk in t], axis=1)
        return np.max(np.abs(xs - exact))

    coarse = max_err(0.01, 400)
    fine = max_err(0.005, 800)
    assert coarse < 1e-5  # integrator-error scale
    assert coarse / fine == pytest.approx(4.0, rel=0.25)  # second-order in dt


def test_predict_lpv_exact_lift_matches_plant_simulation():
    from koopeig import piecewise_constant_input, simulate_driven

    sys_ = get_system("closure_controlled")
    dt, n = 0.01, 600
    u = piecewise_constant_input(2, 0.4, 1.0, (n - 1) * dt, dt, seed=12)
    x0 = np.array([0.6, 0.4])
    x_true = simulate_driven(sys_, x0, u, dt)
    model = _exact_closure_model()
    xs, _ = predict_lpv(model, _lift(x0), u, dt)
    assert sum_mean_absolute_error(x_true, xs) < 1e-3


def test_predict_lpv_linear_system_matches_discrete_response():
    # identity lift of a linear system with constant input matrix
    eigs = EigenvalueSet.from_pairs([[-0.5, 0.0], [-1.5, 0.0]], fixed=[True, True])
    modes = ModeMatrix(c_ref=np.eye(2), ridge_weight=0.0)
    b = np.array([[1.0], [0.5]])
    model = SpectralModel(eigs, modes, None, lambda x: b)
    dt, n = 1e-3, 1500
    u = np.ones((1, n)) * 0.7
    xs, _ = predict_lpv(model, np.zeros(2), u, dt)
    a = eigs.lam_matrix()
    ad = scipy.linalg.expm(a * dt)
    bd = np.linalg.solve(a, (ad - np.eye(2)) @ b)
    x = np.zeros(2)
    exact = np.zeros((2, n))
    for k in range(1, n):
        x = ad @ x + bd @ u[:, k - 1]
        exact[:, k] = x
    assert np.max(np.abs(xs - exact)) < 1e-6


def test_predict_rhs_linear_in_input():
    model = _exact_closure_model()
    phi = _lift(np.array([0.3, -0.2]))
    lam = model.eigs.lam_matrix()
    x = model.modes.c_ref @ phi

    def rhs(u):
        return lam @ phi + model.gamma(x) @ u

    u = np.array([0.2, -0.5])
    a = 3.7
    base = rhs(np.zeros(2))
    assert np.allclose(rhs(a * u) - base, a * (rhs(u) - base), atol=1e-14)


def test_predict_lpv_warns_on_hull_exit():
    hull = SimGrid(ranges=((-0.1, 0.1), (-0.1, 0.1)), counts=(3, 3))
    model = _exact_closure_model(hull=hull)
    u = np.ones((2, 200)) * 2.0
    with pytest.warns(UserWarning, match="hull"):
        xs, _ = predict_lpv(model, _lift(np.array([0.05, 0.05])), u, 0.05)
    assert np.all(np.isfinite(xs))


def test_observable_projection_recovers_planted_weights():
    rng = np.random.default_rng(4)
    phi = rng.normal(size=(4, 300))
    u = rng.normal(size=(2, 300))
    w_true = rng.normal(size=(3, 6))
    obs = w_true @ np.vstack([phi, u])
    w = fit_observable_projection(obs, phi, u, ridge_weight=0.0)
    assert np.allclose(w, w_true, atol=1e-9)
    w_auto = fit_observable_projection(obs[:1], phi, None, ridge_weight=1e-10)
    assert w_auto.shape == (1, 4)


def test_extend_field_with_constant_adds_trivial_row():
    field = _closure_lift_field()
    ext = extend_field_with_constant(field)
    assert ext.values.shape[0] == field.values.shape[0] + 1
    assert np.all(ext.values[0] == 1.0)
    assert np.all(ext.gradient[0] == 0.0)
    out = ext.evaluate([[0.2, 0.3]])
    assert out[0, 0] == pytest.approx(1.0)
