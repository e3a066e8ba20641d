"""Lifted input dynamics on the refined grid and compact sigmoid surrogates."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigurationError, StateError
from .spatial import EigenfunctionField
from .spectral import EigenvalueSet, ModeMatrix, ridge_gram_solve
from .systems import DynSystem, SimGrid

Array = np.ndarray


@dataclass(frozen=True)
class LiftedInputField:
    """Samples of grad(Phi) . G(x) on the interpolation grid.

    ``values`` has shape (n_phi, input_dim, g1, g2).
    """

    grid: SimGrid
    values: Array
    valid_mask: Array

    @property
    def n_phi(self) -> int:
        return self.values.shape[0]

    @property
    def input_dim(self) -> int:
        return self.values.shape[1]

    def interpolant(self) -> Callable[[Array], Array]:
        """Linear look-up-table evaluation x -> (n_phi, input_dim)."""
        nphi, p = self.values.shape[:2]
        data = np.moveaxis(self.values.reshape(nphi * p, *self.values.shape[2:]), 0, -1)
        interp = RegularGridInterpolator(
            tuple(self.grid.axes()), data, method="linear", bounds_error=False, fill_value=None
        )

        def gamma(x):
            return interp(np.atleast_2d(np.asarray(x, dtype=float)))[0].reshape(nphi, p)

        return gamma

    def training_samples(self):
        """(inputs (n, m), targets (n, n_phi*input_dim)) over unmasked nodes."""
        pts = self.grid.points()
        keep = self.valid_mask.ravel()
        flat = self.values.reshape(self.n_phi * self.input_dim, -1).T
        return pts[keep], flat[keep]


def lifted_input_samples(field: EigenfunctionField, sys: DynSystem) -> LiftedInputField:
    """Per-node product of the eigenfunction gradient with the input field."""
    if field.gradient is None:
        raise StateError("field gradient not computed; run gradient_central_diff first")
    if sys.input_dim == 0:
        raise ConfigurationError(f"{sys.name} has no inputs")
    pts = field.grid.points()
    g = sys.input_field(pts).reshape(pts.shape[0], sys.state_dim, sys.input_dim)
    g = np.moveaxis(g.reshape(tuple(field.grid.counts) + (sys.state_dim, sys.input_dim)), (-2, -1), (0, 1))
    values = np.einsum("fmij,mpij->fpij", field.gradient, g)
    return LiftedInputField(grid=field.grid, values=values, valid_mask=field.valid_mask.copy())


def _sigmoid(z: Array) -> Array:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class SigmoidSurrogate:
    """Single-hidden-layer sigmoid model  W2 sigma(w1.T x + b1) + B2.

    Inputs are normalized per dimension (center/halfspan stored with the
    model); the output reshapes to (n_phi, input_dim).
    """

    w1: Array  # (m, h)
    b1: Array  # (h,)
    w2: Array  # (q, h)
    b2: Array  # (q,)
    out_shape: tuple
    center: Array
    halfspan: Array

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigurationError(f"surrogate parameter {name} is not finite")

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def features(self, x: Array) -> Array:
        xn = (np.atleast_2d(np.asarray(x, dtype=float)) - self.center) / self.halfspan
        return _sigmoid(xn @ self.w1 + self.b1)

    def evaluate(self, x) -> Array:
        """Surrogate value at a single state, shape out_shape."""
        s = self.features(x)[0]
        return (self.w2 @ s + self.b2).reshape(self.out_shape)

    def evaluate_batch(self, x: Array) -> Array:
        s = self.features(x)
        return s @ self.w2.T + self.b2

    def to_dict(self) -> dict:
        return {
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
            "out_shape": list(self.out_shape),
            "center": self.center.tolist(),
            "halfspan": self.halfspan.tolist(),
        }


def _ridge_output_fit(features: Array, targets: Array, weight: float):
    """Ridge fit with an unpenalized bias (centering trick)."""
    fbar = features.mean(axis=0)
    tbar = targets.mean(axis=0)
    fc = (features - fbar).T  # (h, n)
    w2 = ridge_gram_solve(fc, (targets - tbar).T, weight).T  # (q, h)
    b2 = tbar - w2 @ fbar
    return w2, b2


def fit_sigmoid_surrogate(
    samples: LiftedInputField,
    hidden: int = 15,
    seed: int = 0,
    ridge_weight: float = 1.0e-8,
    refine_steps: int = 2000,
    learning_rate: float = 1.0e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
) -> tuple:
    """Two-stage surrogate fit; returns (surrogate, info).

    Stage (a) draws random sigmoid features and ridge-solves the linear
    output layer; stage (b) optionally refines all parameters with
    adaptive-moment gradient descent on the mean squared error.  A
    divergent refinement (loss above 10x its start) returns the stage-(a)
    model with a warning.
    """
    if hidden < 1:
        raise ConfigurationError("hidden unit count must be >= 1")
    x, y = samples.training_samples()
    if x.shape[0] <= hidden:
        raise ConfigurationError("sample count must exceed the hidden unit count")
    m = x.shape[1]
    center = 0.5 * (x.max(axis=0) + x.min(axis=0))
    halfspan = np.maximum(0.5 * (x.max(axis=0) - x.min(axis=0)), 1e-12)
    rng = np.random.default_rng(seed)
    w1 = rng.uniform(-3.0, 3.0, size=(m, hidden))
    b1 = rng.uniform(-3.0, 3.0, size=hidden)

    xn = (x - center) / halfspan
    feats = _sigmoid(xn @ w1 + b1)
    w2, b2 = _ridge_output_fit(feats, y, ridge_weight)

    def mse(w1_, b1_, w2_, b2_):
        pred = _sigmoid(xn @ w1_ + b1_) @ w2_.T + b2_
        return float(np.mean((pred - y) ** 2))

    stage_a = mse(w1, b1, w2, b2)
    info = {"stage_a_mse": stage_a, "stage_b_mse": stage_a, "refined": False}
    params = [w1.copy(), b1.copy(), w2.copy(), b2.copy()]

    if refine_steps > 0:
        theta = [p.copy() for p in params]
        mom = [np.zeros_like(p) for p in theta]
        vel = [np.zeros_like(p) for p in theta]
        best = [p.copy() for p in theta]
        best_loss = stage_a
        n, q = y.shape[0], y.shape[1]
        diverged = False
        for step in range(1, refine_steps + 1):
            s = _sigmoid(xn @ theta[0] + theta[1])
            pred = s @ theta[2].T + theta[3]
            err = pred - y
            loss = float(np.mean(err**2))
            if loss < best_loss:
                best_loss = loss
                best = [p.copy() for p in theta]
            if not np.isfinite(loss) or (loss > 10.0 * stage_a and step > 10):
                diverged = True
                break
            dpred = 2.0 * err / (n * q)
            grads = [None] * 4
            grads[2] = dpred.T @ s
            grads[3] = dpred.sum(axis=0)
            ds = dpred @ theta[2]
            dz = ds * s * (1.0 - s)
            grads[0] = xn.T @ dz
            grads[1] = dz.sum(axis=0)
            for i in range(4):
                mom[i] = beta1 * mom[i] + (1 - beta1) * grads[i]
                vel[i] = beta2 * vel[i] + (1 - beta2) * grads[i] ** 2
                mhat = mom[i] / (1 - beta1**step)
                vhat = vel[i] / (1 - beta2**step)
                theta[i] = theta[i] - learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
        if diverged:
            warnings.warn("surrogate refinement diverged; returning the random-feature model")
        elif best_loss < stage_a:
            params = best
            info["refined"] = True
        info["stage_b_mse"] = min(best_loss, stage_a)

    surrogate = SigmoidSurrogate(
        w1=params[0], b1=params[1], w2=params[2], b2=params[3],
        out_shape=(samples.n_phi, samples.input_dim),
        center=center, halfspan=halfspan,
    )
    info["final_mse"] = mse(*params)
    return surrogate, info


@dataclass(frozen=True)
class SpectralModel:
    """Complete Koopman predictor: eigenvalues, modes, field, input coupling."""

    eigs: EigenvalueSet
    modes: ModeMatrix
    field: Optional[EigenfunctionField] = None
    gamma: Optional[Callable[[Array], Array]] = None  # x -> (n_phi, input_dim)
    hull: Optional[SimGrid] = None

    def phi_at(self, x) -> Array:
        if self.field is None:
            raise StateError("no eigenfunction field attached to this model")
        return self.field.evaluate(x)[0]


def extend_field_with_constant(field: EigenfunctionField) -> EigenfunctionField:
    """Prepend the constant (conservative) eigenfunction row to a field."""
    ones = np.ones((1,) + field.values.shape[1:])
    values = np.concatenate([ones, field.values], axis=0)
    gradient = field.gradient
    if gradient is not None:
        zeros = np.zeros((1,) + gradient.shape[1:])
        gradient = np.concatenate([zeros, gradient], axis=0)
    return replace(field, values=values, gradient=gradient)


def predict_lpv(
    model: SpectralModel,
    phi_init: Array,
    u_samples: Optional[Array],
    dt: float,
    n_samples: Optional[int] = None,
) -> tuple:
    """Integrate the lifted dynamics phi' = Lambda phi + Gamma(x_hat) u.

    Heun steps with zero-order-hold inputs; the state estimate
    ``x_hat = C_ref phi`` feeds the state-dependent input coupling each
    stage.  Returns (states (m, N), phi (n_phi, N)); leaving the training
    hull warns once and continues.
    """
    lam = model.eigs.lam_matrix()
    c = model.modes.c_ref
    if u_samples is None:
        if n_samples is None:
            raise ConfigurationError("n_samples required for autonomous prediction")
        u_samples = np.zeros((0, n_samples))
    u_samples = np.atleast_2d(np.asarray(u_samples, dtype=float))
    n = u_samples.shape[1]
    use_input = u_samples.shape[0] > 0 and model.gamma is not None

    phi = np.asarray(phi_init, dtype=float).copy()
    phis = np.empty((lam.shape[0], n))
    xs = np.empty((c.shape[0], n))
    phis[:, 0] = phi
    xs[:, 0] = c @ phi
    warned = False

    def rhs(p, u):
        out = lam @ p
        if use_input:
            out = out + model.gamma(c @ p) @ u
        return out

    for k in range(1, n):
        u = u_samples[:, k - 1]
        k1 = rhs(phi, u)
        k2 = rhs(phi + dt * k1, u)
        phi = phi + 0.5 * dt * (k1 + k2)
        phis[:, k] = phi
        xs[:, k] = c @ phi
        if model.hull is not None and not warned:
            if not model.hull.contains(xs[:, k][None, :])[0]:
                warnings.warn("predicted state left the training hull; prediction continues")
                warned = True
    return xs, phis


def sum_mean_absolute_error(x_true: Array, x_pred: Array) -> float:
    """Sum over states of the mean absolute prediction error."""
    return float(np.sum(np.mean(np.abs(x_true - x_pred), axis=1)))


def fit_observable_projection(
    observables: Array, phi: Array, u: Optional[Array], ridge_weight: float = 1.0e-8
) -> Array:
    """Ridge-fit observables onto the augmented regressors [phi; u].

    Returns W with observables ~= W @ [phi; u]; pass ``u=None`` for an
    autonomous projection onto the eigenfunctions alone.
    """
    reg = phi if u is None else np.vstack([phi, np.atleast_2d(u)])
    return ridge_gram_solve(reg, np.atleast_2d(observables), ridge_weight).T
