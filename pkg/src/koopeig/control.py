"""Eigenfunction-space estimation and optimal tracking control.

Continuous algebraic Riccati solver (Hamiltonian Schur + Newton-Kleinman),
steady-state Kalman filter with data-driven noise covariances, gain-scheduled
tracking LQR with integral action and clamping anti-windup, steady-state
allocation, and a decoupled PI baseline sharing the same limiter path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import (
    AllocationError,
    ConfigurationError,
    DesignError,
    InsufficientDataError,
    SolverError,
)
from .inputdyn import SigmoidSurrogate, _ridge_output_fit, _sigmoid
from .systems import DynSystem, heun_step

Array = np.ndarray


def _symmetrize(m: Array) -> Array:
    return 0.5 * (m + m.T)


def _psd_floor(m: Array) -> Array:
    w, v = np.linalg.eigh(_symmetrize(m))
    return _symmetrize((v * np.clip(w, 0.0, None)) @ v.T)


def _sqrtm_psd(m: Array) -> Array:
    w, v = np.linalg.eigh(_symmetrize(m))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True)
class RiccatiProblem:
    """Data of a continuous-time algebraic Riccati equation."""

    a: Array
    b: Array
    q: Array
    r: Array

    def __post_init__(self):
        a, b, q, r = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.a, self.b, self.q, self.r))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        n = a.shape[0]
        if a.shape != (n, n) or b.shape[0] != n or q.shape != (n, n) or r.shape != (b.shape[1],) * 2:
            raise ConfigurationError("Riccati problem dimensions are inconsistent")
        if not np.allclose(q, q.T, atol=1e-10) or not np.allclose(r, r.T, atol=1e-10):
            raise ConfigurationError("Q and R must be symmetric")
        if np.linalg.eigvalsh(_symmetrize(q)).min() < -1e-8:
            raise ConfigurationError("Q must be positive semidefinite")
        try:
            np.linalg.cholesky(_symmetrize(r))
        except np.linalg.LinAlgError:
            raise ConfigurationError("R must be positive definite") from None
        self._check_pbh()

    def _check_pbh(self):
        """Numerical stabilizability of (A, B) and detectability of (A, Q^1/2)."""
        n = self.a.shape[0]
        qs = _sqrtm_psd(self.q)
        for lam in np.linalg.eigvals(self.a):
            if lam.real < -1e-10:
                continue
            shifted = self.a - lam * np.eye(n)
            if np.linalg.matrix_rank(np.hstack([shifted, self.b.astype(complex)]), tol=1e-10) < n:
                raise DesignError(f"(A, B) not stabilizable: uncontrollable mode at {lam:.4g}")
            if np.linalg.matrix_rank(np.vstack([shifted, qs.astype(complex)]), tol=1e-10) < n:
                raise DesignError(f"(A, Q^1/2) not detectable: unobservable mode at {lam:.4g}")


def care_residual(p: RiccatiProblem, x: Array) -> Array:
    """A'X + XA - XBR^-1B'X + Q."""
    rinv_btx = np.linalg.solve(p.r, p.b.T @ x)
    return p.a.T @ x + x @ p.a - x @ p.b @ rinv_btx + p.q


def solve_care(p: RiccatiProblem, tol: float = 1e-9, max_newton: int = 8) -> Array:
    """Stabilizing Riccati solution via the Hamiltonian real Schur form.

    The ordered invariant subspace gives the initial solution; Newton-
    Kleinman iterations (Lyapunov solves on the closed loop) polish the
    residual below ``tol * max(1, ||Q||)``.
    """
    n = p.a.shape[0]
    rinv_bt = np.linalg.solve(p.r, p.b.T)
    ham = np.block([[p.a, -p.b @ rinv_bt], [-p.q, -p.a.T]])
    try:
        _, z, sdim = scipy.linalg.schur(ham, output="real", sort="lhp")
    except scipy.linalg.LinAlgError as err:  # pragma: no cover - rare QZ failure
        raise SolverError(f"Hamiltonian Schur decomposition failed: {err}") from None
    if sdim != n:
        raise SolverError(f"Hamiltonian ordering selected {sdim} stable directions, expected {n}")
    u1 = z[:n, :n]
    u2 = z[n:, :n]
    try:
        x = np.linalg.solve(u1.T, u2.T).T
    except np.linalg.LinAlgError:
        raise SolverError("stable invariant subspace is not a graph (singular U1)") from None
    x = _symmetrize(x)

    scale = max(1.0, np.linalg.norm(p.q))
    best, best_res = x, np.linalg.norm(care_residual(p, x))
    for _ in range(max_newton):
        if best_res <= tol * scale:
            break
        k = np.linalg.solve(p.r, p.b.T @ best)
        acl = p.a - p.b @ k
        try:
            nxt = _symmetrize(scipy.linalg.solve_continuous_lyapunov(acl.T, -(p.q + k.T @ p.r @ k)))
        except (np.linalg.LinAlgError, ValueError):
            break
        res = np.linalg.norm(care_residual(p, nxt))
        if res < best_res:
            best, best_res = nxt, res
        else:
            break
    if best_res > tol * scale:
        raise SolverError("Riccati polish did not reach tolerance", residual=float(best_res))
    k = np.linalg.solve(p.r, p.b.T @ best)
    cl = np.linalg.eigvals(p.a - p.b @ k)
    if cl.real.max() >= 0:
        raise SolverError("Riccati solution is not stabilizing", residual=float(best_res))
    return best


def lqr_gain(p: RiccatiProblem, tol: float = 1e-9) -> tuple:
    """Optimal state-feedback gain K = R^-1 B' P and the Riccati solution."""
    x = solve_care(p, tol)
    return np.linalg.solve(p.r, p.b.T @ x), x


def design_kalman(lam: Array, c: Array, q_o: Array, r_o: Array, tol: float = 1e-9) -> Array:
    """Steady-state Kalman gain from the dual Riccati equation."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    prob = RiccatiProblem(a=lam.T, b=c.T, q=np.atleast_2d(q_o), r=np.atleast_2d(r_o))
    p = solve_care(prob, tol)
    gain = p @ c.T @ np.linalg.inv(np.atleast_2d(np.asarray(r_o, dtype=float)))
    if np.linalg.eigvals(lam - gain @ c).real.max() >= 0:
        raise DesignError("observer closed loop is not Hurwitz")
    return gain


def estimate_noise_covariances(
    x_pred: Array,
    x_meas: Array,
    phi_filtered: Array,
    phi_dot_pred: Array,
    dt: float,
    literal_dt: bool = False,
) -> tuple:
    """Data-driven measurement and process noise covariances.

    Measurement: covariance of (measured - model-predicted) states.
    Process: covariance of the central-difference derivative of the
    eigenfunctions along filtered truth minus the model-predicted
    derivative.  ``literal_dt`` divides the difference by dt instead of
    2 dt.  Both outputs have their eigenvalues floored at zero.
    """
    x_pred = np.atleast_2d(np.asarray(x_pred, dtype=float))
    x_meas = np.atleast_2d(np.asarray(x_meas, dtype=float))
    phi_filtered = np.atleast_2d(np.asarray(phi_filtered, dtype=float))
    phi_dot_pred = np.atleast_2d(np.asarray(phi_dot_pred, dtype=float))
    n = x_meas.shape[1]
    if n < 10 or phi_filtered.shape[1] < 10:
        raise InsufficientDataError("need at least 10 aligned samples for covariance estimation")
    sigma_x = _psd_floor(np.cov(x_meas - x_pred, ddof=1))
    denom = dt if literal_dt else 2.0 * dt
    dphi = (phi_filtered[:, 2:] - phi_filtered[:, :-2]) / denom
    sigma_p = _psd_floor(np.cov(dphi - phi_dot_pred[:, 1:-1], ddof=1))
    return np.atleast_2d(sigma_x), np.atleast_2d(sigma_p)


def steady_state_targets(lam: Array, gamma_x: Array, c_track: Array, x_r: Array) -> tuple:
    """Solve [[Lambda, Gamma], [C, 0]] [phi_ss; u_ss] = [0; x_r]."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    gamma_x = np.atleast_2d(np.asarray(gamma_x, dtype=float))
    c_track = np.atleast_2d(np.asarray(c_track, dtype=float))
    x_r = np.atleast_1d(np.asarray(x_r, dtype=float))
    n, p = gamma_x.shape
    if c_track.shape != (p, n) or x_r.shape != (p,):
        raise ConfigurationError("steady-state allocation needs C (p x n_phi) and x_r (p,)")
    block = np.block([[lam, gamma_x], [c_track, np.zeros((p, p))]])
    rhs = np.concatenate([np.zeros(n), x_r])
    try:
        sol = np.linalg.solve(block, rhs)
    except np.linalg.LinAlgError:
        raise AllocationError("steady-state allocation is singular (setpoint unreachable)") from None
    if not np.all(np.isfinite(sol)) or np.linalg.norm(block @ sol - rhs) > 1e-8 * (1 + np.linalg.norm(rhs)):
        raise AllocationError("steady-state allocation is ill-conditioned")
    return sol[:n], sol[n:]


@dataclass(frozen=True)
class GainSchedule:
    """State-scheduled LQR gains projected onto a sigmoid feature basis.

    ``evaluate(x)`` returns K(x) = reshape(W_K sigma(x) + B_K) with shape
    (input_dim, n_phi + input_dim); the feature basis (w1, b1 and the input
    normalization) is shared with the input-dynamics surrogate.
    """

    w1: Array
    b1: Array
    center: Array
    halfspan: Array
    w_k: Array
    b_k: Array
    out_shape: tuple
    points: Array
    raw_gains: Array  # (n_points, input_dim, n_phi + input_dim)
    closed_loop_max_re: Array
    fit_residual: float

    def features(self, x) -> Array:
        xn = (np.asarray(x, dtype=float) - self.center) / self.halfspan
        return _sigmoid(xn @ self.w1 + self.b1)

    def evaluate(self, x) -> Array:
        return (self.w_k @ self.features(x) + self.b_k).reshape(self.out_shape)

    @property
    def is_hurwitz(self) -> bool:
        return bool(np.all(self.closed_loop_max_re < 0))


def design_lqr_grid(
    lam: Array,
    gamma_fn: Callable[[Array], Array],
    time_constants,
    q_phi: Array,
    r_mat: Array,
    schedule_points: Array,
    basis: SigmoidSurrogate,
    ridge_weight: float = 1.0e-8,
    max_fail_fraction: float = 0.05,
    tol: float = 1e-9,
) -> GainSchedule:
    """Pointwise LQR design on the lag-augmented lifted system plus basis fit.

    At each scheduling point the system [phi; u_act] with first-order
    actuator lags is treated as locally LTI; the per-point gains are then
    ridge-fit onto the sigmoid basis.  Raises if more than
    ``max_fail_fraction`` of the point designs fail.
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    n = lam.shape[0]
    t_const = np.atleast_1d(np.asarray(time_constants, dtype=float))
    p = t_const.size
    if np.any(t_const <= 0):
        raise ConfigurationError("actuator time constants must be positive")
    q_phi = np.atleast_2d(np.asarray(q_phi, dtype=float))
    r_mat = np.atleast_2d(np.asarray(r_mat, dtype=float))
    pts = np.atleast_2d(np.asarray(schedule_points, dtype=float))

    lag = np.diag(-1.0 / t_const)
    b_aug = np.vstack([np.zeros((n, p)), -lag])
    q_aug = scipy.linalg.block_diag(q_phi, np.zeros((p, p)))

    gains = np.zeros((pts.shape[0], p, n + p))
    max_re = np.full(pts.shape[0], np.nan)
    failures = []
    for i, x in enumerate(pts):
        a_aug = np.block([[lam, gamma_fn(x)], [np.zeros((p, n)), lag]])
        try:
            k, _ = lqr_gain(RiccatiProblem(a_aug, b_aug, q_aug, r_mat), tol)
        except (SolverError, DesignError, ConfigurationError) as err:
            failures.append((tuple(np.round(x, 6)), str(err)))
            continue
        gains[i] = k
        max_re[i] = np.linalg.eigvals(a_aug - b_aug @ k).real.max()
    if failures:
        if len(failures) > max_fail_fraction * pts.shape[0]:
            raise DesignError(f"{len(failures)} scheduling-point designs failed: {failures[:5]}")
        ok = ~np.isnan(max_re)
    else:
        ok = np.ones(pts.shape[0], dtype=bool)

    feat_basis = SigmoidSurrogate(
        w1=basis.w1, b1=basis.b1, w2=np.zeros((1, basis.hidden)), b2=np.zeros(1),
        out_shape=(1, 1), center=basis.center, halfspan=basis.halfspan,
    )
    feats = feat_basis.features(pts[ok])
    targets = gains[ok].reshape(ok.sum(), -1)
    w_k, b_k = _ridge_output_fit(feats, targets, ridge_weight)
    resid = float(np.mean((feats @ w_k.T + b_k - targets) ** 2))
    return GainSchedule(
        w1=basis.w1, b1=basis.b1, center=basis.center, halfspan=basis.halfspan,
        w_k=w_k, b_k=b_k, out_shape=(p, n + p),
        points=pts[ok], raw_gains=gains[ok], closed_loop_max_re=max_re[ok],
        fit_residual=resid,
    )


@dataclass(frozen=True)
class ClosedLoopConfig:
    """Actuator, limiter, integral and simulation settings of the loop."""

    dt: float
    horizon: float
    time_constants: Array
    u_min: Array
    u_max: Array
    k_i: Array  # diagonal integral gains (sign included)
    anti_windup: bool = True
    meas_noise_std: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        for name in ("time_constants", "u_min", "u_max", "k_i"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.time_constants <= 0):
            raise ConfigurationError("actuator time constants must be positive")
        if np.any(self.u_min >= self.u_max):
            raise ConfigurationError("input limits must satisfy lo < hi per channel")
        if self.dt <= 0 or self.horizon <= 0:
            raise ConfigurationError("dt and horizon must be positive")


@dataclass(frozen=True)
class LqgDesign:
    """Complete eigenfunction-space LQG stack for one plant."""

    lam: Array
    c_meas: Array  # full measured-state reconstruction (m x n_phi)
    c_track: Array  # tracked-output reconstruction (p x n_phi)
    offset: Array  # constant reconstruction offset (fixed point), (m,)
    track_indices: Array  # measured-state indices forming the tracked output
    gamma_fn: Callable[[Array], Array]
    kalman_gain: Array
    schedule: GainSchedule
    phi_init_fn: Callable[[Array], Array]


@dataclass(frozen=True)
class PiController:
    """Decoupled PI baseline: u = u_offset + Kp e + Ki eta."""

    kp: Array
    ki: Array
    u_offset: Array

    def __post_init__(self):
        for name in ("kp", "ki", "u_offset"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))


def pi_baseline(kp, ki, u_offset=None) -> PiController:
    """Construct the PI comparison controller."""
    kp = np.atleast_1d(np.asarray(kp, dtype=float))
    if u_offset is None:
        u_offset = np.zeros_like(kp)
    return PiController(kp=kp, ki=ki, u_offset=u_offset)


@dataclass
class ClosedLoopResult:
    t: Array
    states: Array  # (m, N)
    measurements: Array
    estimates: Array  # reconstructed state estimates (m, N) (LQG) or measurements (PI)
    inputs_commanded: Array  # (p, N)
    inputs_actual: Array
    integrals: Array
    setpoints: Array
    innovations: Optional[Array] = None
    saturated: Optional[Array] = None


def simulate_closed_loop(
    plant: DynSystem,
    controller,
    cfg: ClosedLoopConfig,
    x0,
    setpoint_fn: Callable[[float], Array],
    track_indices,
    u0=None,
) -> ClosedLoopResult:
    """Run the tracking loop with actuator lags, limits and anti-windup.

    ``controller`` is an :class:`LqgDesign` (Kalman filter + gain schedule +
    allocation + integral action) or a :class:`PiController`; both share
    the limiter, clamping anti-windup and first-order actuator path.  The
    integral state is eta = int (setpoint - tracked measurement) dt, frozen
    per channel while that channel saturates (when anti-windup is on).
    """
    dt = cfg.dt
    n_steps = int(round(cfg.horizon / dt)) + 1
    track = np.atleast_1d(np.asarray(track_indices, dtype=int))
    p = cfg.u_min.size
    rng = np.random.default_rng(cfg.noise_seed)
    is_lqg = isinstance(controller, LqgDesign)

    x = np.asarray(x0, dtype=float).copy()
    u_act = np.zeros(p) if u0 is None else np.asarray(u0, dtype=float).copy()
    eta = np.zeros(p)

    t = np.arange(n_steps) * dt
    xs = np.empty((plant.state_dim, n_steps))
    ys = np.empty_like(xs)
    est = np.empty_like(xs)
    u_comm_s = np.empty((p, n_steps))
    u_act_s = np.empty((p, n_steps))
    etas = np.empty((p, n_steps))
    sets = np.empty((len(track), n_steps))
    innov = np.zeros((plant.state_dim, n_steps))
    sat_flags = np.zeros((p, n_steps), dtype=bool)

    phi_hat = None
    for k in range(n_steps):
        y = x + (rng.normal(0.0, cfg.meas_noise_std, size=x.shape) if cfg.meas_noise_std > 0 else 0.0)
        r = np.atleast_1d(np.asarray(setpoint_fn(t[k]), dtype=float))

        if is_lqg:
            if phi_hat is None:
                phi_hat = np.asarray(controller.phi_init_fn(y), dtype=float).copy()
            resid = y - (controller.offset + controller.c_meas @ phi_hat)
            phi_hat = phi_hat + dt * (controller.kalman_gain @ resid)
            innov[:, k] = resid
            x_hat = controller.offset + controller.c_meas @ phi_hat
            gamma_x = controller.gamma_fn(x_hat)
            phi_ss, u_ss = steady_state_targets(
                controller.lam, gamma_x, controller.c_track,
                r - controller.offset[track],
            )
            kmat = controller.schedule.evaluate(x_hat)
            nphi = controller.lam.shape[0]
            u_comm = (
                u_ss
                - kmat[:, :nphi] @ (phi_hat - phi_ss)
                - kmat[:, nphi:] @ (u_act - u_ss)
                - cfg.k_i * eta
            )
        else:
            x_hat = y
            e = r - y[track]
            u_comm = controller.u_offset + controller.kp * e + controller.ki * eta

        u_sat = np.clip(u_comm, cfg.u_min, cfg.u_max)
        saturated = u_sat != u_comm

        xs[:, k] = x
        ys[:, k] = y
        est[:, k] = x_hat
        u_comm_s[:, k] = u_comm
        u_act_s[:, k] = u_act
        etas[:, k] = eta
        sets[:, k] = r
        sat_flags[:, k] = saturated
        if k == n_steps - 1:
            break

        err = r - y[track]
        if cfg.anti_windup:
            err = np.where(saturated, 0.0, err)
        eta = eta + dt * err

        if is_lqg:
            def phidot(ph):
                return controller.lam @ ph + controller.gamma_fn(
                    controller.offset + controller.c_meas @ ph
                ) @ u_act
            k1 = phidot(phi_hat)
            k2 = phidot(phi_hat + dt * k1)
            phi_hat = phi_hat + 0.5 * dt * (k1 + k2)

        u_act = u_sat + (u_act - u_sat) * np.exp(-dt / cfg.time_constants)
        x = heun_step(plant, x, u_act, dt)
        if np.linalg.norm(x) > 1e6:
            raise DesignError(f"closed-loop state blow-up at t={t[k]:.3f}")

    return ClosedLoopResult(
        t=t, states=xs, measurements=ys, estimates=est,
        inputs_commanded=u_comm_s, inputs_actual=u_act_s, integrals=etas,
        setpoints=sets, innovations=innov if is_lqg else None, saturated=sat_flags,
    )


def settling_time(t: Array, y: Array, target: float, band: float) -> float:
    """Time after which y stays within +-band of target (inf if never)."""
    outside = np.abs(np.asarray(y) - target) > band
    idx = np.nonzero(outside)[0]
    if idx.size == 0:
        return 0.0
    if idx[-1] == len(y) - 1:
        return float("inf")
    return float(t[idx[-1] + 1] - t[0])


def overshoot_percent(y: Array, start: float, target: float) -> float:
    """Signed overshoot as percent of the step size.

    Positive for upward steps exceeding the target, negative for downward
    steps undershooting past it; zero when the response never crosses.
    """
    step = target - start
    if step == 0:
        return 0.0
    y = np.asarray(y, dtype=float)
    if step > 0:
        return float(max(0.0, (y.max() - target) / abs(step)) * 100.0)
    return float(min(0.0, (y.min() - target) / abs(step)) * 100.0)


def step_metrics(
    result: ClosedLoopResult,
    state_index: int,
    setpoint_row: int,
    t_step: float,
    band_fraction: float = 0.02,
) -> dict:
    """Settling time and overshoot of one tracked state after a step at t_step.

    The settling band is +-band_fraction of the step size; overshoot is
    sign-carrying percent of the step size.
    """
    sel = result.t >= t_step
    t = result.t[sel]
    y = result.states[state_index][sel]
    target = float(result.setpoints[setpoint_row, sel][-1])
    start = float(y[0])
    step = target - start
    band = band_fraction * abs(step) if step != 0 else band_fraction
    return {
        "settling_time": settling_time(t, y, target, band),
        "overshoot_percent": overshoot_percent(y, start, target),
        "steady_state_error": float(abs(y[-1] - target)),
    }
