"""Benchmark vector fields, Heun integration, and trajectory ensembles."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, IntegrationOverflowError

Array = np.ndarray


@dataclass(frozen=True)
class DynSystem:
    """Control-affine system ``x' = F(x) + G(x) u``.

    ``drift`` maps states of shape (m,) or (n, m) to the same shape;
    ``input_field`` maps them to (m, input_dim) or (n, m, input_dim).
    Both must be pure functions: the ensemble builder calls them from
    multiple threads on batched states.
    """

    name: str
    state_dim: int
    input_dim: int
    drift: Callable[[Array], Array]
    input_field: Optional[Callable[[Array], Array]] = None
    known_fixed_points: tuple = ()
    principal_eigenvalues: tuple = ()

    def __post_init__(self):
        if self.input_dim > 0 and self.input_field is None:
            raise ConfigurationError(f"{self.name}: input_dim > 0 requires an input_field")
        for fp in self.known_fixed_points:
            f = self.drift(np.asarray(fp, dtype=float))
            if np.linalg.norm(f) >= 1e-8:
                raise ConfigurationError(
                    f"{self.name}: listed fixed point {fp} has drift norm {np.linalg.norm(f):.2e}"
                )
        if self.input_dim > 0:
            x = np.asarray(self.known_fixed_points[0] if self.known_fixed_points else [0.0] * self.state_dim)
            g = self.input_field(x)
            if g.shape != (self.state_dim, self.input_dim):
                raise ConfigurationError(
                    f"{self.name}: input_field shape {g.shape} != ({self.state_dim}, {self.input_dim})"
                )

    def rhs(self, x: Array, u: Optional[Array] = None) -> Array:
        """Evaluate F(x) + G(x) u for single or batched states."""
        f = self.drift(x)
        if u is not None and self.input_dim > 0:
            g = self.input_field(x)
            u = np.asarray(u, dtype=float)
            if u.ndim == 1:
                f = f + np.einsum("...ij,j->...i", g, u)
            else:
                f = f + np.einsum("...ij,...j->...i", g, u)
        return f


@dataclass(frozen=True)
class SimGrid:
    """Regular rectangular grid of initial conditions.

    ``subgrid_stride`` selects every stride-th row/column (starting at the
    first) for the temporal-cost subgrid; stride 4 reduces 21x21 to 6x6.
    """

    ranges: tuple
    counts: tuple
    subgrid_stride: int = 4

    def __post_init__(self):
        if len(self.ranges) != len(self.counts):
            raise ConfigurationError("ranges and counts must have equal length")
        for (lo, hi), n in zip(self.ranges, self.counts):
            if n < 2:
                raise ConfigurationError("grid counts must be >= 2 per dimension")
            if not lo < hi:
                raise ConfigurationError(f"grid range [{lo}, {hi}] is empty")
        if self.subgrid_stride < 1:
            raise ConfigurationError("subgrid_stride must be >= 1")

    @property
    def ndim(self) -> int:
        return len(self.counts)

    def axes(self) -> list:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.ranges, self.counts)]

    def spacing(self) -> Array:
        return np.array([(hi - lo) / (n - 1) for (lo, hi), n in zip(self.ranges, self.counts)])

    def points(self) -> Array:
        """All grid nodes as (n_points, ndim) in row-major (first axis slowest) order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def index_of(self, point, tol: float = 1e-9) -> int:
        pts = self.points()
        d = np.max(np.abs(pts - np.asarray(point, dtype=float)), axis=1)
        i = int(np.argmin(d))
        if d[i] > tol:
            raise ConfigurationError(f"point {point} is not a grid node (closest miss {d[i]:.3e})")
        return i

    def contains(self, points: Array) -> Array:
        """Boolean mask of points inside the grid hull (inclusive)."""
        p = np.atleast_2d(points)
        ok = np.ones(p.shape[0], dtype=bool)
        for d, (lo, hi) in enumerate(self.ranges):
            ok &= (p[:, d] >= lo) & (p[:, d] <= hi)
        return ok


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Grid-sampled autonomous trajectories with a shared uniform time step.

    ``states`` has shape (n_trajectories, m, N).  The flattening convention
    used throughout the pipeline is state-major: a single trajectory
    (m, N) flattens row-major to [x1(t0..tN), x2(t0..tN), ...].
    """

    dt: float
    states: Array
    initial_conditions: Array
    reference_index: int

    def __post_init__(self):
        if not np.array_equal(self.states[:, :, 0], self.initial_conditions):
            raise ConfigurationError("states[:, :, 0] must equal initial_conditions exactly")
        if not 0 <= self.reference_index < self.n_trajectories:
            raise ConfigurationError("reference_index out of range")

    @property
    def n_trajectories(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def n_samples(self) -> int:
        return self.states.shape[2]

    @property
    def time_axis(self) -> Array:
        return np.arange(self.n_samples) * self.dt

    @property
    def reference(self) -> Array:
        return self.states[self.reference_index]

    def flattened(self) -> Array:
        """State-major flattening of every trajectory, shape (n_t, m*N)."""
        return self.states.reshape(self.n_trajectories, -1)

    def shift_by(self, offset) -> "TrajectoryEnsemble":
        """Subtract a fixed point from all states; returns a new ensemble."""
        off = np.asarray(offset, dtype=float)
        return replace(
            self,
            states=self.states - off[None, :, None],
            initial_conditions=self.initial_conditions - off[None, :],
        )

    def with_noise(self, variance: float, seed) -> "TrajectoryEnsemble":
        """Add zero-mean Gaussian measurement noise post-integration (seeded).

        Initial conditions are reset to the noisy first samples so the
        exactness invariant holds for the measured data.
        """
        if variance < 0:
            raise ConfigurationError("noise variance must be >= 0")
        if variance == 0:
            return self
        rng = np.random.default_rng(seed)
        noisy = self.states + rng.normal(0.0, np.sqrt(variance), size=self.states.shape)
        return replace(self, states=noisy, initial_conditions=noisy[:, :, 0].copy())


def heun_step(sys: DynSystem, x: Array, u: Optional[Array], dt: float) -> Array:
    """One explicit trapezoidal (Heun) step with input held constant."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = sys.rhs(x, u)
    k2 = sys.rhs(x + dt * k1, u)
    out = x + 0.5 * dt * (k1 + k2)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(out)).all(axis=-1))
        raise IntegrationOverflowError(
            f"{sys.name}: non-finite state after Heun step (first bad batch index {bad[0] if bad.size else '?'})",
            trajectory=int(bad[0][0]) if bad.size else None,
        )
    return out


def _integrate_batch(sys: DynSystem, x0: Array, dt: float, n_samples: int) -> Array:
    """Integrate a batch of autonomous trajectories; returns (n, m, N)."""
    n, m = x0.shape
    out = np.empty((n, m, n_samples))
    x = x0.copy()
    out[:, :, 0] = x
    for k in range(1, n_samples):
        try:
            x = heun_step(sys, x, None, dt)
        except IntegrationOverflowError as err:
            raise IntegrationOverflowError(
                f"{sys.name}: integration overflow at step {k} (trajectory {err.trajectory})",
                trajectory=err.trajectory,
                step=k,
            ) from None
        out[:, :, k] = x
    return out


def simulate_ensemble(
    sys: DynSystem,
    grid: SimGrid,
    dt: float,
    n_samples: int,
    reference_ic,
    noise_variance: float = 0.0,
    noise_seed=0,
    threads: int = 1,
) -> TrajectoryEnsemble:
    """Simulate one autonomous trajectory per grid node.

    ``reference_ic`` must coincide with a grid node.  Optional Gaussian
    measurement noise is added after integration.  ``threads`` > 1 splits
    the batch across a thread pool; output ordering is deterministic.
    """
    ref_idx = grid.index_of(reference_ic)
    ics = grid.points()
    if threads <= 1 or ics.shape[0] < 2 * threads:
        states = _integrate_batch(sys, ics, dt, n_samples)
    else:
        chunks = np.array_split(np.arange(ics.shape[0]), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda idx: _integrate_batch(sys, ics[idx], dt, n_samples), chunks))
        states = np.concatenate(parts, axis=0)
    ens = TrajectoryEnsemble(dt=dt, states=states, initial_conditions=ics.copy(), reference_index=ref_idx)
    if noise_variance > 0:
        ens = ens.with_noise(noise_variance, noise_seed)
    return ens


def simulate_driven(sys: DynSystem, x0, u_samples: Array, dt: float) -> Array:
    """Integrate an input-driven trajectory with zero-order-hold inputs.

    ``u_samples`` has shape (input_dim, N); the value at index k is held
    over the step k -> k+1.  Returns states of shape (m, N).
    """
    u_samples = np.atleast_2d(np.asarray(u_samples, dtype=float))
    n = u_samples.shape[1]
    x = np.asarray(x0, dtype=float)
    out = np.empty((sys.state_dim, n))
    out[:, 0] = x
    for k in range(1, n):
        x = heun_step(sys, x, u_samples[:, k - 1], dt)
        out[:, k] = x
    return out


def piecewise_constant_input(
    input_dim: int,
    amplitude: float,
    hold_time: float,
    horizon: float,
    dt: float,
    seed,
) -> Array:
    """Seeded piecewise-constant excitation, shape (input_dim, N).

    Levels are drawn uniformly from [-amplitude, amplitude] and held for
    ``hold_time`` seconds.
    """
    rng = np.random.default_rng(seed)
    n = int(round(horizon / dt)) + 1
    hold = max(1, int(round(hold_time / dt)))
    n_levels = int(np.ceil(n / hold))
    levels = rng.uniform(-amplitude, amplitude, size=(input_dim, n_levels))
    return np.repeat(levels, hold, axis=1)[:, :n]


def select_subgrid(ens: TrajectoryEnsemble, grid: SimGrid) -> Array:
    """Indices of the stride-selected subgrid trajectories (row-major order)."""
    if grid.subgrid_stride > min(grid.counts):
        raise ConfigurationError("subgrid_stride exceeds the grid counts")
    picks = [np.arange(0, n, grid.subgrid_stride) for n in grid.counts]
    mesh = np.meshgrid(*picks, indexing="ij")
    flat = np.zeros_like(mesh[0])
    stride_prod = 1
    for d in reversed(range(grid.ndim)):
        flat = flat + mesh[d] * stride_prod
        stride_prod *= grid.counts[d]
    idx = np.sort(flat.ravel())
    if idx[-1] >= ens.n_trajectories:
        raise ConfigurationError("subgrid index exceeds ensemble size")
    return idx


# --- benchmark systems -----------------------------------------------------


def closure_system(mu: float = -0.1, nu: float = -1.0) -> DynSystem:
    """Quadratic system with a finite Koopman closure and fixed point at 0."""

    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([mu * x1, nu * (x2 - x1**2)], axis=-1)

    return DynSystem(
        name="closure",
        state_dim=2,
        input_dim=0,
        drift=drift,
        known_fixed_points=((0.0, 0.0),),
        principal_eigenvalues=(complex(mu), complex(nu)),
    )


def closure_controlled(mu: float = -0.1, nu: float = -1.0) -> DynSystem:
    """Closure system with identity input matrix (2-input control surrogate)."""
    base = closure_system(mu, nu)

    def gfield(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2))

    return DynSystem(
        name="closure_controlled",
        state_dim=2,
        input_dim=2,
        drift=base.drift,
        input_field=gfield,
        known_fixed_points=base.known_fixed_points,
        principal_eigenvalues=base.principal_eigenvalues,
    )


def fitzhugh_nagumo(
    beta: float = 0.05, gamma: float = 0.2, delta: float = 1.0, alpha: float = 0.5
) -> DynSystem:
    """FitzHugh-Nagumo model with scalar input on both state equations."""

    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack(
            [-x2 - x1 * (x1 - 1.0) * (x1 - alpha) + beta, gamma * (x1 - delta * x2)],
            axis=-1,
        )

    def gfield(x):
        x = np.asarray(x, dtype=float)
        x1 = x[..., 0]
        g = np.stack([np.ones_like(x1), np.cos(x1**2)], axis=-1)
        return g[..., :, None]

    # autonomous fixed point: x2 = x1/delta, cubic in x1
    coeffs = [-1.0, 1.0 + alpha, -(alpha + 1.0 / delta), beta]
    roots = np.roots(coeffs)
    x1_fp = float(np.real(roots[np.argmin(np.abs(np.imag(roots)))]))
    for _ in range(5):  # Newton polish so the fixed-point invariant holds tightly
        p = np.polyval(coeffs, x1_fp)
        dp = np.polyval(np.polyder(coeffs), x1_fp)
        x1_fp -= p / dp
    fp = (x1_fp, x1_fp / delta)
    jac = np.array(
        [[-(3 * x1_fp**2 - 2 * (1 + alpha) * x1_fp + alpha), -1.0], [gamma, -gamma * delta]]
    )
    eigs = tuple(np.linalg.eigvals(jac))
    return DynSystem(
        name="fhn",
        state_dim=2,
        input_dim=1,
        drift=drift,
        input_field=gfield,
        known_fixed_points=(fp,),
        principal_eigenvalues=eigs,
    )


def van_der_pol(mu: float = 2.0) -> DynSystem:
    """Van der Pol oscillator (stable limit cycle, unstable origin)."""

    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, mu * (1.0 - x1**2) * x2 - x1], axis=-1)

    return DynSystem(
        name="vdp",
        state_dim=2,
        input_dim=0,
        drift=drift,
        known_fixed_points=((0.0, 0.0),),
    )


def duffing(delta: float = 0.5, a: float = 1.0, b: float = -1.0) -> DynSystem:
    """Duffing oscillator with two stable fixed points and a separatrix."""

    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, -delta * x2 - x1 * (b + a * x1**2)], axis=-1)

    x1s = np.sqrt(-b / a) if b / a < 0 else None
    fps = [(0.0, 0.0)]
    eigs = ()
    if x1s is not None:
        fps = [(x1s, 0.0), (-x1s, 0.0), (0.0, 0.0)]
        # principal eigenvalues of the stable points
        jac = np.array([[0.0, 1.0], [-b - 3 * a * x1s**2, -delta]])
        eigs = tuple(np.linalg.eigvals(jac))
    return DynSystem(
        name="duffing",
        state_dim=2,
        input_dim=0,
        drift=drift,
        known_fixed_points=tuple(fps),
        principal_eigenvalues=eigs,
    )


_REGISTRY = {
    "closure": closure_system,
    "closure_controlled": closure_controlled,
    "fhn": fitzhugh_nagumo,
    "vdp": van_der_pol,
    "duffing": duffing,
}


def get_system(name: str, **params) -> DynSystem:
    """Look up a registered benchmark system by name."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigurationError(f"unknown system '{name}' (known: {sorted(_REGISTRY)})") from None
    return factory(**params)
