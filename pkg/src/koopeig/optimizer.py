"""Joint cost assembly and eigenvalue search (particle swarm + Nelder-Mead)."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.optimize
from scipy.stats import qmc

from .errors import ConditioningError, ConfigurationError, IntegrationOverflowError
from .spatial import (
    drift_on_grid,
    gradient_central_diff,
    interpolate_field,
    kpde_cost,
    kpde_residual,
)
from .spectral import (
    EigenvalueSet,
    ModeMatrix,
    build_fundamental_basis,
    build_projection_basis,
    fit_reference_modes,
    project_trajectories,
    temporal_cost,
)
from .systems import DynSystem, SimGrid, TrajectoryEnsemble, select_subgrid

Array = np.ndarray

PENALTY_COST = 1.0e6


@dataclass(frozen=True)
class SearchSpace:
    """Bounds and fixed entries of the eigenvalue search.

    Free pairs are flattened as (re1, im1, re2, im2, ...); imaginary parts
    are kept nonnegative.  Fixed pairs are injected verbatim ahead of the
    free ones in every candidate.
    """

    n_free_pairs: int
    re_bounds: tuple
    im_bounds: tuple
    fixed_pairs: Array = field(default_factory=lambda: np.zeros((0, 2)))
    d_min: float = 0.05
    penalty_weight: float = 1.0e3
    imag_floor: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "fixed_pairs", np.atleast_2d(np.asarray(self.fixed_pairs, dtype=float)).reshape(-1, 2))
        for lo, hi in (self.re_bounds, self.im_bounds):
            if not np.isfinite([lo, hi]).all() or lo > hi:
                raise ConfigurationError("search bounds must be finite with lo <= hi")
        if self.im_bounds[0] < 0:
            raise ConfigurationError("imaginary-part bounds must be nonnegative")
        if self.n_free_pairs < 0:
            raise ConfigurationError("n_free_pairs must be >= 0")

    @property
    def dim(self) -> int:
        return 2 * self.n_free_pairs

    def lower(self) -> Array:
        return np.tile([self.re_bounds[0], self.im_bounds[0]], self.n_free_pairs)

    def upper(self) -> Array:
        return np.tile([self.re_bounds[1], self.im_bounds[1]], self.n_free_pairs)

    def clip(self, x: Array) -> Array:
        return np.clip(x, self.lower(), self.upper())

    def assemble(self, free_flat) -> EigenvalueSet:
        """Fixed pairs followed by the free pairs encoded in ``free_flat``."""
        free = np.asarray(free_flat, dtype=float).reshape(-1, 2)
        if free.shape[0] != self.n_free_pairs:
            raise ConfigurationError("candidate dimension does not match the search space")
        pairs = np.vstack([self.fixed_pairs, np.column_stack([free[:, 0], np.abs(free[:, 1])])])
        fixed = np.concatenate(
            [np.ones(self.fixed_pairs.shape[0], dtype=bool), np.zeros(free.shape[0], dtype=bool)]
        )
        return EigenvalueSet(pairs, fixed, self.imag_floor)


@dataclass(frozen=True)
class CostConfig:
    """Weights and grids of the joint temporal + Koopman-PDE cost."""

    ridge_weight: float = 1.0e-6
    kpde_weight: float = 1.0e-4
    imag_floor: float = 0.01
    clamp: Optional[float] = None
    interp_grid: Optional[SimGrid] = None
    smoothing: float = 1.0
    shift: Optional[Array] = None  # fixed point subtracted for the temporal part

    def __post_init__(self):
        if self.ridge_weight < 0 or self.kpde_weight < 0:
            raise ConfigurationError("cost weights must be >= 0")
        if self.kpde_weight > 0 and self.interp_grid is None:
            raise ConfigurationError("a positive KPDE weight requires an interpolation grid")


@dataclass
class CostParts:
    total: float
    temporal: float
    kpde: float

    def as_tuple(self):
        return self.total, self.temporal, self.kpde


class TotalCost:
    """Joint cost of an eigenvalue candidate on a fixed ensemble.

    Precomputes everything independent of the candidate (flattened
    trajectories, subgrid selection, drift on the interpolation grid) so
    swarm evaluations stay cheap.  Evaluation is a pure, deterministic
    function of the candidate; linear-solver failures map to a large
    finite penalty so population search continues.
    """

    def __init__(self, ens: TrajectoryEnsemble, grid: SimGrid, sys: DynSystem, cfg: CostConfig):
        self.cfg = cfg
        self.data = ens.shift_by(cfg.shift) if cfg.shift is not None else ens
        self.time_axis = ens.time_axis
        self.x_ref = self.data.reference
        self.flat = self.data.flattened()
        self.subgrid = select_subgrid(ens, grid)
        self.sample_points = grid.points()
        self.sample_grid = grid
        self.drift_nodes = None
        if cfg.kpde_weight > 0:
            self.drift_nodes = drift_on_grid(sys, cfg.interp_grid)

    def components(self, eigs: EigenvalueSet):
        """Full evaluation: (modes, phi0, field-or-None, CostParts)."""
        basis = build_fundamental_basis(eigs, self.time_axis)
        modes = fit_reference_modes(self.x_ref, basis, self.cfg.ridge_weight)
        proj = build_projection_basis(modes, eigs, self.time_axis)
        phi0 = project_trajectories(self.flat, proj, self.cfg.ridge_weight)
        j_temp = temporal_cost(self.data, self.subgrid, modes, eigs, phi0)
        j_kpde = 0.0
        fld = None
        if self.cfg.kpde_weight > 0:
            fld = interpolate_field(
                self.sample_points, phi0, self.cfg.interp_grid, self.cfg.smoothing,
                sample_grid=self.sample_grid,
            )
            fld = gradient_central_diff(fld)
            res = kpde_residual(fld, eigs, self.drift_nodes)
            j_kpde = kpde_cost(res, mask=fld.kpde_mask(), clamp=self.cfg.clamp)
        total = j_temp + self.cfg.kpde_weight * j_kpde
        return modes, phi0, fld, CostParts(total, j_temp, j_kpde)

    def evaluate(self, eigs: EigenvalueSet) -> CostParts:
        try:
            return self.components(eigs)[-1]
        except (ConditioningError, IntegrationOverflowError, np.linalg.LinAlgError):
            return CostParts(PENALTY_COST, PENALTY_COST, PENALTY_COST)

    __call__ = evaluate


def total_cost(eigs: EigenvalueSet, ens: TrajectoryEnsemble, grid: SimGrid, sys: DynSystem, cfg: CostConfig):
    """One-shot evaluation: returns (J, J_temp, J_KPDE)."""
    return TotalCost(ens, grid, sys, cfg).evaluate(eigs).as_tuple()


def distance_penalty(eigs, d_min: float, penalty_weight: float = 1.0) -> float:
    """Soft penalty when the minimum pairwise eigenvalue distance is below d_min."""
    pts = eigs.pairs if isinstance(eigs, EigenvalueSet) else np.atleast_2d(np.asarray(eigs, dtype=float))
    if pts.shape[0] < 2:
        return 0.0
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    iu = np.triu_indices(pts.shape[0], k=1)
    dmin = float(d[iu].min())
    if dmin >= d_min:
        return 0.0
    return penalty_weight * (d_min - dmin)


@dataclass
class OptimizerTrace:
    """Per-generation bookkeeping of the global best."""

    generation: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    j_total: list = field(default_factory=list)
    j_temp: list = field(default_factory=list)
    j_kpde: list = field(default_factory=list)
    best_free: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def append(self, gen, objective, parts: CostParts, free, evaluations, wall):
        self.generation.append(gen)
        self.objective.append(objective)
        self.j_total.append(parts.total)
        self.j_temp.append(parts.temporal)
        self.j_kpde.append(parts.kpde)
        self.best_free.append(np.asarray(free, dtype=float).copy())
        self.evaluations.append(evaluations)
        self.wall_time.append(wall)

    def rows(self):
        for i in range(len(self.generation)):
            yield (
                self.generation[i],
                self.objective[i],
                self.j_total[i],
                self.j_temp[i],
                self.j_kpde[i],
                self.evaluations[i],
                self.wall_time[i],
                *self.best_free[i],
            )


@dataclass
class SearchResult:
    free: Array
    eigs: EigenvalueSet
    objective: float
    parts: CostParts
    trace: Optional[OptimizerTrace] = None
    evaluations: int = 0


def make_objective(space: SearchSpace, cost: Callable[[EigenvalueSet], CostParts]):
    """Wrap a candidate cost with assembly and the distance penalty."""

    def objective(free_flat):
        eigs = space.assemble(free_flat)
        parts = cost(eigs)
        pen = distance_penalty(eigs, space.d_min, space.penalty_weight)
        return parts.total + pen, parts

    return objective


def pso_search(
    space: SearchSpace,
    cost: Callable[[EigenvalueSet], CostParts],
    pop_size: int,
    generations: int,
    seed: int,
    inertia: float = 0.73,
    cognitive: float = 1.5,
    social: float = 1.5,
    threads: int = 1,
    include: Optional[Array] = None,
) -> SearchResult:
    """Global-best particle swarm over the free eigenvalue pairs.

    Latin-hypercube initial population, bound clipping, per-particle RNG
    streams derived from ``seed`` (deterministic regardless of threading).
    ``include`` replaces the first particle, e.g. to warm-start a phase-two
    run from a previous optimum.
    """
    if pop_size < 2:
        raise ConfigurationError("pop_size must be >= 2")
    objective = make_objective(space, cost)
    lo, hi = space.lower(), space.upper()
    span = hi - lo
    sampler = qmc.LatinHypercube(d=space.dim, seed=seed)
    pos = lo + sampler.random(pop_size) * span
    if include is not None:
        pos[0] = space.clip(np.asarray(include, dtype=float))
    rngs = [np.random.default_rng([int(seed), i]) for i in range(pop_size)]
    vel = np.stack([r.uniform(-0.2, 0.2, space.dim) * span for r in rngs])

    def evaluate_all(positions):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(objective, positions))
        return [objective(p) for p in positions]

    t0 = time.perf_counter()
    trace = OptimizerTrace()
    results = evaluate_all(pos)
    pbest_pos = pos.copy()
    pbest_val = np.array([r[0] for r in results])
    g = int(np.argmin(pbest_val))
    gbest_pos = pbest_pos[g].copy()
    gbest_val = float(pbest_val[g])
    gbest_parts = results[g][1]
    evals = pop_size
    trace.append(0, gbest_val, gbest_parts, gbest_pos, evals, time.perf_counter() - t0)

    for gen in range(1, generations + 1):
        r1 = np.stack([r.random(space.dim) for r in rngs])
        r2 = np.stack([r.random(space.dim) for r in rngs])
        vel = inertia * vel + cognitive * r1 * (pbest_pos - pos) + social * r2 * (gbest_pos - pos)
        pos = np.clip(pos + vel, lo, hi)
        results = evaluate_all(pos)
        vals = np.array([r[0] for r in results])
        improved = vals < pbest_val
        pbest_pos[improved] = pos[improved]
        pbest_val[improved] = vals[improved]
        j = int(np.argmin(vals))
        if vals[j] < gbest_val:  # any new record necessarily comes from this generation
            gbest_val = float(vals[j])
            gbest_pos = pos[j].copy()
            gbest_parts = results[j][1]
        evals += pop_size
        trace.append(gen, gbest_val, gbest_parts, gbest_pos, evals, time.perf_counter() - t0)

    return SearchResult(
        free=gbest_pos,
        eigs=space.assemble(gbest_pos),
        objective=gbest_val,
        parts=gbest_parts,
        trace=trace,
        evaluations=evals,
    )


def nelder_mead_refine(
    x0: Array,
    objective: Callable[[Array], float],
    bounds: Optional[tuple] = None,
    max_iter: int = 1000,
) -> tuple:
    """Nelder-Mead polish (reflection 1, expansion 2, contraction/shrink 0.5)
    with bound projection; never returns a worse point than ``x0``.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.size == 0:
        return x0, float(objective(x0))
    scipy_bounds = None
    if bounds is not None:
        lo, hi = bounds
        scipy_bounds = scipy.optimize.Bounds(lo, hi)
        x0 = np.clip(x0, lo, hi)
    f0 = float(objective(x0))
    res = scipy.optimize.minimize(
        objective,
        x0,
        method="Nelder-Mead",
        bounds=scipy_bounds,
        options={"maxiter": max_iter, "maxfev": 4 * max_iter, "xatol": 1e-10, "fatol": 1e-14},
    )
    if res.fun <= f0:
        return np.asarray(res.x, dtype=float), float(res.fun)
    return x0, f0


def refine_with_nelder_mead(
    space: SearchSpace,
    cost: Callable[[EigenvalueSet], CostParts],
    x0: Array,
    max_iter: int = 1000,
) -> SearchResult:
    """Nelder-Mead refinement of the flattened free eigenvalues."""
    objective = make_objective(space, cost)
    x, val = nelder_mead_refine(x0, lambda v: objective(v)[0], (space.lower(), space.upper()), max_iter)
    parts = objective(x)[1]
    return SearchResult(free=x, eigs=space.assemble(x), objective=val, parts=parts)


def concat_conservative_mode(
    eigs: EigenvalueSet, phi0: Array, modes: ModeMatrix, fixed_point
) -> tuple:
    """Prepend the conservative mode (zero eigenvalue, constant eigenfunction).

    The new mode column is the fixed point itself, so reconstructions gain
    the constant offset removed by the identification shift.
    """
    fp = np.asarray(fixed_point, dtype=float)
    eigs2 = eigs.prepend((0.0, 0.0), fixed=True)
    phi2 = np.vstack([np.ones((1, np.atleast_2d(phi0).shape[1])), np.atleast_2d(phi0)])
    c2 = np.hstack([fp[:, None], modes.c_ref])
    return eigs2, phi2, ModeMatrix(c2, modes.ridge_weight, modes.residual)
