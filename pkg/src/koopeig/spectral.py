"""Temporal exponential bases, reference-mode fitting, and ridge projections."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import ConditioningError, ConfigurationError
from .systems import TrajectoryEnsemble

Array = np.ndarray


@dataclass(frozen=True)
class EigenvalueSet:
    """Ordered eigenvalue pairs (re, im >= 0) with fixed flags.

    Each pair with im > 0 expands to a 2x2 rotation block; im == 0 gives a
    1x1 real block.  Imaginary parts below ``imag_floor`` are zeroed at
    construction, so the stored set is always in canonical (floored) form
    and ``n_phi`` is consistent with every basis built from it.
    """

    pairs: Array
    fixed: Array
    imag_floor: float = 0.01

    def __post_init__(self):
        pairs = np.atleast_2d(np.asarray(self.pairs, dtype=float)).copy()
        if pairs.shape[1] != 2:
            raise ConfigurationError("pairs must be (n, 2) rows of (re, im)")
        pairs[:, 1] = np.abs(pairs[:, 1])
        small = (pairs[:, 1] > 0) & (pairs[:, 1] < self.imag_floor)
        pairs[small, 1] = 0.0
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        fixed = np.asarray(self.fixed, dtype=bool).copy()
        if fixed.shape != (pairs.shape[0],):
            raise ConfigurationError("fixed mask length must match the number of pairs")
        fixed.setflags(write=False)
        object.__setattr__(self, "fixed", fixed)

    @classmethod
    def from_pairs(cls, pairs: Sequence, fixed=None, imag_floor: float = 0.01) -> "EigenvalueSet":
        pairs = np.atleast_2d(np.asarray(pairs, dtype=float))
        if fixed is None:
            fixed = np.zeros(pairs.shape[0], dtype=bool)
        return cls(pairs=pairs, fixed=np.asarray(fixed, dtype=bool), imag_floor=imag_floor)

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]

    @property
    def block_sizes(self) -> Array:
        return np.where(self.pairs[:, 1] > 0, 2, 1)

    @property
    def n_phi(self) -> int:
        return int(self.block_sizes.sum())

    @property
    def row_offsets(self) -> Array:
        """Start row of each pair's block in the stacked eigenfunction vector."""
        return np.concatenate([[0], np.cumsum(self.block_sizes)[:-1]])

    def eigenvalues(self) -> Array:
        """One complex representative per pair (im >= 0 convention)."""
        return self.pairs[:, 0] + 1j * self.pairs[:, 1]

    def lam_matrix(self) -> Array:
        """Block-diagonal generator: [[a, -b], [b, a]] blocks, [a] for real."""
        lam = np.zeros((self.n_phi, self.n_phi))
        for (a, b), off in zip(self.pairs, self.row_offsets):
            if b > 0:
                lam[off, off] = a
                lam[off, off + 1] = -b
                lam[off + 1, off] = b
                lam[off + 1, off + 1] = a
            else:
                lam[off, off] = a
        return lam

    def reordered(self, perm: Sequence) -> "EigenvalueSet":
        perm = np.asarray(perm, dtype=int)
        return EigenvalueSet(self.pairs[perm], self.fixed[perm], self.imag_floor)

    def prepend(self, pair, fixed: bool = True) -> "EigenvalueSet":
        pairs = np.vstack([np.asarray(pair, dtype=float)[None, :], self.pairs])
        fixed_mask = np.concatenate([[fixed], self.fixed])
        return EigenvalueSet(pairs, fixed_mask, self.imag_floor)

    def to_dict(self) -> dict:
        return {
            "pairs": self.pairs.tolist(),
            "fixed": self.fixed.tolist(),
            "imag_floor": self.imag_floor,
        }


@dataclass(frozen=True)
class ModeMatrix:
    """Reference Koopman modes (m x n_phi) with the ridge weight used to fit them."""

    c_ref: Array
    ridge_weight: float
    residual: float = 0.0  # mean squared reconstruction error on the reference

    @property
    def n_phi(self) -> int:
        return self.c_ref.shape[1]

    @property
    def state_dim(self) -> int:
        return self.c_ref.shape[0]


@dataclass(frozen=True)
class Phi0Matrix:
    """Per-trajectory eigenfunction initial conditions, shape (n_phi, n_t)."""

    values: Array
    reference_index: int = 0

    @property
    def n_phi(self) -> int:
        return self.values.shape[0]

    @property
    def n_trajectories(self) -> int:
        return self.values.shape[1]


def ridge_gram_solve(basis: Array, targets: Array, weight: float) -> Array:
    """Solve (basis basisT + weight I) Z = basis targetsT; returns Z.

    ``basis`` is (k, N), ``targets`` is (q, N) or (N,); the result is
    (k, q).  Cholesky on the regularized Gram matrix; with weight == 0 a
    factorization failure raises ConditioningError, otherwise an SVD-based
    solve is the fallback.
    """
    if weight < 0:
        raise ConfigurationError("ridge weight must be >= 0")
    t2 = np.atleast_2d(np.asarray(targets, dtype=float))
    gram = basis @ basis.T
    if weight:
        gram[np.diag_indices_from(gram)] += weight
    rhs = basis @ t2.T
    try:
        cf = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
        z = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        if weight == 0:
            raise ConditioningError(
                "Gram matrix numerically singular at zero ridge weight; "
                "regularize or remove degenerate basis rows"
            ) from None
        z = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    if not np.all(np.isfinite(z)):
        raise ConditioningError("ridge solve produced non-finite values")
    return z


def build_fundamental_basis(eigs: EigenvalueSet, time_axis: Array) -> Array:
    """Exponential temporal basis with unit initial conditions, (n_phi, N).

    Complex pairs contribute the rows e^{at}(cos bt - sin bt) and
    e^{at}(sin bt + cos bt); real blocks a single e^{at} row.
    """
    t = np.asarray(time_axis, dtype=float)
    if t.size and abs(t[0]) > 1e-12:
        raise ConfigurationError("time axis must start at 0")
    out = np.empty((eigs.n_phi, t.size))
    for (a, b), off in zip(eigs.pairs, eigs.row_offsets):
        ex = np.exp(a * t)
        if b > 0:
            c, s = np.cos(b * t), np.sin(b * t)
            out[off] = ex * (c - s)
            out[off + 1] = ex * (s + c)
        else:
            out[off] = ex
    return out


def fit_reference_modes(x_ref: Array, basis: Array, ridge_weight: float) -> ModeMatrix:
    """Ridge-fit the reference Koopman modes from the reference trajectory."""
    x_ref = np.atleast_2d(np.asarray(x_ref, dtype=float))
    c = ridge_gram_solve(basis, x_ref, ridge_weight).T
    resid = float(np.mean((x_ref - c @ basis) ** 2))
    return ModeMatrix(c_ref=c, ridge_weight=ridge_weight, residual=resid)


def build_projection_basis(modes: ModeMatrix, eigs: EigenvalueSet, time_axis: Array) -> Array:
    """Mode-weighted temporal basis B, shape (n_phi, m*N), state-major flattening."""
    t = np.asarray(time_axis, dtype=float)
    c_ref = modes.c_ref
    if c_ref.shape[1] != eigs.n_phi:
        raise ConfigurationError("mode matrix width does not match the eigenvalue set")
    out = np.empty((eigs.n_phi, c_ref.shape[0] * t.size))
    for (a, b), off in zip(eigs.pairs, eigs.row_offsets):
        ex = np.exp(a * t)
        if b > 0:
            c1 = c_ref[:, off][:, None]
            c2 = c_ref[:, off + 1][:, None]
            ec, es = ex * np.cos(b * t), ex * np.sin(b * t)
            out[off] = (c1 * ec + c2 * es).reshape(-1)
            out[off + 1] = (-c1 * es + c2 * ec).reshape(-1)
        else:
            out[off] = (c_ref[:, off][:, None] * ex).reshape(-1)
    return out


def project_trajectories(flat_states: Array, basis: Array, ridge_weight: float) -> Array:
    """Project flattened trajectories onto B; returns Phi0 of shape (n_phi, n_t)."""
    return ridge_gram_solve(basis, flat_states, ridge_weight)


def project_trajectory(x_i: Array, basis: Array, ridge_weight: float) -> Array:
    """Single-trajectory projection; ``x_i`` is (m, N) or already flattened."""
    x_i = np.asarray(x_i, dtype=float)
    flat = x_i.reshape(1, -1)
    return project_trajectories(flat, basis, ridge_weight)[:, 0]


def evolve_phi(eigs: EigenvalueSet, phi0: Array, time_axis: Array) -> Array:
    """Linear evolution e^{Lambda t} phi0 for one or many initial conditions.

    ``phi0`` is (n_phi,) or (n_phi, k); returns (n_phi, N) or (k, n_phi, N).
    """
    t = np.asarray(time_axis, dtype=float)
    single = phi0.ndim == 1
    p = phi0[:, None] if single else phi0
    k = p.shape[1]
    out = np.empty((k, eigs.n_phi, t.size))
    for (a, b), off in zip(eigs.pairs, eigs.row_offsets):
        ex = np.exp(a * t)
        if b > 0:
            c, s = np.cos(b * t), np.sin(b * t)
            pr = p[off][:, None]
            pi = p[off + 1][:, None]
            out[:, off, :] = ex * (pr * c - pi * s)
            out[:, off + 1, :] = ex * (pr * s + pi * c)
        else:
            out[:, off, :] = p[off][:, None] * ex
    return out[0] if single else out


def reconstruct(modes: ModeMatrix, eigs: EigenvalueSet, phi0: Array, time_axis: Array) -> Array:
    """Reconstruct state trajectories C_ref e^{Lambda t} phi0."""
    phit = evolve_phi(eigs, phi0, time_axis)
    if phit.ndim == 2:
        return modes.c_ref @ phit
    return np.einsum("mf,kfn->kmn", modes.c_ref, phit)


def temporal_cost(
    ens: TrajectoryEnsemble,
    subgrid_indices: Array,
    modes: ModeMatrix,
    eigs: EigenvalueSet,
    phi0: Array,
) -> float:
    """Mean squared reconstruction error over the subgrid trajectories."""
    idx = np.asarray(subgrid_indices, dtype=int)
    xhat = reconstruct(modes, eigs, phi0[:, idx], ens.time_axis)
    return float(np.mean((ens.states[idx] - xhat) ** 2))


def estimate_fundamental_frequency(x: Array, dt: float, settle_fraction: float = 0.5) -> float:
    """Dominant angular frequency (rad/s) from upward zero crossings.

    Uses the tail of the signal (after ``settle_fraction`` of the record) so
    transients do not bias the period estimate; crossing times are refined
    by linear interpolation.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[0]
    start = int(len(x) * settle_fraction)
    y = x[start:] - np.mean(x[start:])
    sign = y >= 0
    ups = np.nonzero(~sign[:-1] & sign[1:])[0]
    if len(ups) < 3:
        raise ConfigurationError("not enough oscillation periods to estimate a frequency")
    crossings = ups + y[ups] / (y[ups] - y[ups + 1])
    periods = np.diff(crossings) * dt
    return float(2.0 * np.pi / np.mean(periods))
