"""Gridded smoothing-spline interpolation, gradients, and Koopman-PDE costs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.interpolate import PPoly, RegularGridInterpolator

from .errors import ConfigurationError, StateError
from .spectral import EigenvalueSet, ModeMatrix, project_trajectories, build_projection_basis
from .systems import DynSystem, SimGrid, simulate_ensemble

Array = np.ndarray


# --- natural cubic smoothing splines ----------------------------------------


def smoothing_spline(x: Array, y: Array, p: float) -> PPoly:
    """Natural cubic smoothing spline through (x, y) columns.

    Minimizes ``p * sum (y - f)^2 + (1 - p) * int f''^2`` (Reinsch form);
    p = 1 gives the natural cubic interpolant.  ``y`` may be (n,) or (n, k);
    the returned piecewise polynomial evaluates all k columns at once.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigurationError("smoothing parameter must be in (0, 1]")
    x = np.asarray(x, dtype=float)
    y2 = np.asarray(y, dtype=float)
    squeeze = y2.ndim == 1
    if squeeze:
        y2 = y2[:, None]
    n, k = y2.shape
    if x.shape != (n,):
        raise ConfigurationError("x and y lengths disagree")
    if n < 2:
        raise ConfigurationError("need at least two sample sites")
    h = np.diff(x)
    if np.any(h <= 0):
        raise ConfigurationError("sample sites must be strictly increasing")
    if n == 2:
        f = y2
        m2 = np.zeros_like(y2)
    else:
        alpha = (1.0 - p) / p
        a = 1.0 / h[:-1]
        c = 1.0 / h[1:]
        b = -(a + c)
        qty = y2[:-2] * a[:, None] + y2[1:-1] * b[:, None] + y2[2:] * c[:, None]
        # A = alpha * QtQ + R, symmetric banded with bandwidth 2
        diag = alpha * (a**2 + b**2 + c**2) + (h[:-1] + h[1:]) / 3.0
        off1 = alpha * (b[:-1] * a[1:] + c[:-1] * b[1:]) + h[1:-1] / 6.0
        off2 = alpha * (c[:-2] * a[2:])
        kk = n - 2
        ab = np.zeros((3, kk))
        ab[2] = diag
        if kk > 1:
            ab[1, 1:] = off1
        if kk > 2:
            ab[0, 2:] = off2
        gamma = scipy.linalg.solveh_banded(ab, qty, lower=False, check_finite=False)
        f = y2.copy()
        if alpha:
            qg = np.zeros_like(y2)
            qg[:-2] += gamma * a[:, None]
            qg[1:-1] += gamma * b[:, None]
            qg[2:] += gamma * c[:, None]
            f -= alpha * qg
        m2 = np.vstack([np.zeros((1, k)), gamma, np.zeros((1, k))])
    hc = h[:, None]
    c3 = (m2[1:] - m2[:-1]) / (6.0 * hc)
    c2 = m2[:-1] / 2.0
    c1 = (f[1:] - f[:-1]) / hc - hc * (2.0 * m2[:-1] + m2[1:]) / 6.0
    c0 = f[:-1]
    coeffs = np.stack([c3, c2, c1, c0])
    if squeeze:
        coeffs = coeffs[:, :, 0]
    return PPoly(coeffs, x, extrapolate=True)


def smooth_grid_2d(axes, values: Array, target_axes, p: float) -> Array:
    """Tensor-product smoothing-spline resampling of 2-D gridded data.

    ``values`` may be (n1, n2) or a stack (K, n1, n2); all surfaces share
    one pair of banded factorizations.
    """
    x1, x2 = (np.asarray(a, dtype=float) for a in axes)
    t1, t2 = (np.asarray(a, dtype=float) for a in target_axes)
    z = np.asarray(values, dtype=float)
    squeeze = z.ndim == 2
    if squeeze:
        z = z[None]
    kk, n1, n2 = z.shape
    if (n1, n2) != (x1.size, x2.size):
        raise ConfigurationError("values shape does not match the sampling axes")
    along2 = smoothing_spline(x2, z.transpose(2, 0, 1).reshape(n2, kk * n1), p)(t2)
    along2 = along2.reshape(t2.size, kk, n1).transpose(2, 1, 0).reshape(n1, kk * t2.size)
    out = smoothing_spline(x1, along2, p)(t1)
    out = out.reshape(t1.size, kk, t2.size).transpose(1, 0, 2)
    return out[0] if squeeze else out


# --- eigenfunction fields ----------------------------------------------------


@dataclass(frozen=True)
class EigenfunctionField:
    """Eigenfunction samples on an interpolation grid (immutable).

    ``values`` is (n_phi, g1, g2); ``gradient`` (filled by
    :func:`gradient_central_diff`) is (n_phi, m, g1, g2).  ``valid_mask``
    flags nodes inside the sampling hull; ``separatrix_mask`` flags nodes
    to exclude near a separatrix (True = masked).
    """

    grid: SimGrid
    values: Array
    smoothing: float
    valid_mask: Array
    gradient: Optional[Array] = None
    separatrix_mask: Optional[Array] = None

    @property
    def n_phi(self) -> int:
        return self.values.shape[0]

    def kpde_mask(self, exclude_boundary_ring: bool = True) -> Array:
        """Nodes usable for the Koopman-PDE cost."""
        mask = self.valid_mask.copy()
        if exclude_boundary_ring:
            ring = np.zeros_like(mask)
            ring[1:-1, 1:-1] = True
            mask &= ring
        if self.separatrix_mask is not None:
            mask &= ~self.separatrix_mask
        return mask

    def _interpolator(self, data: Array) -> RegularGridInterpolator:
        return RegularGridInterpolator(
            tuple(self.grid.axes()), data, method="linear", bounds_error=False, fill_value=None
        )

    def evaluate(self, points) -> Array:
        """Linear-interpolated eigenfunction values at points, (k, n_phi)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        interp = self._interpolator(np.moveaxis(self.values, 0, -1))
        return interp(pts)

    def evaluate_gradient(self, points) -> Array:
        """Linear-interpolated gradient at points, (k, n_phi, m)."""
        if self.gradient is None:
            raise StateError("gradient not computed; call gradient_central_diff first")
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        nphi, m = self.gradient.shape[:2]
        data = np.moveaxis(self.gradient.reshape(nphi * m, *self.gradient.shape[2:]), 0, -1)
        out = self._interpolator(data)(pts)
        return out.reshape(pts.shape[0], nphi, m)


def _infer_sample_axes(points: Array):
    """Recover the rectangular sampling axes and node index of each point."""
    ax = [np.unique(points[:, d]) for d in range(points.shape[1])]
    if np.prod([a.size for a in ax]) != points.shape[0]:
        raise ConfigurationError("samples do not lie on a full regular rectangular grid")
    idx = [np.searchsorted(a, points[:, d]) for d, a in enumerate(ax)]
    return ax, idx


def interpolate_field(
    points: Array,
    phi0: Array,
    grid: SimGrid,
    smoothing: float = 1.0,
    sample_grid: Optional[SimGrid] = None,
) -> EigenfunctionField:
    """Fit per-eigenfunction smoothing-spline surfaces and sample them on ``grid``.

    ``points`` (n_t, 2) must form a regular rectangular sampling grid; when
    ``sample_grid`` is given its axes are used directly (points that drifted
    off the nominal nodes, e.g. under measurement noise, are assigned to
    their nominal node).  Target nodes outside the sampling hull are
    evaluated by extrapolation but flagged invalid.
    """
    points = np.asarray(points, dtype=float)
    phi0 = np.atleast_2d(np.asarray(phi0, dtype=float))
    if points.shape[1] != 2:
        raise ConfigurationError("spatial interpolation supports 2-D state spaces")
    if sample_grid is not None:
        ax = sample_grid.axes()
        if points.shape[0] != np.prod(sample_grid.counts):
            raise ConfigurationError("sample count does not match sample_grid")
        idx = [np.argmin(np.abs(a[None, :] - points[:, d][:, None]), axis=1) for d, a in enumerate(ax)]
    else:
        ax, idx = _infer_sample_axes(points)
    n1, n2 = (a.size for a in ax)
    flat_idx = idx[0] * n2 + idx[1]
    if np.unique(flat_idx).size != n1 * n2:
        raise ConfigurationError("samples do not cover every sampling-grid node exactly once")

    target_axes = grid.axes()
    z = np.empty((phi0.shape[0], n1, n2))
    z[:, idx[0], idx[1]] = phi0
    values = smooth_grid_2d(ax, z, target_axes, smoothing)

    in1 = (target_axes[0] >= ax[0][0]) & (target_axes[0] <= ax[0][-1])
    in2 = (target_axes[1] >= ax[1][0]) & (target_axes[1] <= ax[1][-1])
    valid = np.logical_and.outer(in1, in2)
    return EigenfunctionField(grid=grid, values=values, smoothing=smoothing, valid_mask=valid)


def gradient_central_diff(field: EigenfunctionField) -> EigenfunctionField:
    """Fill per-node gradients: central differences inside, one-sided
    second-order stencils on the boundary (grid-spacing perturbations)."""
    dx = field.grid.spacing()
    parts = np.gradient(field.values, *dx, axis=(1, 2), edge_order=2)
    return replace(field, gradient=np.stack(parts, axis=1))


def kpde_residual(field: EigenfunctionField, eigs: EigenvalueSet, drift_nodes: Array) -> Array:
    """Per-node Koopman-PDE residual  grad(Phi) . F  -  Lambda Phi.

    ``drift_nodes`` is F evaluated on the interpolation grid, (m, g1, g2).
    """
    if field.gradient is None:
        raise StateError("gradient not computed; call gradient_central_diff first")
    if drift_nodes.shape != (field.grid.ndim,) + field.values.shape[1:]:
        raise ConfigurationError("drift_nodes shape does not match the field grid")
    lhs = np.einsum("fmij,mij->fij", field.gradient, drift_nodes)
    rhs = np.einsum("fg,gij->fij", eigs.lam_matrix(), field.values)
    return lhs - rhs


def kpde_cost(residual: Array, mask: Optional[Array] = None, clamp: Optional[float] = None) -> float:
    """Mean of squared residual entries over unmasked nodes.

    ``clamp`` symmetrically limits residual entries before squaring, which
    bounds the influence of exploding gradients near discontinuities.
    """
    r = np.asarray(residual, dtype=float)
    if mask is not None:
        if not np.any(mask):
            raise ConfigurationError("KPDE cost requires at least one unmasked node")
        r = r[:, mask]
    if r.size == 0:
        raise ConfigurationError("KPDE cost requires at least one residual entry")
    if clamp:
        r = np.clip(r, -clamp, clamp)
    return float(np.mean(r**2))


def drift_on_grid(sys: DynSystem, grid: SimGrid) -> Array:
    """Evaluate the drift on all grid nodes, shape (m, g1, g2)."""
    pts = grid.points()
    f = sys.drift(pts)
    return np.moveaxis(f.reshape(tuple(grid.counts) + (sys.state_dim,)), -1, 0)


def refine_field(
    sys: DynSystem,
    eigs: EigenvalueSet,
    modes: ModeMatrix,
    fine_grid: SimGrid,
    fine_interp: SimGrid,
    dt: float,
    n_samples: int,
    ridge_weight: float,
    smoothing: float = 1.0,
    shift=None,
    threads: int = 1,
):
    """High-resolution one-time resampling with the optimized eigenvalues.

    Simulates trajectories from ``fine_grid``, projects each for its
    eigenfunction initial conditions, interpolates onto ``fine_interp``
    and computes gradients.  Returns (field, phi0_fine).
    """
    ens = simulate_ensemble(sys, fine_grid, dt, n_samples, fine_grid.points()[0], threads=threads)
    data = ens.shift_by(shift) if shift is not None else ens
    basis = build_projection_basis(modes, eigs, ens.time_axis)
    phi0 = project_trajectories(data.flattened(), basis, ridge_weight)
    field = interpolate_field(ens.initial_conditions, phi0, fine_interp, smoothing, sample_grid=fine_grid)
    return gradient_central_diff(field), phi0


def separatrix_mask(field: EigenfunctionField, eigs: EigenvalueSet, margin: float) -> Array:
    """Mask nodes whose zero-eigenvalue indicator is near the plateau midpoint.

    Plateau levels are the two dominant modes of the indicator histogram;
    a unimodal indicator (single basin) yields an empty mask with a warning.
    """
    zero = np.nonzero((eigs.pairs[:, 0] == 0.0) & (eigs.pairs[:, 1] == 0.0))[0]
    if zero.size == 0:
        raise StateError("no zero-eigenvalue indicator eigenfunction in the set")
    row = int(eigs.row_offsets[zero[0]])
    v = field.values[row][field.valid_mask]
    hist, edges = np.histogram(v, bins=64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    i1 = int(np.argmax(hist))
    span = max(v.max() - v.min(), np.finfo(float).tiny)
    far = np.abs(centers - centers[i1]) > 0.25 * span
    if not np.any(far) or hist[far].max() < 0.05 * hist[i1]:
        warnings.warn("indicator eigenfunction looks unimodal (single basin); empty separatrix mask")
        return np.zeros(field.values.shape[1:], dtype=bool)
    i2 = int(np.nonzero(far)[0][np.argmax(hist[far])])
    levels = []
    for i in (i1, i2):
        near = np.abs(v - centers[i]) <= 2.5 * (edges[1] - edges[0])
        levels.append(float(np.mean(v[near])))
    midpoint = 0.5 * (levels[0] + levels[1])
    return np.abs(field.values[row] - midpoint) < margin
