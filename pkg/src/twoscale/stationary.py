"""Invariant densities of the frozen fast dynamics and zero-cost pairs.

The stationary equation with reflecting (zero-flux) boundaries is solved
in conservative flux form.  Each interior face carries a log Gibbs factor

    theta_f = trapezoid of 2 a_d / c_dd between the two cell centers
              - difference of log c_dd

and the discrete flux through the face is

    J_f = (c_dd(face)/2h) * (m_hi * exp(-theta_f/2) - m_lo * exp(theta_f/2)).

Zeroing all fluxes reproduces, cell by cell, exactly the quadrature used
by the 1D closed form K/c * exp(int 2a/c), so the two routes agree to
rounding rather than to discretization order; in 2D with a product-form
drift the discrete solution factorizes for the same reason.  The null
vector of the assembled divergence operator is found by shifted inverse
iteration on a sparse LU factorization.

Zero-cost pairs are produced by successive approximation: freeze the slow
path, solve the frozen invariant density slice by slice, average the slow
drift against it, integrate the resulting ODE with RK4, repeat until the
sup change of the path stalls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .flows import DensityFlow
from .grids import GradientField, Grid1D
from .model import CoefficientSet, DerivedCoefficients, FrozenFast, derive
from .paths import Path


class NumericalError(RuntimeError):
    """Raised when an iterative solver fails to meet its contract."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class InvariantDensity:
    """Normalized stationary density on a grid, with solver evidence."""

    grid: object
    values: np.ndarray
    residual: float
    iterations: int
    log_theta: list = field(default_factory=list, repr=False)

    @property
    def min_value(self) -> float:
        return float(np.min(self.values))

    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def log_grad_half(self):
        """Exact discrete Dm/(2m) on faces, from the flux balance.

        The zero-flux solution satisfies ln m_hi - ln m_lo = theta_f per
        face, so this avoids differencing logs of tail values that sit
        near the floating-point floor.
        """
        return GradientField(self.grid,
                             [self.log_theta[d] / (2.0 * self.grid.spacing(d))
                              for d in range(self.grid.dim)])


def _axis_center_fields(frozen: FrozenFast, grid):
    """Per-axis drift components and diagonal diffusion at cell centers."""
    pts = grid.points()
    a = frozen.a(pts)
    c = frozen.c(pts)
    a_axes, c_axes = [], []
    for d in range(grid.dim):
        a_axes.append(a[:, d].reshape(grid.shape))
        c_axes.append(c[:, d, d].reshape(grid.shape))
    return a_axes, c_axes


def _gibbs_theta(grid, a_axes, c_axes):
    """Per-axis face log factors from trapezoid center quadrature."""
    thetas = []
    for d in range(grid.dim):
        f = 2.0 * a_axes[d] / c_axes[d]
        h = grid.spacing(d)
        if grid.dim == 1:
            tr = 0.5 * h * (f[:-1] + f[1:])
            dlc = np.diff(np.log(c_axes[d]))
        elif d == 0:
            tr = 0.5 * h * (f[:-1, :] + f[1:, :])
            dlc = np.diff(np.log(c_axes[d]), axis=0)
        else:
            tr = 0.5 * h * (f[:, :-1] + f[:, 1:])
            dlc = np.diff(np.log(c_axes[d]), axis=1)
        thetas.append(tr - dlc)
    return thetas


def stationary_operator(frozen: FrozenFast, grid) -> tuple:
    """Sparse flux-divergence operator whose null vector is the density.

    Returns (L, thetas); rows are cells, L @ m is the discrete stationary
    residual including the zero-flux boundary.
    """
    a_axes, c_axes = _axis_center_fields(frozen, grid)
    thetas = _gibbs_theta(grid, a_axes, c_axes)
    n_cells = grid.n_cells
    idx = np.arange(n_cells).reshape(grid.shape)
    rows, cols, vals = [], [], []
    for d in range(grid.dim):
        h = grid.spacing(d)
        cf = frozen.c(grid.face_points(d))[:, d, d].reshape(grid.face_shape(d))
        D = (0.5 * cf / h).ravel()
        th = thetas[d].ravel()
        up = np.exp(-0.5 * th)     # coefficient of the high-side cell in J_f
        dn = np.exp(0.5 * th)      # coefficient of the low-side cell
        if grid.dim == 1:
            lo, hi = idx[:-1], idx[1:]
        elif d == 0:
            lo, hi = idx[:-1, :].ravel(), idx[1:, :].ravel()
        else:
            lo, hi = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        # J_f = D (m_hi up - m_lo dn); divergence adds J/h to the low cell
        # and subtracts it from the high cell
        rows.append(np.concatenate([lo, lo, hi, hi]))
        cols.append(np.concatenate([hi, lo, hi, lo]))
        vals.append(np.concatenate([D * up, -D * dn, -D * up, D * dn]) / h)
    L = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_cells, n_cells))
    return L, thetas


def _null_vector(L, max_iter=60, tol=1e-15, shift=1e-8):
    """Shifted inverse iteration for the one-dimensional nullspace of L.

    The shift sits between the zero mode and the spectral gap of the
    generator (order one for the supported models), so each solve
    amplifies the stationary direction by about 1/shift.  Residuals are
    measured relative to the size of the flux terms being cancelled,
    which keeps the criterion meaningful when tail cells carry huge
    Gibbs factors.  Iteration continues to the rounding floor (stall
    detection) rather than stopping at an adequate residual: the density
    gets differentiated downstream, which amplifies any leftover error
    by the inverse cell width.
    """
    n = L.shape[0]
    absL = abs(L)
    lu = spla.splu((L - shift * sp.eye(n, format="csr")).tocsc())

    def iterate(v0):
        v = v0 / np.linalg.norm(v0)
        best = (v, np.inf, np.inf, 0)
        prev_rel = np.inf
        for it in range(1, max_iter + 1):
            w = lu.solve(v)
            nw = np.linalg.norm(w)
            if not np.isfinite(nw) or nw == 0:
                raise NumericalError("inverse iteration produced a degenerate vector")
            v = w / nw
            res = float(np.max(np.abs(L @ v)))
            cancel = float(np.max(absL @ np.abs(v))) or 1.0
            rel = res / cancel
            if rel < best[2]:
                best = (v, res, rel, it)
            if rel <= tol:
                return v, res, rel, it
            if rel > 0.5 * prev_rel:   # gains are exhausted
                break
            prev_rel = rel
        return best

    v1, res1, rel1, it1 = iterate(np.ones(n))
    if rel1 > 1e-8:
        raise NumericalError(
            f"stationary nullspace iteration stalled at relative residual {rel1:.3e}",
            {"residual": res1, "relative": rel1})
    # a second start decorrelated from the first must land on the same line,
    # otherwise the nullspace is not one-dimensional at solver tolerance
    probe = np.cos(np.linspace(0.0, 9.0, n))
    probe = probe - (probe @ v1) * v1
    v2, _, _, _ = iterate(probe)
    align = abs(float(v2 @ v1))
    if align < 1.0 - 1e-8:
        raise NumericalError(
            f"stationary nullspace is not one-dimensional (alignment {align:.6f})",
            {"alignment": align})
    return v1, res1, it1


def invariant_density_grid(frozen: FrozenFast, grid) -> InvariantDensity:
    """Stationary density of the frozen fast dynamics on a 1D or 2D grid."""
    L, thetas = stationary_operator(frozen, grid)
    v, res, its = _null_vector(L)
    if np.sum(v) < 0:
        v = -v
    if np.min(v) < -1e-10 * np.max(np.abs(v)):
        raise NumericalError(
            f"null vector is not signed consistently (min {np.min(v):.2e}); "
            "the stationary problem is ill posed on this grid")
    v = np.clip(v, 0.0, None).reshape(grid.shape)
    v = v / grid.integrate(v)
    return InvariantDensity(grid=grid, values=v,
                            residual=res, iterations=its, log_theta=thetas)


def invariant_density_1d(a_fn, c_fn, grid: Grid1D) -> InvariantDensity:
    """Closed-form stationary density K/c * exp(int 2a/c) on the box.

    The exponent is accumulated by trapezoid quadrature between cell
    centers, which the flux solver reproduces exactly; the normalization
    is the grid's midpoint rule.
    """
    x = grid.centers
    a = np.asarray(a_fn(x), dtype=float).reshape(-1)
    c = np.asarray(c_fn(x), dtype=float).reshape(-1)
    if np.any(c <= 0):
        raise ValueError("c must be positive for the closed form")
    f = 2.0 * a / c
    log_m = np.concatenate([[0.0], np.cumsum(0.5 * grid.h * (f[:-1] + f[1:]))])
    log_m = log_m - np.log(c)
    log_m -= np.max(log_m)
    vals = np.exp(log_m)
    vals = vals / grid.integrate(vals)
    return InvariantDensity(grid=grid, values=vals, residual=0.0, iterations=0)


@dataclass
class ZeroCostPair:
    """Fixed point of the averaged dynamics with its invariant flow."""

    path: Path
    flow: DensityFlow
    residuals: list
    converged: bool
    iterations: int


def _averaged_drift_factory(coeffs, flow_slices, times, grid):
    """F(s, u) = int A(s, u, x) m_s(x) dx with m linear in s between slices."""
    pts = grid.points()
    vol = grid.cell_volume

    def F(s, u):
        j = int(np.clip(np.searchsorted(times, s, side="right") - 1, 0,
                        len(times) - 2))
        t0, t1 = times[j], times[j + 1]
        w = 0.0 if t1 == t0 else np.clip((s - t0) / (t1 - t0), 0.0, 1.0)
        m = (1 - w) * flow_slices[j] + w * flow_slices[j + 1]
        Avals = np.asarray(coeffs.A(s, u, pts), dtype=float)
        return vol * (Avals * m.reshape(-1, 1)).sum(axis=0)

    return F


def _rk4(F, times, x0):
    out = np.zeros((len(times), len(x0)))
    out[0] = x0
    for j in range(len(times) - 1):
        t, dt = times[j], times[j + 1] - times[j]
        x = out[j]
        k1 = F(t, x)
        k2 = F(t + dt / 2, x + dt / 2 * k1)
        k3 = F(t + dt / 2, x + dt / 2 * k2)
        k4 = F(t + dt, x + dt * k3)
        out[j + 1] = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return out


def zero_cost_path(coeffs: CoefficientSet, x0, times, grid,
                   derived: DerivedCoefficients | None = None,
                   tol: float = 1e-8, max_iter: int = 50) -> ZeroCostPair:
    """Successive approximation of the zero-cost (path, flow) pair.

    Starts from the constant path at x0.  Each sweep freezes the current
    path, computes the per-slice invariant density, and re-integrates the
    averaged slow ODE.  Convergence is sup-norm stalling of the path below
    tol; failure to converge within max_iter raises NumericalError with
    the residual curve attached.
    """
    derived = derived or derive(coeffs)
    times = np.asarray(times, dtype=float)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    values = np.tile(x0, (len(times), 1))
    residuals = []
    reusable = (not coeffs.fast_u_dependent) and (not coeffs.time_dependent)
    flow_slices = None
    for it in range(1, max_iter + 1):
        if reusable and flow_slices is not None:
            pass   # invariant density does not depend on the path
        else:
            flow_slices = []
            cache = {}
            for j, t in enumerate(times):
                key = (0.0 if not coeffs.time_dependent else t,
                       None if not coeffs.fast_u_dependent else tuple(values[j]))
                if key not in cache:
                    frozen = FrozenFast(coeffs, derived, t, values[j])
                    cache[key] = invariant_density_grid(frozen, grid).values
                flow_slices.append(cache[key])
        F = _averaged_drift_factory(coeffs, flow_slices, times, grid)
        new_values = _rk4(F, times, x0)
        residual = float(np.max(np.abs(new_values - values)))
        residuals.append(residual)
        values = new_values
        if residual <= tol:
            flow = DensityFlow(times, list(flow_slices), grid)
            return ZeroCostPair(path=Path(times, values), flow=flow,
                                residuals=residuals, converged=True,
                                iterations=it)
    raise NumericalError(
        f"zero-cost iteration did not reach tol {tol:.1e} in {max_iter} sweeps "
        f"(last residual {residuals[-1]:.3e})",
        {"residuals": residuals})
