"""Action functionals for the slow-path / occupation-flow pair.

Two independent evaluation routes are kept deliberately separate:

* rate_closed_form assembles per-slice cell solutions (projected drift,
  projected coupling, effective mobility) and evaluates the explicit
  quadratic expression

      I = 1/2 int ||Dm/2m - Phi||^2_{c,m} ds
        + 1/2 int ||Xdot - int A m - int G (Dm/2m - Phi) m||^2_{Q^+} ds.

* rate_sup_form evaluates the variational characterization

      sup over (lambda, h) of
          lambda . (Xdot - int A m) + <Dh, Dm/2m - c^{-1}(a - div c/2)>
          - 1/2 lambda . Cbar lambda - lambda . int G Dh m
          - 1/2 ||Dh||^2_{c,m}

  with h restricted to a declared spline-times-cutoff basis, using only
  raw coefficient quadratures (no elliptic solves).

Both use the same face inner product, and the basis fields are discrete
gradients, so the restricted supremum can never exceed the closed form:
over the full space of discrete gradients the two expressions are equal
by completing the square, and the restriction only shrinks the sup.
"""

from __future__ import annotations

import hashlib
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .flows import DensityFlow
from .grids import GradientField, face_inner, face_weights, log_gradient_half
from .model import CoefficientSet, FrozenFast, derive
from .paths import Path
from .poisson import CellSolution, raw_drift_field, solve_cell
from .stationary import NumericalError

DEGENERATE_TOL = 1e-14      # ||C|| below this means no slow noise
CONSTRAINT_TOL = 1e-6       # allowed averaged-drift mismatch when C = 0
PINV_RELATIVE_CUT = 1e-10   # spectral cutoff of the mobility pseudo-inverse


def psd_pinv(Q, rel_cut: float = PINV_RELATIVE_CUT):
    """Moore-Penrose inverse of a symmetric PSD matrix by spectral cutoff.

    Returns (pinv, range_projector, rank); eigenvalues below
    rel_cut * max eigenvalue are treated as exact zeros.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    cut = rel_cut * max(float(np.max(np.abs(w))), 1e-300)
    keep = w > cut
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    pinv = (V * inv_w) @ V.T
    proj = (V * keep.astype(float)) @ V.T
    return pinv, proj, int(keep.sum())


# ---------------------------------------------------------------------------
# slice-level quadratures


def averaged_slow_drift(frozen: FrozenFast, m, grid) -> np.ndarray:
    """Center quadrature of int A(u, x) m(x) dx, an R^n vector."""
    A = frozen.A(grid.points())
    return np.einsum("Ni,N->i", A, np.asarray(m, dtype=float).ravel()) \
        * grid.cell_volume


def averaged_slow_mobility(frozen: FrozenFast, m, grid) -> np.ndarray:
    """Center quadrature of int C(u, x) m(x) dx, an n x n matrix."""
    C = frozen.C(grid.points())
    return np.einsum("Nij,N->ij", C, np.asarray(m, dtype=float).ravel()) \
        * grid.cell_volume


def coupling_moment(frozen: FrozenFast, m_faces, gfield: GradientField, grid
                    ) -> np.ndarray:
    """Face quadrature of int G(u, x) p(x) m(x) dx for a face field p."""
    out = np.zeros(frozen.dims.n)
    for d in range(grid.dim):
        G = frozen.G(grid.face_points(d))[:, :, d]        # (F, n)
        p = gfield.comps[d].ravel()
        w = np.asarray(m_faces[d]).ravel() * grid.cell_volume
        out += np.einsum("Fi,F->i", G, p * w)
    return out


def drift_mismatch(frozen: FrozenFast, m, grid,
                   grad_half: GradientField | None = None) -> GradientField:
    """Face field div(c m)/(2m) - a + div c/2 = c (Dm/2m - c^{-1}(a - div c/2)).

    The conjugate drift mismatch; it vanishes exactly on invariant
    densities and feeds the occupation-rate integrand.
    """
    g = grad_half if grad_half is not None else log_gradient_half(grid, m)
    phi_raw = raw_drift_field(frozen, grid)
    comps = []
    for d in range(grid.dim):
        cd = frozen.c(grid.face_points(d))[:, d, d].reshape(grid.face_shape(d))
        k = cd * (g.comps[d] - phi_raw.comps[d])
        if not np.all(np.isfinite(k)):
            idx = np.argwhere(~np.isfinite(k))[0]
            raise NumericalError(
                f"non-finite drift mismatch at axis {d}, face {tuple(idx)}")
        comps.append(k)
    return GradientField(grid, comps)


def rate_density_slice(frozen: FrozenFast, m, phi: GradientField, grid,
                       grad_half: GradientField | None = None) -> float:
    """Occupation-rate integrand 1/2 int ||Dm/2m - Phi||^2_c m dx, one slice."""
    g = grad_half if grad_half is not None else log_gradient_half(grid, m)
    diff = g - phi
    for d in range(grid.dim):
        bad = ~np.isfinite(diff.comps[d])
        if np.any(bad):
            idx = tuple(np.argwhere(bad)[0])
            raise NumericalError(
                f"non-finite rate integrand at axis {d}, face {idx}",
                {"axis": d, "face": idx})
    c_f = frozen.c_diag_faces(grid)
    m_f = face_weights(grid, m)
    return 0.5 * float(face_inner(grid, diff, diff, c_f, m_f))


def sup_integrand(frozen: FrozenFast, m, g: GradientField, xdot_s, lam,
                  p: GradientField, grid) -> float:
    """Variational slice integrand at explicit arguments (lambda, p).

    V = lambda . (xdot - int A m) + <p, Dm/2m - c^{-1}(a - div c/2)>_{c,m}
        - 1/2 lambda . Cbar lambda - lambda . int G p m - 1/2 ||p||^2_{c,m}.

    Plugging the closed-form optimizers back in reproduces the slice value
    of rate_closed_form; used as a consistency probe, not in the solvers.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    c_f = frozen.c_diag_faces(grid)
    m_f = face_weights(grid, m)
    phi_raw = raw_drift_field(frozen, grid)
    rho = np.atleast_1d(xdot_s) - averaged_slow_drift(frozen, m, grid)
    Cbar = averaged_slow_mobility(frozen, m, grid)
    lin = float(face_inner(grid, p, g - phi_raw, c_f, m_f))
    quad = float(face_inner(grid, p, p, c_f, m_f))
    cross = float(lam @ coupling_moment(frozen, m_f, p, grid))
    return float(lam @ rho) + lin - 0.5 * float(lam @ Cbar @ lam) \
        - cross - 0.5 * quad


# ---------------------------------------------------------------------------
# cell-solution cache


class CellCache:
    """LRU cache of cell solutions keyed by what the coefficients can see.

    Coefficients independent of (t, u) collapse the key to a digest of
    the slice density, so constant flows are solved exactly once.
    """

    def __init__(self, coeffs: CoefficientSet, derived=None, capacity: int = 512):
        self.coeffs = coeffs
        self.derived = derived if derived is not None else derive(coeffs)
        self.capacity = capacity
        self._store = OrderedDict()

    def _key(self, t, u, m):
        tk = round(float(t), 12) if self.coeffs.time_dependent else None
        uk = np.asarray(u, dtype=float).tobytes() \
            if self.coeffs.fast_u_dependent else None
        mk = hashlib.blake2b(np.ascontiguousarray(m).tobytes(),
                             digest_size=16).digest()
        return (tk, uk, mk)

    def get(self, t, u, m, grid) -> CellSolution:
        key = self._key(t, u, m)
        if key in self._store:
            self._store.move_to_end(key)
            return self._store[key]
        frozen = self.coeffs.frozen(t, u, self.derived)
        sol = solve_cell(frozen, m, grid)
        self._store[key] = sol
        if len(self._store) > self.capacity:
            self._store.popitem(last=False)
        return sol


# ---------------------------------------------------------------------------
# closed form


@dataclass
class RateBreakdown:
    """Closed-form rate split into its occupation and slow-excursion parts."""

    fast_part: float
    slow_part: float
    total: float
    times: np.ndarray
    fast_slices: np.ndarray
    slow_slices: np.ndarray
    lambda_hat: np.ndarray          # (S, n) per-slice slow optimizer
    range_violation: np.ndarray     # (S,) distance of residual from range(Q)
    degenerate: bool
    diagnostics: dict = field(default_factory=dict)

    def as_json_dict(self) -> dict:
        return {
            "fast_part": self.fast_part,
            "slow_part": self.slow_part,
            "total": self.total,
            "times": self.times.tolist(),
            "fast_slices": self.fast_slices.tolist(),
            "slow_slices": self.slow_slices.tolist(),
            "lambda_hat": self.lambda_hat.tolist(),
            "range_violation": self.range_violation.tolist(),
            "degenerate": self.degenerate,
        }


def _slow_derivative(X: Path, times: np.ndarray) -> np.ndarray:
    """dX/ds sampled on the flow's slice times (centered, one-sided ends)."""
    xs = np.stack([X(t) for t in times])
    if len(times) < 2:
        raise ValueError("a rate evaluation needs at least two time slices")
    return np.gradient(xs, times, axis=0)


def rate_closed_form(coeffs: CoefficientSet, X: Path, flow: DensityFlow,
                     derived=None, cache: CellCache | None = None
                     ) -> RateBreakdown:
    """Explicit per-slice evaluation of the pair rate functional.

    Slices with no slow noise (||C|| < 1e-14 on the grid) switch to the
    averaged-drift constraint: a residual beyond 1e-6 makes the rate
    infinite, reported with per-slice diagnostics.  A residual outside
    the range of a singular mobility does the same.
    """
    if cache is None:
        cache = CellCache(coeffs, derived)
    grid = flow.grid
    times = flow.times
    S = len(times)
    n = coeffs.dims.n
    xdot = _slow_derivative(X, times)
    fast = np.zeros(S)
    slow = np.zeros(S)
    lam = np.zeros((S, n))
    viol = np.zeros(S)
    degenerate_slices = np.zeros(S, dtype=bool)
    infinite = None
    for j, t in enumerate(times):
        u = X(t)
        m = flow.slices[j]
        frozen = coeffs.frozen(t, u, cache.derived)
        sol = cache.get(t, u, m, grid)
        g = flow.grad_half(j)
        e = g - sol.phi
        fast[j] = rate_density_slice(frozen, m, sol.phi, grid, grad_half=g)
        m_f = face_weights(grid, m)
        rho = xdot[j] - averaged_slow_drift(frozen, m, grid)
        degenerate_slices[j] = \
            float(np.max(np.abs(frozen.C(grid.points())))) < DEGENERATE_TOL
        if degenerate_slices[j]:
            viol[j] = float(np.max(np.abs(rho)))
            if viol[j] > CONSTRAINT_TOL and infinite is None:
                infinite = {"slice": j, "time": float(t),
                            "constraint_residual": viol[j],
                            "reason": "averaged-drift constraint violated "
                                      "with degenerate slow noise"}
            continue
        r = rho - coupling_moment(frozen, m_f, e, grid)
        qp, proj, rank = psd_pinv(sol.q)
        lam[j] = qp @ r
        slow[j] = 0.5 * float(r @ qp @ r)
        if rank < n:
            viol[j] = float(np.linalg.norm(r - proj @ r))
            if viol[j] > 1e-8 * (1.0 + np.linalg.norm(r)) and infinite is None:
                infinite = {"slice": j, "time": float(t),
                            "range_violation": viol[j],
                            "reason": "slow residual outside range of the "
                                      "effective mobility"}
    fast_part = float(np.trapezoid(fast, times))
    slow_part = float(np.trapezoid(slow, times))
    total = fast_part + slow_part
    diagnostics = {}
    if infinite is not None:
        total = np.inf
        diagnostics = infinite
    return RateBreakdown(
        fast_part=fast_part, slow_part=slow_part, total=total, times=times,
        fast_slices=fast, slow_slices=slow, lambda_hat=lam,
        range_violation=viol, degenerate=bool(degenerate_slices.all()),
        diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# test-function basis for the variational form


def eta_cutoff(y):
    """Radial cutoff profile: 1 up to 1, smoothly to 0 at 2, 0 beyond.

    The taper is 1 - exp(-(2-y)^2/(y-1)), which leaves 1 with all
    derivatives flat and meets 0 with zero slope.
    """
    y = np.asarray(y, dtype=float)
    out = np.ones_like(y)
    out[y >= 2.0] = 0.0
    mid = (y > 1.0) & (y < 2.0)
    ym = y[mid]
    out[mid] = 1.0 - np.exp(-((2.0 - ym) ** 2) / (ym - 1.0))
    return out


def _axis_spline_values(x, n_splines: int, span: float) -> np.ndarray:
    """Values of n_splines cubic B-splines at points x, knots over [-span, span]."""
    knots = np.linspace(-span, span, n_splines + 4)
    vals = np.zeros((n_splines, x.size))
    for j in range(n_splines):
        coeff = np.zeros(n_splines)
        coeff[j] = 1.0
        spl = BSpline(knots, coeff, 3, extrapolate=False)
        vals[j] = np.nan_to_num(spl(x), nan=0.0)
    return vals


@dataclass
class SplineBasis:
    """Cutoff-tapered spline potentials and their discrete gradients.

    potentials: (K, cells...) center values of h_j = spline_j * eta(|x|/r).
    fields[j]: the discrete gradient of potentials[j].  Everything the
    variational form tests against lives in the span of these fields.
    """

    grid: object
    potentials: np.ndarray
    cutoff_radius: float
    span: float

    @classmethod
    def build(cls, grid, n_splines: int = 16, cutoff_radius: float = 4.0,
              span: float | None = None) -> "SplineBasis":
        if span is None:
            span = min(2.0 * cutoff_radius, float(np.max(np.abs(grid.points()))))
        pts = grid.points()
        if grid.dim == 1:
            x = pts[:, 0] if pts.ndim == 2 else pts
            vals = _axis_spline_values(x, n_splines, span)
            radius = np.abs(x)
        else:
            vx = _axis_spline_values(np.unique(pts[:, 0]), n_splines, span)
            vy = _axis_spline_values(np.unique(pts[:, 1]), n_splines, span)
            vals = np.einsum("ax,by->abxy", vx, vy).reshape(
                n_splines * n_splines, -1)
            radius = np.linalg.norm(pts, axis=1)
        pot = vals * eta_cutoff(radius / cutoff_radius)[None, :]
        pot = pot.reshape((-1,) + grid.shape)
        return cls(grid=grid, potentials=pot, cutoff_radius=cutoff_radius,
                   span=span)

    def __len__(self) -> int:
        return self.potentials.shape[0]

    def gradient_stack(self) -> list:
        """Per-axis arrays (K, n_faces) of the basis gradients, flattened."""
        out = []
        for d in range(self.grid.dim):
            rows = [self.grid.face_diff(p, d).ravel() for p in self.potentials]
            out.append(np.stack(rows))
        return out


# ---------------------------------------------------------------------------
# variational (sup) form


@dataclass
class RateSupResult:
    """Restricted-dual value: a certified lower bound of the closed form."""

    value: float
    times: np.ndarray
    slice_values: np.ndarray
    lambda_sup: np.ndarray
    pruned: int
    notes: list = field(default_factory=list)

    def __float__(self) -> float:
        return self.value


def _slice_quadratures(frozen, m, g, basis_grads, grid):
    """(M, d, E, cw) blocks of the slice quadratic in (beta, lambda)."""
    c_f = frozen.c_diag_faces(grid)
    m_f = face_weights(grid, m)
    phi_raw = raw_drift_field(frozen, grid)
    M = None
    dvec = None
    E = None
    for dax in range(grid.dim):
        Dh = basis_grads[dax]
        w = (c_f[dax] * m_f[dax]).ravel() * grid.cell_volume
        target = (g.comps[dax] - phi_raw.comps[dax]).ravel()
        Mc = (Dh * w) @ Dh.T
        dc = (Dh * w) @ target
        G = frozen.G(grid.face_points(dax))[:, :, dax]
        Ec = (Dh * (np.asarray(m_f[dax]).ravel() * grid.cell_volume)) @ G
        M = Mc if M is None else M + Mc
        dvec = dc if dvec is None else dvec + dc
        E = Ec if E is None else E + Ec
    return M, dvec, E


def _pruned_pinv_apply(M, notes):
    """Gram pseudo-inverse with diagonal pruning; returns (apply, pruned)."""
    K = M.shape[0]
    diag = np.diag(M)
    keep = diag > 1e-12 * max(float(diag.max(initial=0.0)), 1e-300)
    pruned = int(K - keep.sum())
    Mk = M[np.ix_(keep, keep)]
    w, V = np.linalg.eigh(Mk) if Mk.size else (np.zeros(0), np.zeros((0, 0)))
    wmax = float(np.max(w)) if w.size else 0.0
    spec_keep = w > 1e-12 * max(wmax, 1e-300)
    pruned += int(spec_keep.size - spec_keep.sum())
    if pruned > 0:
        notes.append(f"pruned {pruned} basis functions with negligible or "
                     "dependent energy")
        warnings.warn("test-function basis pruned for conditioning",
                      stacklevel=3)
    inv_w = np.where(spec_keep, 1.0 / np.where(spec_keep, w, 1.0), 0.0)

    def apply(z):
        zk = z[keep] if z.ndim == 1 else z[keep, :]
        out_k = (V * inv_w) @ (V.T @ zk)
        out = np.zeros_like(z)
        out[keep] = out_k
        return out

    return apply


def _sup_slice(frozen, m, g, xdot, basis_grads, grid, lambda_box):
    """Maximize the slice quadratic over (lambda in box, beta in span)."""
    n = frozen.dims.n
    notes = []
    M, dvec, E = _slice_quadratures(frozen, m, g, basis_grads, grid)
    minv = _pruned_pinv_apply(M, notes)
    rho = xdot - averaged_slow_drift(frozen, m, grid)
    Cbar = averaged_slow_mobility(frozen, m, grid)

    def value_at(lam):
        z = dvec - E @ lam
        return float(lam @ rho - 0.5 * lam @ Cbar @ lam + 0.5 * z @ minv(z))

    H = Cbar - E.T @ minv(E)
    b = rho - E.T @ minv(dvec)
    Hp, proj, _ = psd_pinv(H, 1e-12)
    lam0 = Hp @ b
    box = np.broadcast_to(np.asarray(lambda_box, dtype=float), (n,))
    cands = [np.clip(lam0, -box, box)]
    b_perp = b - proj @ b
    if np.linalg.norm(b_perp) > 1e-10 * (1.0 + np.linalg.norm(b)):
        # the quadratic is flat along b_perp: walk to the box edge
        step = b_perp / np.max(np.abs(b_perp) / box)
        cands.append(np.clip(lam0 + step, -box, box))
    best_lam, best_val = None, -np.inf
    for lam in cands:
        v = value_at(lam)
        if v > best_val:
            best_lam, best_val = lam, v
    return best_val, best_lam, notes


def rate_sup_form(coeffs: CoefficientSet, X: Path, flow: DensityFlow,
                  basis: SplineBasis | None = None, lambda_box=10.0,
                  derived=None) -> RateSupResult:
    """Variational form restricted to a finite test basis.

    Never exceeds rate_closed_form (same quadratures, smaller feasible
    set); with enough splines the gap closes to quadrature level.
    """
    grid = flow.grid
    if basis is None:
        basis = SplineBasis.build(grid)
    if derived is None:
        derived = derive(coeffs)
    times = flow.times
    xdot = _slow_derivative(X, times)
    basis_grads = basis.gradient_stack()
    S = len(times)
    vals = np.zeros(S)
    lams = np.zeros((S, coeffs.dims.n))
    notes: list = []
    for j, t in enumerate(times):
        frozen = coeffs.frozen(t, X(t), derived)
        v, lam, slice_notes = _sup_slice(
            frozen, flow.slices[j], flow.grad_half(j), xdot[j],
            basis_grads, grid, lambda_box)
        vals[j] = v
        lams[j] = lam
        notes.extend(slice_notes)
    value = float(np.trapezoid(vals, times))
    return RateSupResult(value=value, times=times, slice_values=vals,
                         lambda_sup=lams,
                         pruned=sum("pruned" in s for s in notes), notes=notes)


# ---------------------------------------------------------------------------
# projected slow rate over a parametric flow family


@dataclass
class ProjectedRateResult:
    value: float
    times: np.ndarray
    slice_values: np.ndarray
    family_params: np.ndarray      # (S, 2): mean and log sigma per slice
    trace: list = field(default_factory=list)


def rate_projected_slow(coeffs: CoefficientSet, X: Path, times=None,
                        basis: SplineBasis | None = None, lambda_box=10.0,
                        grid=None, mean_bounds=(-6.0, 6.0),
                        log_sigma_bounds=(np.log(0.3), np.log(3.0)),
                        derived=None) -> ProjectedRateResult:
    """Slow-path rate after minimizing the pair rate over Gaussian flows.

    Per slice the inner minimum over the family and the sup over lambda
    form a saddle; the lambda problem is solved exactly for each family
    member and the family parameters move by Nelder-Mead, so convergence
    is governed by the outer two-parameter search (stall 1e-6).
    """
    from scipy.optimize import minimize
    from .flows import gaussian_slices

    if grid is None:
        from .grids import default_fast_grid
        grid = default_fast_grid(dim=coeffs.dims.l)
    if basis is None:
        basis = SplineBasis.build(grid)
    if derived is None:
        derived = derive(coeffs)
    if times is None:
        times = X.times
    times = np.asarray(times, dtype=float)
    xdot = _slow_derivative(X, times)
    basis_grads = basis.gradient_stack()
    S = len(times)
    vals = np.zeros(S)
    params = np.zeros((S, 2))
    trace = []
    lo = np.array([mean_bounds[0], log_sigma_bounds[0]])
    hi = np.array([mean_bounds[1], log_sigma_bounds[1]])
    for j, t in enumerate(times):
        frozen = coeffs.frozen(t, X(t), derived)

        def slice_value(p):
            p = np.clip(p, lo, hi)
            m, gfield = gaussian_slices(grid, p[0], np.exp(2.0 * p[1]))
            with warnings.catch_warnings():
                # narrow family members starve outer splines of mass;
                # pruning there is exploration, not a conditioning problem
                warnings.simplefilter("ignore", UserWarning)
                v, _, _ = _sup_slice(frozen, m, gfield, xdot[j], basis_grads,
                                     grid, lambda_box)
            return v

        best = None
        for start in (np.zeros(2), np.array([float(np.atleast_1d(X(t))[0]), 0.0])):
            start = np.clip(start, lo, hi)
            res = minimize(slice_value, start, method="Nelder-Mead",
                           options={"xatol": 1e-6, "fatol": 1e-6,
                                    "maxiter": 400})
            if best is None or res.fun < best.fun:
                best = res
        if not best.success and best.fun > 1e-8:
            trace.append({"slice": j, "message": best.message,
                          "iterations": int(best.nit), "value": float(best.fun)})
        vals[j] = max(float(best.fun), 0.0)
        params[j] = np.clip(best.x, lo, hi)
    value = float(np.trapezoid(vals, times))
    return ProjectedRateResult(value=value, times=times, slice_values=vals,
                               family_params=params, trace=trace)


def cutoff_sensitivity(coeffs: CoefficientSet, X: Path, flow: DensityFlow,
                       n_splines: int = 16, cutoff_radius: float = 4.0,
                       lambda_box=10.0) -> dict:
    """Variational value at cutoff radius r and 2r, with relative change.

    Convergence of the cutoff construction cannot be certified in finite
    form; this scan reports how sensitive the value still is.
    """
    out = {}
    for label, r in (("value_r", cutoff_radius), ("value_2r", 2.0 * cutoff_radius)):
        basis = SplineBasis.build(flow.grid, n_splines=n_splines,
                                  cutoff_radius=r)
        out[label] = rate_sup_form(coeffs, X, flow, basis=basis,
                                   lambda_box=lambda_box).value
    denom = max(abs(out["value_r"]), abs(out["value_2r"]), 1e-12)
    out["relative_change"] = abs(out["value_2r"] - out["value_r"]) / denom
    return out
