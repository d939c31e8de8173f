"""Weighted elliptic cell problems and the gradient projection.

Everything here is one linear operation in the face inner product

    <f, g>_{c,m} = sum_axes int f_d c_dd g_d m dx :

project(phi) returns the closest discrete gradient Dchi to phi in that
inner product, by solving the conservative system

    div(c m Dchi) = div(c m phi),     zero flux through the boundary,

with the potential fixed to zero spatial mean.  The cell solution needed
by the rate functional is two such projections: Phi projects the raw
drift field c^{-1}(a - div c/2), Psi projects the raw coupling columns
c^{-1}G^T, and the effective slow mobility is

    Q = int C m dx  -  <Psi, Psi>_{c,m}.

Because both rhs and stiffness are assembled from the same face weights,
projection is exactly idempotent, exactly orthogonal against every
discrete gradient, and in 1D acts as the identity on face fields (the
zero-flux constraint makes every face field a gradient there).  Those are
the identities the rate module's duality sandwich relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grids import GradientField, face_inner, face_weights
from .model import FrozenFast
from .stationary import NumericalError

# Relative face-weight level below which the weighted Laplacian treats a
# face as disconnected; see the note inside project().
STRUCTURAL_WEIGHT_CUT = 1e-30


@dataclass
class ProjectionResult:
    """Projected field with its potential and linear-system evidence."""

    chi: np.ndarray                 # zero-mean potential on centers
    field: GradientField            # discrete gradient Dchi on faces
    residual: float                 # scaled linear-system residual
    weighted_norm: float            # ||field||_{c,m}


@dataclass
class CellSolution:
    """Projected drift and coupling fields of one frozen fast problem."""

    grid: object
    w: np.ndarray                   # potential of Phi
    phi: GradientField              # projected drift field
    v: np.ndarray | None            # potentials of Psi columns, (cells..., n)
    psi: GradientField              # projected coupling, value dim (n,)
    q: np.ndarray                   # effective slow mobility (n, n)
    c_faces: list = field(repr=False, default=None)
    m_faces: list = field(repr=False, default=None)
    diagnostics: dict = field(default_factory=dict)


def _assemble_stiffness(grid, w_faces):
    """Sparse operator chi -> div(w Dchi) with zero-flux boundary."""
    n_cells = grid.n_cells
    idx = np.arange(n_cells).reshape(grid.shape)
    rows, cols, vals = [], [], []
    for d in range(grid.dim):
        h = grid.spacing(d)
        w = (np.asarray(w_faces[d], dtype=float) / h ** 2).ravel()
        if grid.dim == 1:
            lo, hi = idx[:-1], idx[1:]
        elif d == 0:
            lo, hi = idx[:-1, :].ravel(), idx[1:, :].ravel()
        else:
            lo, hi = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        rows.append(np.concatenate([lo, lo, hi, hi]))
        cols.append(np.concatenate([hi, lo, hi, lo]))
        vals.append(np.concatenate([w, -w, -w, w]))
    return sp.csr_matrix((np.concatenate(vals),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n_cells, n_cells))


def _pin_index(grid, m_centers):
    return int(np.argmax(np.asarray(m_centers).ravel()))


def _solve_pinned(A, rhs_cols, pin):
    """Solve the singular compatible system by pinning one potential value.

    The pinned row is replaced by identity; dropping one balance equation
    of a conservative system is exact because the rows sum to zero.  Cells
    whose incident face weights are all exactly zero (interior of a
    zero-mass region) have empty rows and are pinned to zero as well:
    their value is arbitrary and carries no weight anywhere downstream.
    Returns solutions with zero spatial mean, one per rhs column.
    """
    dead = np.flatnonzero(A.diagonal() == 0.0)
    A = A.tolil()
    for i in np.concatenate(([pin], dead)):
        A.rows[i] = [int(i)]
        A.data[i] = [1.0]
    A = A.tocsc()
    # Live weights can still span twenty-plus orders of magnitude inside
    # the support of a thin density, and a raw factorization then loses
    # the solution globally, not just in the tail.  Symmetric Jacobi
    # equilibration reduces the condition number to the local geometry.
    s = 1.0 / np.sqrt(np.abs(A.diagonal()))
    S = sp.diags(s)
    lu = spla.splu((S @ A @ S).tocsc())
    out = []
    for rhs in rhs_cols:
        b = rhs.copy()
        b[pin] = 0.0
        b[dead] = 0.0
        chi = s * lu.solve(s * b)
        if not np.all(np.isfinite(chi)):
            raise NumericalError("weighted elliptic solve produced non-finite values")
        out.append(chi - np.mean(chi))
    return out


def project(grid, c_faces, m_centers, phi, return_all: bool = False):
    """Orthogonal projection of a field onto discrete gradients.

    c_faces: per-axis diagonal diffusion at face midpoints (scalars
    broadcast).  m_centers: nonnegative density values with positive
    total mass.  phi: GradientField, center vector field (cells..., dim),
    or list of per-axis face arrays; trailing value dimensions are
    projected columnwise through one factorization.
    """
    m_centers = np.asarray(m_centers, dtype=float)
    if grid.integrate(np.clip(m_centers, 0.0, None)) <= 0:
        raise ValueError("density has zero total mass on the grid")
    c_faces = [np.broadcast_to(np.asarray(c, dtype=float), grid.face_shape(d)).copy()
               for d, c in enumerate(c_faces)]
    for d, c in enumerate(c_faces):
        if np.any(c <= 0):
            raise ValueError(f"c is not positive at axis-{d} faces")
    if isinstance(phi, GradientField):
        pass
    elif isinstance(phi, (list, tuple)):
        phi = GradientField(grid, list(phi))
    else:
        phi = GradientField.from_center_vector(grid, np.asarray(phi, dtype=float))

    m_f = face_weights(grid, m_centers)
    w_faces = [c_faces[d] * m_f[d] for d in range(grid.dim)]
    # Faces this far below the bulk weight carry no recoverable gradient
    # information: elimination there amplifies rounding by 1/w, and the
    # fills can reach the denormal range and underflow mid-factorization.
    # Treating them as structural zeros changes weighted quantities by
    # less than the cut itself; the resulting empty rows are pinned.
    w_max = max(float(np.max(w)) for w in w_faces)
    for w in w_faces:
        w[w < STRUCTURAL_WEIGHT_CUT * w_max] = 0.0
    A = _assemble_stiffness(grid, w_faces)

    vshape = phi.comps[0].shape[len(grid.face_shape(0)):]
    ncols = int(np.prod(vshape)) if vshape else 1
    rhs_cols = []
    for col in range(ncols):
        r = np.zeros(grid.shape)
        for d in range(grid.dim):
            comp = phi.comps[d].reshape(grid.face_shape(d) + (ncols,))[..., col]
            r += grid.face_div(w_faces[d] * comp, d)
        rhs_cols.append(r.ravel())
    pin = _pin_index(grid, m_centers)
    sols = _solve_pinned(A, rhs_cols, pin)

    chi = np.stack(sols, axis=-1).reshape(grid.shape + vshape) if vshape \
        else sols[0].reshape(grid.shape)
    comps = []
    for d in range(grid.dim):
        if vshape:
            cols = [grid.face_diff(chi.reshape(grid.shape + (ncols,))[..., j], d)
                    for j in range(ncols)]
            comps.append(np.stack(cols, axis=-1).reshape(grid.face_shape(d) + vshape))
        else:
            comps.append(grid.face_diff(chi, d))
    out_field = GradientField(grid, comps)

    # linear-system residual, scaled by the assembled magnitudes
    res = 0.0
    scale = 1.0
    for rhs, sol in zip(rhs_cols, sols):
        r = A @ sol - rhs
        r[pin] = 0.0
        res = max(res, float(np.max(np.abs(r))))
        scale = max(scale, float(np.max(np.abs(rhs))))
    norm = float(np.sqrt(max(face_inner(grid, out_field, out_field, c_faces, m_f)
                             if not vshape else
                             np.trace(np.atleast_2d(
                                 face_inner(grid, out_field, out_field,
                                            c_faces, m_f))), 0.0)))
    result = ProjectionResult(chi=chi, field=out_field,
                              residual=res / scale, weighted_norm=norm)
    if return_all:
        return result, c_faces, m_f
    return result


def raw_drift_field(frozen: FrozenFast, grid) -> GradientField:
    """Face field c^{-1}(a - div c / 2), the projection argument for Phi."""
    comps = []
    for d in range(grid.dim):
        pts = grid.face_points(d)
        a = frozen.a(pts)[:, d]
        dc = frozen.div_c(pts)[:, d]
        cd = frozen.c(pts)[:, d, d]
        comps.append(((a - 0.5 * dc) / cd).reshape(grid.face_shape(d)))
    return GradientField(grid, comps)


def raw_coupling_field(frozen: FrozenFast, grid) -> GradientField:
    """Face field c^{-1} G^T with value dimension n, argument for Psi."""
    n = frozen.dims.n
    comps = []
    for d in range(grid.dim):
        pts = grid.face_points(d)
        G = frozen.G(pts)                      # (N, n, l)
        cd = frozen.c(pts)[:, d, d]
        comps.append((G[:, :, d] / cd[:, None]).reshape(grid.face_shape(d) + (n,)))
    return GradientField(grid, comps)


def solve_phi(frozen: FrozenFast, m_centers, grid) -> ProjectionResult:
    """Projected drift field Phi = Pi(c^{-1}(a - div c/2))."""
    c_faces = frozen.c_diag_faces(grid)
    return project(grid, c_faces, m_centers, raw_drift_field(frozen, grid))


def solve_psi(frozen: FrozenFast, m_centers, grid) -> ProjectionResult:
    """Projected coupling field Psi = Pi(c^{-1} G^T), columnwise."""
    c_faces = frozen.c_diag_faces(grid)
    return project(grid, c_faces, m_centers, raw_coupling_field(frozen, grid))


def q_matrix(frozen: FrozenFast, m_centers, psi: GradientField | None, grid
             ) -> np.ndarray:
    """Effective slow mobility int C m - <Psi, Psi>_{c,m}, symmetrized.

    psi = None means the coupling vanishes identically and only the first
    term appears.  A negative eigenvalue beyond rounding signals
    inconsistent inputs and raises.
    """
    m_centers = np.asarray(m_centers, dtype=float)
    pts = grid.points()
    C = frozen.C(pts)                          # (N, n, n)
    Cbar = np.einsum("nij,n->ij", C, m_centers.ravel()) * grid.cell_volume
    if psi is not None:
        c_faces = frozen.c_diag_faces(grid)
        m_f = face_weights(grid, m_centers)
        corr = np.atleast_2d(face_inner(grid, psi, psi, c_faces, m_f))
        Q = Cbar - corr
    else:
        Q = Cbar
    Q = 0.5 * (Q + Q.T)
    lam = np.linalg.eigvalsh(Q)
    if lam.min() < -1e-8:
        raise NumericalError(
            f"effective mobility has negative eigenvalue {lam.min():.3e}; "
            "inputs are inconsistent", {"eigenvalues": lam.tolist()})
    return Q


def solve_cell(frozen: FrozenFast, m_centers, grid,
               coupling_zero: bool | None = None) -> CellSolution:
    """Full cell solution (Phi, Psi, Q) for one frozen fast problem.

    coupling_zero may be forced by the caller; by default G is probed at
    the cell centers and Psi is skipped when it vanishes.
    """
    m_centers = np.asarray(m_centers, dtype=float)
    c_faces = frozen.c_diag_faces(grid)
    m_f = face_weights(grid, m_centers)
    phi_res, _, _ = project(grid, c_faces, m_centers,
                            raw_drift_field(frozen, grid), return_all=True)
    if coupling_zero is None:
        coupling_zero = float(np.max(np.abs(frozen.G(grid.points())))) < 1e-14
    n = frozen.dims.n
    if coupling_zero:
        psi = GradientField.zero(grid, (n,))
        v = None
        psi_res_val = 0.0
    else:
        psi_res = project(grid, c_faces, m_centers, raw_coupling_field(frozen, grid))
        psi, v, psi_res_val = psi_res.field, psi_res.chi, psi_res.residual
    Q = q_matrix(frozen, m_centers, None if coupling_zero else psi, grid)
    return CellSolution(
        grid=grid, w=phi_res.chi, phi=phi_res.field, v=v, psi=psi, q=Q,
        c_faces=c_faces, m_faces=m_f,
        diagnostics={"phi_residual": phi_res.residual,
                     "psi_residual": psi_res_val,
                     "phi_weighted_norm": phi_res.weighted_norm})


def refinement_check(frozen: FrozenFast, m_fn, grid_coarse, grid_fine) -> dict:
    """Weighted norm of Phi on two grids; flags blow-up under refinement.

    m_fn maps a grid to density values on it (densities are resolution
    bound, so the caller supplies the rule).  A norm ratio far above 1
    indicates the projected field is not resolution stable.
    """
    out = {}
    for label, grid in (("coarse", grid_coarse), ("fine", grid_fine)):
        res = solve_phi(frozen, m_fn(grid), grid)
        out[label] = res.weighted_norm
    out["ratio"] = out["fine"] / max(out["coarse"], 1e-300)
    out["blow_up"] = out["ratio"] > 2.0
    return out
