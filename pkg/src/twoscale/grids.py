"""Cell-centered tensor grids with staggered faces.

All densities, potentials and scalar coefficient samples live on cell
centers.  Gradient-type fields (projected fields, log-density gradients,
discrete gradients of potentials) live on interior faces, one array per
axis.  This staggering is what makes the discrete energy identities exact:
the weighted elliptic solves, the projection and the rate quadratures all
use the same face inner product

    <f, g> = sum_d sum_faces f_d * c_d * g_d * m_face * cell_volume

so orthogonality and Pythagoras hold to solver precision rather than to
discretization order.

Face values of center data are arithmetic averages of the two neighbours;
for a density that conserves total mass up to the (exponentially small,
for decaying densities) half-cells hugging the boundary.  Coefficient
callables are evaluated directly at face midpoints, never averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centered grid on [lo, hi] with n cells."""

    lo: float
    hi: float
    n: int
    edges: np.ndarray = field(init=False, repr=False)
    centers: np.ndarray = field(init=False, repr=False)
    h: float = field(init=False)

    def __post_init__(self):
        if not (self.hi > self.lo):
            raise ValueError("grid box is empty: hi must exceed lo")
        if self.n < 2:
            raise ValueError("grid needs at least 2 cells")
        edges = np.linspace(self.lo, self.hi, self.n + 1)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "h", (self.hi - self.lo) / self.n)
        object.__setattr__(self, "centers", 0.5 * (edges[:-1] + edges[1:]))

    @property
    def dim(self) -> int:
        return 1

    @property
    def n_cells(self) -> int:
        return self.n

    @property
    def cell_volume(self) -> float:
        return self.h

    @property
    def shape(self) -> tuple:
        return (self.n,)

    def points(self) -> np.ndarray:
        """Cell centers as an (n_cells, 1) array of points."""
        return self.centers[:, None]

    def face_points(self, axis: int = 0) -> np.ndarray:
        """Interior face midpoints as an (n-1, 1) array of points."""
        return self.edges[1:-1][:, None]

    def face_shape(self, axis: int = 0) -> tuple:
        return (self.n - 1,)

    def spacing(self, axis: int = 0) -> float:
        return self.h

    def integrate(self, values: np.ndarray) -> float:
        """Midpoint quadrature of a center field."""
        return float(np.sum(values) * self.h)

    def integrate_faces(self, values: np.ndarray, axis: int = 0) -> float:
        return float(np.sum(values) * self.h)

    def face_avg(self, values: np.ndarray, axis: int = 0) -> np.ndarray:
        return 0.5 * (values[1:] + values[:-1])

    def face_diff(self, values: np.ndarray, axis: int = 0) -> np.ndarray:
        """Discrete gradient of a center field, on interior faces."""
        return np.diff(values, axis=0) / self.h

    def face_div(self, flux: np.ndarray, axis: int = 0) -> np.ndarray:
        """Divergence of a face flux (zero flux on the boundary faces)."""
        out = np.zeros(self.n)
        out[:-1] += flux / self.h
        out[1:] -= flux / self.h
        return out

    def locate(self, x: np.ndarray) -> np.ndarray:
        """Cell index of each point, clipped to the box."""
        idx = np.floor((np.asarray(x) - self.lo) / self.h).astype(np.int64)
        return np.clip(idx, 0, self.n - 1)

    def interp_centers(self, values: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Piecewise-linear interpolation of a center field."""
        return np.interp(np.asarray(x), self.centers, values)


@dataclass(frozen=True)
class Grid2D:
    """Tensor product of two Grid1D axes; center fields have shape (nx, ny)."""

    gx: Grid1D
    gy: Grid1D

    @property
    def dim(self) -> int:
        return 2

    @property
    def n_cells(self) -> int:
        return self.gx.n * self.gy.n

    @property
    def cell_volume(self) -> float:
        return self.gx.h * self.gy.h

    @property
    def shape(self) -> tuple:
        return (self.gx.n, self.gy.n)

    def axis_grid(self, axis: int) -> Grid1D:
        return (self.gx, self.gy)[axis]

    def points(self) -> np.ndarray:
        X, Y = np.meshgrid(self.gx.centers, self.gy.centers, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def face_points(self, axis: int) -> np.ndarray:
        if axis == 0:
            X, Y = np.meshgrid(self.gx.edges[1:-1], self.gy.centers, indexing="ij")
        else:
            X, Y = np.meshgrid(self.gx.centers, self.gy.edges[1:-1], indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def face_shape(self, axis: int) -> tuple:
        if axis == 0:
            return (self.gx.n - 1, self.gy.n)
        return (self.gx.n, self.gy.n - 1)

    def spacing(self, axis: int) -> float:
        return self.axis_grid(axis).h

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(values) * self.cell_volume)

    def integrate_faces(self, values: np.ndarray, axis: int) -> float:
        return float(np.sum(values) * self.cell_volume)

    def face_avg(self, values: np.ndarray, axis: int) -> np.ndarray:
        if axis == 0:
            return 0.5 * (values[1:, :] + values[:-1, :])
        return 0.5 * (values[:, 1:] + values[:, :-1])

    def face_diff(self, values: np.ndarray, axis: int) -> np.ndarray:
        return np.diff(values, axis=axis) / self.spacing(axis)

    def face_div(self, flux: np.ndarray, axis: int) -> np.ndarray:
        out = np.zeros(self.shape)
        h = self.spacing(axis)
        if axis == 0:
            out[:-1, :] += flux / h
            out[1:, :] -= flux / h
        else:
            out[:, :-1] += flux / h
            out[:, 1:] -= flux / h
        return out

    def locate(self, x: np.ndarray) -> np.ndarray:
        """Flat cell index of each (N, 2) point."""
        x = np.atleast_2d(np.asarray(x))
        ix = self.gx.locate(x[:, 0])
        iy = self.gy.locate(x[:, 1])
        return ix * self.gy.n + iy


def box_grid(lo, hi, n) -> Grid1D | Grid2D:
    """Build a 1D or 2D grid from per-axis bounds.

    Scalars give a Grid1D; length-2 sequences give a Grid2D.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    n = np.atleast_1d(np.asarray(n, dtype=int))
    dim = max(lo.size, hi.size, n.size)
    lo, hi, n = (np.broadcast_to(v, (dim,)) for v in (lo, hi, n))
    if dim == 1:
        return Grid1D(float(lo[0]), float(hi[0]), int(n[0]))
    if dim == 2:
        return Grid2D(Grid1D(float(lo[0]), float(hi[0]), int(n[0])),
                      Grid1D(float(lo[1]), float(hi[1]), int(n[1])))
    raise ValueError("only 1D and 2D grids are supported")


def default_fast_grid(dim: int = 1, half_width: float = 8.0,
                      cell_width: float = 0.04) -> Grid1D | Grid2D:
    """Default fast-variable grid: [-8, 8]^dim, cell width 0.04 in 1D.

    In 2D the per-axis resolution is reduced to keep the cell count
    manageable; 120 cells per axis on the default box.
    """
    if dim == 1:
        n = int(round(2 * half_width / cell_width))
        return box_grid(-half_width, half_width, n)
    return box_grid([-half_width] * 2, [half_width] * 2, [120] * 2)


class GradientField:
    """Per-axis face arrays representing a (possibly vector-valued) gradient.

    comps[d] has the face shape of axis d, optionally with trailing value
    dimensions (used for the columnwise projected coupling field).
    """

    def __init__(self, grid, comps):
        self.grid = grid
        self.comps = [np.asarray(c, dtype=float) for c in comps]
        for d, c in enumerate(self.comps):
            if c.shape[: grid.dim if grid.dim > 1 else 1] != grid.face_shape(d):
                raise ValueError(
                    f"axis {d} face field has shape {c.shape}, expected leading "
                    f"{grid.face_shape(d)}")

    @classmethod
    def zero(cls, grid, value_shape=()):
        return cls(grid, [np.zeros(grid.face_shape(d) + tuple(value_shape))
                          for d in range(grid.dim)])

    @classmethod
    def from_potential(cls, grid, potential):
        """Discrete gradient of a center field."""
        return cls(grid, [grid.face_diff(potential, d) for d in range(grid.dim)])

    @classmethod
    def from_center_vector(cls, grid, vec):
        """Face-average an (cells..., dim) center vector field."""
        vec = np.asarray(vec, dtype=float)
        if grid.dim == 1:
            v = vec.reshape(grid.shape + (-1,))
            if v.shape[-1] != 1:
                raise ValueError("center vector field must have 1 component on a 1D grid")
            return cls(grid, [grid.face_avg(v[..., 0], 0)])
        if vec.shape != grid.shape + (2,):
            raise ValueError(f"expected shape {grid.shape + (2,)}, got {vec.shape}")
        return cls(grid, [grid.face_avg(vec[..., d], d) for d in range(grid.dim)])

    def copy(self):
        return GradientField(self.grid, [c.copy() for c in self.comps])

    def __add__(self, other):
        return GradientField(self.grid, [a + b for a, b in zip(self.comps, other.comps)])

    def __sub__(self, other):
        return GradientField(self.grid, [a - b for a, b in zip(self.comps, other.comps)])

    def scale(self, s: float):
        return GradientField(self.grid, [s * c for c in self.comps])

    def center_values(self) -> np.ndarray:
        """Face field averaged back to centers, (cells..., dim, *value_shape).

        One-sided at the first and last cell of each axis.  Used for
        exports and plots only; quadratures stay on faces.
        """
        grid = self.grid
        vshape = self.comps[0].shape[len(grid.face_shape(0)):]
        out = np.zeros(grid.shape + (grid.dim,) + vshape)
        for d in range(grid.dim):
            c = self.comps[d]
            sl_lo = [slice(None)] * grid.dim
            sl_hi = [slice(None)] * grid.dim
            sl_lo[d] = slice(0, 1)
            sl_hi[d] = slice(-1, None)
            # pad with the end faces, then average adjacent faces per cell
            stacked = np.concatenate([c[tuple(sl_lo)], c, c[tuple(sl_hi)]], axis=d)
            lo = [slice(None)] * grid.dim
            hi = [slice(None)] * grid.dim
            lo[d] = slice(0, -1)
            hi[d] = slice(1, None)
            idx = tuple([slice(None)] * grid.dim) + (d,)
            out[idx] = 0.5 * (stacked[tuple(lo)] + stacked[tuple(hi)])
        return out


def face_inner(grid, f: GradientField, g: GradientField, c_faces, m_faces) -> np.ndarray:
    """Weighted face inner product sum_d int f_d c_d g_d m.

    c_faces and m_faces are lists of per-axis face arrays.  If f or g carry
    trailing value dimensions the contraction is over faces only and the
    result keeps the (outer) value shape, so the same routine yields the
    scalar energy, the (n,) coupling moments and the (n, n) Gram block.
    """
    total = None
    for d in range(grid.dim):
        fd, gd = f.comps[d], g.comps[d]
        w = np.broadcast_to(c_faces[d] * m_faces[d] * grid.cell_volume,
                            grid.face_shape(d))
        nfd = len(grid.face_shape(d))
        fv = fd.reshape((-1,) + fd.shape[nfd:]).reshape(w.size, -1)
        gv = gd.reshape((-1,) + gd.shape[nfd:]).reshape(w.size, -1)
        contrib = np.tensordot(fv * w.reshape(-1, 1), gv, axes=(0, 0))
        total = contrib if total is None else total + contrib
    fshape = f.comps[0].shape[len(grid.face_shape(0)):]
    gshape = g.comps[0].shape[len(grid.face_shape(0)):]
    return total.reshape(fshape + gshape) if (fshape or gshape) else float(total[0, 0])


def face_weights(grid, m_centers) -> list:
    """Arithmetic face averages of a center density, one array per axis."""
    return [grid.face_avg(np.asarray(m_centers, dtype=float), d)
            for d in range(grid.dim)]


def log_gradient_half(grid, m_centers, floor: float = 0.0) -> GradientField:
    """Face field Dm/(2m) of a center density via log differences.

    Faces where either neighbour is <= floor get the value 0 (the
    convention Dm/m = 0 where m vanishes); their density weight in any
    quadrature is tiny there anyway.  Exact at faces for Gaussian slices,
    since log-density differences of quadratics hit the midpoint value.
    """
    m = np.asarray(m_centers, dtype=float)
    comps = []
    for d in range(grid.dim):
        h = grid.spacing(d)
        if grid.dim == 1:
            lo, hi = m[:-1], m[1:]
        elif d == 0:
            lo, hi = m[:-1, :], m[1:, :]
        else:
            lo, hi = m[:, :-1], m[:, 1:]
        ok = (lo > floor) & (hi > floor)
        val = np.zeros(lo.shape)
        val[ok] = (np.log(hi[ok]) - np.log(lo[ok])) / (2.0 * h)
        comps.append(val)
    return GradientField(grid, comps)
