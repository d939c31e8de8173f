"""Time-indexed families of fast-variable densities on a grid.

A DensityFlow is the second argument of the rate functional: one
probability density on the fast grid per time slice of the slow path.
Slices are stored as center values; the log-density gradient that the rate
quadratures need is taken on faces, either analytically (Gaussian flows)
or from log differences of the stored values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import GradientField, log_gradient_half


@dataclass
class DensityFlow:
    """times (S,); slices[j] a density on grid at times[j], unit mass."""

    times: np.ndarray
    slices: list
    grid: object
    log_grad_half: list | None = None   # optional per-slice Dm/(2m) face fields
    normalize: bool = True

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.slices) != len(self.times):
            raise ValueError("one density slice per time point required")
        clean = []
        for j, m in enumerate(self.slices):
            m = np.asarray(m, dtype=float)
            if m.shape != self.grid.shape:
                raise ValueError(
                    f"slice {j} has shape {m.shape}, grid expects {self.grid.shape}")
            if np.any(m < 0):
                if np.min(m) < -1e-12:
                    raise ValueError(f"slice {j} has negative mass {np.min(m):.2e}")
                m = np.clip(m, 0.0, None)
            mass = self.grid.integrate(m)
            if mass <= 0:
                raise ValueError(f"slice {j} has zero total mass")
            if self.normalize:
                m = m / mass
            elif abs(mass - 1.0) > 1e-8:
                raise ValueError(f"slice {j} mass {mass} is not 1")
            clean.append(m)
        self.slices = clean

    def __len__(self) -> int:
        return len(self.slices)

    def grad_half(self, j: int) -> GradientField:
        """Dm/(2m) of slice j on faces."""
        if self.log_grad_half is not None:
            return self.log_grad_half[j]
        return log_gradient_half(self.grid, self.slices[j])


def gaussian_slices(grid, mean, cov_diag) -> tuple:
    """Center values and analytic Dm/(2m) of a (product) Gaussian.

    mean and cov_diag are length-dim sequences.  The returned density is
    normalized on the box, the face gradient is the exact one of the
    unnormalized Gaussian, which normalization does not change.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(cov_diag, dtype=float))
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    pts = grid.points()
    logm = -0.5 * np.sum((pts - mean) ** 2 / var, axis=1)
    vals = np.exp(logm - np.max(logm)).reshape(grid.shape)
    vals = vals / grid.integrate(vals)
    comps = []
    for d in range(grid.dim):
        fp = grid.face_points(d)
        g = (-0.5 * (fp[:, d] - mean[d]) / var[d]).reshape(grid.face_shape(d))
        comps.append(g)
    return vals, GradientField(grid, comps)


def _per_slice(v, S, dim, label):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return np.full((S, dim), float(v))
    if v.shape == (S,):
        return np.repeat(v[:, None], dim, axis=1)
    if v.shape == (dim,):
        return np.tile(v, (S, 1))
    if v.shape == (S, dim):
        return v.copy()
    raise ValueError(f"{label} must broadcast to shape ({S}, {dim}), got {v.shape}")


def gaussian_flow(grid, times, means, variances) -> DensityFlow:
    """Gaussian flow with per-slice mean/variance (scalars broadcast)."""
    times = np.asarray(times, dtype=float)
    S = len(times)
    means = _per_slice(means, S, grid.dim, "means")
    variances = _per_slice(variances, S, grid.dim, "variances")
    slices, grads = [], []
    for j in range(S):
        vals, g = gaussian_slices(grid, means[j], variances[j])
        slices.append(vals)
        grads.append(g)
    return DensityFlow(times, slices, grid, log_grad_half=grads)


def constant_flow(grid, times, density, log_grad: GradientField | None = None
                  ) -> DensityFlow:
    """The same density at every slice (shared arrays, no copies)."""
    times = np.asarray(times, dtype=float)
    density = np.asarray(density, dtype=float)
    grads = None if log_grad is None else [log_grad] * len(times)
    return DensityFlow(times, [density] * len(times), grid, log_grad_half=grads)
