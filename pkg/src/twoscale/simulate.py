"""Euler-Maruyama integration of the coupled slow-fast system.

The two equations share one k-dimensional Wiener process:

    dX_t = A(t, X_t, x_t) dt + sqrt(eps) B(t, X_t, x_t) dW_t
    dx_t = a(t, X_t, x_t) / eps dt + b(t, X_t, x_t) / sqrt(eps) dW_t

Each fast substep draws a single increment dW and feeds it to both
updates, which is where the noise correlation comes from; nothing is
correlated after the fact.  The fast state is reflected at the grid box
(exits are exponentially rare under the radial stability condition, and
reflection keeps the occupation measure normalized), and visits are
accumulated into per-slow-step histograms with weight equal to the
substep length, so the mass of the occupation measure on [0, t] equals
t up to one fast step.

The fast update is written in rescaled time,

    x <- x + a * (dt/eps) + b * xi * sqrt(dt/eps),

so integrating at scale eps over [0, T] and integrating the eps = 1
dynamics over [0, T/eps] consume the identical normal stream and produce
bit-identical iterates.  Replica r of a batch owns the generator spawned
from (seed, r); merging replica outputs is associative, so aggregate
statistics do not depend on scheduling order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .grids import GradientField, default_fast_grid
from .model import CoefficientSet, derive
from .paths import Path
from .stationary import NumericalError

# Hard ceiling on the fast substep relative to eps: the substep must
# resolve the 1/eps drift, so dt_slow/substeps <= eps * h_fast_max.
H_FAST_MAX = 0.1

# Per-replica noise arrays are generated in chunks capped near this many
# doubles so batch memory stays flat regardless of replica count.
_CHUNK_BUDGET = 3.0e7


@dataclass
class SimConfig:
    """Integration parameters for one (or one batch of) realizations.

    The fast substep dt_slow/substeps must not exceed eps * h_fast_max;
    violating that silently destabilizes the 1/eps drift, so it is a
    construction error.  horizon must be a whole number of slow steps.
    """

    eps: float
    dt_slow: float = 0.01
    substeps: int = 1
    horizon: float = 1.0
    seed: int = 0
    x0_slow: np.ndarray = 0.0
    x0_fast: np.ndarray = 0.0
    h_fast_max: float = H_FAST_MAX
    record_noise: bool = False

    def __post_init__(self):
        self.x0_slow = np.atleast_1d(np.asarray(self.x0_slow, dtype=float))
        self.x0_fast = np.atleast_1d(np.asarray(self.x0_fast, dtype=float))
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.dt_slow > 0:
            raise ValueError("dt_slow must be positive")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("substeps must be a positive integer")
        self.substeps = int(self.substeps)
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        bound = self.eps * self.h_fast_max
        if self.fast_step > bound * (1.0 + 1e-12):
            raise ValueError(
                f"fast substep dt_slow/substeps = {self.fast_step:.3e} exceeds "
                f"eps * h_fast_max = {bound:.3e}; raise substeps or shrink dt_slow")
        n = int(round(self.horizon / self.dt_slow))
        if abs(n * self.dt_slow - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise ValueError("horizon must be a whole multiple of dt_slow")

    @property
    def fast_step(self) -> float:
        """Substep length in slow time units."""
        return self.dt_slow / self.substeps

    @property
    def n_slow_steps(self) -> int:
        return int(round(self.horizon / self.dt_slow))


def _replica_rng(seed: int, r: int) -> np.random.Generator:
    """Generator owned by replica r; r-indexed spawn of the base seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(r,)))


def _box_bounds(grid):
    if grid.dim == 1:
        return np.array([grid.lo]), np.array([grid.hi])
    return (np.array([grid.gx.lo, grid.gy.lo]),
            np.array([grid.gx.hi, grid.gy.hi]))


def _reflect(x, lo, hi):
    """Fold states back into the box; returns (states, rows touched).

    One fold per side handles any step that overshoots by less than a box
    width; anything wilder is clipped to the boundary (and still counted).
    Non-finite entries pass through untouched so the finiteness check can
    report them instead of silently pinning them to the boundary.
    """
    finite = np.isfinite(x)
    below = (x < lo) & finite
    above = (x > hi) & finite
    touched = below.any(axis=-1) | above.any(axis=-1)
    if touched.any():
        x = np.where(below, 2.0 * lo - x, x)
        x = np.where(above, 2.0 * hi - x, x)
        x = np.where(finite, np.clip(x, lo, hi), x)
    return x, int(np.count_nonzero(touched))


def _cell_volume(grid) -> float:
    if grid.dim == 1:
        return grid.h
    return grid.gx.h * grid.gy.h


@dataclass
class OccupationMeasure:
    """Histogram occupation measure of the fast state.

    weights[j] holds the mass collected during slow step j, one entry per
    grid cell; times are the slice boundaries.  For simulate_path output
    the mass of [0, t] equals t up to one fast step.  normalized marks
    measures rescaled to total mass one (frozen-fast runs).
    """

    grid: object
    times: np.ndarray
    weights: np.ndarray
    reflections: int = 0
    flagged: bool = False
    normalized: bool = False
    slow_noise: np.ndarray = None
    fast_noise: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape[0] != len(self.times) - 1:
            raise ValueError("need one weight slice per time interval")
        if np.any(self.weights < 0):
            raise ValueError("occupation weights must be nonnegative")

    @property
    def n_slices(self) -> int:
        return self.weights.shape[0]

    def slice_mass(self, j: int) -> float:
        return float(self.weights[j].sum())

    def mass(self, t: float) -> float:
        """Total weight accumulated over [0, t] (full slices only)."""
        j = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        j = max(0, min(j, self.n_slices))
        return float(self.weights[:j].sum())

    def slice_density(self, j: int) -> np.ndarray:
        """Weights of slice j normalized to a probability density."""
        w = self.weights[j]
        total = w.sum()
        if total == 0.0:
            return np.zeros_like(w)
        return w / (total * _cell_volume(self.grid))

    def total_density(self) -> np.ndarray:
        """All slices pooled and normalized to a probability density."""
        w = self.weights.sum(axis=0)
        total = w.sum()
        if total == 0.0:
            return np.zeros_like(w)
        return w / (total * _cell_volume(self.grid))

    def merged(self, other: "OccupationMeasure") -> "OccupationMeasure":
        """Pool two measures over the same grid and slicing.

        Addition of histograms is associative and commutative, so pooling
        replicas or seeds in any order gives the same aggregate.
        """
        if self.weights.shape != other.weights.shape:
            raise ValueError("cannot merge measures with different shapes")
        if not np.array_equal(self.times, other.times):
            raise ValueError("cannot merge measures with different slicing")
        return OccupationMeasure(
            grid=self.grid, times=self.times,
            weights=self.weights + other.weights,
            reflections=self.reflections + other.reflections,
            flagged=self.flagged or other.flagged,
            normalized=False)


def _check_finite(step: int, n_steps: int, t: float, u, x):
    if np.all(np.isfinite(u)) and np.all(np.isfinite(x)):
        return
    raise NumericalError(
        f"non-finite state at slow step {step}/{n_steps} (t = {t:.6g}): "
        f"slow = {np.asarray(u).ravel()}, fast = {np.asarray(x).ravel()}")


def simulate_path(coeffs: CoefficientSet, cfg: SimConfig, grid=None):
    """Integrate one realization; returns (Path, OccupationMeasure).

    The slow path is recorded on the slow grid; every fast substep bins
    the fast state with weight fast_step.  With cfg.record_noise the
    Wiener increment images B dW and b dW are kept on the returned
    measure for diagnostic correlation checks.
    """
    dims = coeffs.dims
    if grid is None:
        grid = default_fast_grid(dims.l)
    S = cfg.n_slow_steps
    if S < 1:
        raise ValueError("simulate_path needs horizon >= dt_slow")

    u = np.broadcast_to(cfg.x0_slow, (dims.n,)).astype(float).copy()
    x = np.broadcast_to(cfg.x0_fast, (dims.l,)).astype(float).copy()
    lo, hi = _box_bounds(grid)
    dtf = cfg.fast_step
    dte = dtf / cfg.eps
    sq_dtf = np.sqrt(dtf)
    sq_eps = np.sqrt(cfg.eps)

    times = cfg.dt_slow * np.arange(S + 1)
    values = np.empty((S + 1, dims.n))
    values[0] = u
    ncells = int(np.prod(grid.shape))
    weights = np.zeros((S, ncells))
    n_sub_total = S * cfg.substeps
    reflections = 0
    if cfg.record_noise:
        slow_noise = np.empty((n_sub_total, dims.n))
        fast_noise = np.empty((n_sub_total, dims.l))
    rng = _replica_rng(cfg.seed, 0)

    for j in range(S):
        xi = rng.standard_normal((cfg.substeps, dims.k))
        for i in range(cfg.substeps):
            t = times[j] + i * dtf
            A = np.asarray(coeffs.A(t, u, x), dtype=float)
            B = np.asarray(coeffs.B(t, u, x), dtype=float)
            a = np.asarray(coeffs.a(t, u, x), dtype=float)
            b = np.asarray(coeffs.b(t, u, x), dtype=float)
            dW = sq_dtf * xi[i]
            bw_slow = B @ dW
            bw_fast = b @ dW
            u = u + A * dtf + sq_eps * bw_slow
            x = x + a * dte + bw_fast / sq_eps
            x, nr = _reflect(x, lo, hi)
            reflections += nr
            if cfg.record_noise:
                slow_noise[j * cfg.substeps + i] = bw_slow
                fast_noise[j * cfg.substeps + i] = bw_fast
            idx = grid.locate(x[None, :] if grid.dim > 1 else x)
            weights[j, int(idx[0])] += dtf
        _check_finite(j + 1, S, times[j + 1], u, x)
        values[j + 1] = u

    flagged = reflections > 0.01 * n_sub_total
    if flagged:
        warnings.warn(
            f"{reflections} boundary reflections in {n_sub_total} substeps; "
            "the box truncation is biting", UserWarning)
    occ = OccupationMeasure(
        grid=grid, times=times,
        weights=weights.reshape((S,) + grid.shape),
        reflections=reflections, flagged=flagged,
        slow_noise=slow_noise if cfg.record_noise else None,
        fast_noise=fast_noise if cfg.record_noise else None)
    return Path(times, values), occ


@dataclass
class SimBatch:
    """Replica-array outputs of simulate_batch.

    log_weight carries the Girsanov correction of the tilted dynamics
    back to the original measure (zero when no tilt is applied), so
    E[f] is estimated by mean(f * exp(log_weight)).
    """

    endpoint_slow: np.ndarray
    endpoint_fast: np.ndarray
    log_weight: np.ndarray
    sup_deviation: np.ndarray = None
    hat_integral: np.ndarray = None
    reflections: int = 0
    flagged: bool = False
    n_substeps: int = 0
    slow_noise: np.ndarray = None
    fast_noise: np.ndarray = None


def simulate_batch(coeffs: CoefficientSet, cfg: SimConfig, n_replicas: int,
                   grid=None, tilt=None, reference=None,
                   hat_values=None, record_noise=False, chunk=4096) -> SimBatch:
    """Vectorized replicas of the coupled system.

    tilt, if given, is a callable (t, slow_states, fast_states) -> shift
    of the driving noise, shape (k,) or (R, k) in units of dW per unit
    time.  The dynamics are simulated with dW replaced by shift*dt + dW~
    and log_weight accumulates log dP/dQ = -sum shift.dW~ - 1/2 |shift|^2 dt,
    so reweighted means are unbiased for the original dynamics.

    reference (a Path or an (S+1, n) array on the slow grid) requests the
    running sup-norm deviation of the slow state from it; hat_values, an
    array (K, cells) of test functions on the grid, requests occupation
    integrals dt * sum_s hat(x_s) per replica.

    Replica r draws its noise from the generator spawned as (seed, r),
    so results are independent of chunking and scheduling order.
    """
    dims = coeffs.dims
    if grid is None:
        grid = default_fast_grid(dims.l)
    S = cfg.n_slow_steps
    if S < 1:
        raise ValueError("simulate_batch needs horizon >= dt_slow")
    T_sub = S * cfg.substeps
    lo, hi = _box_bounds(grid)
    dtf = cfg.fast_step
    dte = dtf / cfg.eps
    sq_dtf = np.sqrt(dtf)
    sq_eps = np.sqrt(cfg.eps)
    times = cfg.dt_slow * np.arange(S + 1)
    if reference is not None:
        ref = reference(times) if isinstance(reference, Path) else np.asarray(reference)
        if ref.shape != (S + 1, dims.n):
            raise ValueError("reference must give the slow state on the slow grid")
    if hat_values is not None:
        hat_values = np.asarray(hat_values, dtype=float)
        hat_values = hat_values.reshape(hat_values.shape[0], -1)

    chunk = int(min(chunk, max(1, _CHUNK_BUDGET / (T_sub * dims.k))))
    end_slow = np.empty((n_replicas, dims.n))
    end_fast = np.empty((n_replicas, dims.l))
    log_w = np.zeros(n_replicas)
    sup_dev = np.empty(n_replicas) if reference is not None else None
    hat_int = np.zeros((n_replicas, hat_values.shape[0])) if hat_values is not None else None
    noise_rec = ([], []) if record_noise else None
    reflections = 0

    for r0 in range(0, n_replicas, chunk):
        r1 = min(r0 + chunk, n_replicas)
        R = r1 - r0
        noise = np.empty((R, T_sub, dims.k))
        for row, r in enumerate(range(r0, r1)):
            noise[row] = _replica_rng(cfg.seed, r).standard_normal((T_sub, dims.k))
        u = np.broadcast_to(cfg.x0_slow, (R, dims.n)).astype(float).copy()
        x = np.broadcast_to(cfg.x0_fast, (R, dims.l)).astype(float).copy()
        if reference is not None:
            dev = np.max(np.abs(u - ref[0]), axis=1)
        if record_noise:
            ns = np.empty((R, T_sub, dims.n))
            nf = np.empty((R, T_sub, dims.l))
        for j in range(S):
            for i in range(cfg.substeps):
                step = j * cfg.substeps + i
                t = times[j] + i * dtf
                A = np.asarray(coeffs.A(t, u, x), dtype=float)
                B = np.asarray(coeffs.B(t, u, x), dtype=float)
                a = np.asarray(coeffs.a(t, u, x), dtype=float)
                b = np.asarray(coeffs.b(t, u, x), dtype=float)
                dW = sq_dtf * noise[:, step, :]
                if tilt is not None:
                    shift = np.broadcast_to(
                        np.asarray(tilt(t, u, x), dtype=float), (R, dims.k))
                    log_w[r0:r1] -= (shift * dW).sum(axis=1) + \
                        0.5 * (shift ** 2).sum(axis=1) * dtf
                    dW = dW + shift * dtf
                if record_noise:
                    ns[:, step] = np.einsum("rnk,rk->rn", B, dW)
                    nf[:, step] = np.einsum("rlk,rk->rl", b, dW)
                u = u + A * dtf + sq_eps * np.einsum("rnk,rk->rn", B, dW)
                x = x + a * dte + np.einsum("rlk,rk->rl", b, dW) / sq_eps
                x, nr = _reflect(x, lo, hi)
                reflections += nr
                if hat_values is not None:
                    idx = grid.locate(x if grid.dim > 1 else x[:, 0])
                    hat_int[r0:r1] += dtf * hat_values[:, idx].T
            bad = ~(np.isfinite(u).all(axis=1) & np.isfinite(x).all(axis=1))
            if bad.any():
                row = int(np.argmax(bad))
                _check_finite(j + 1, S, times[j + 1], u[row], x[row])
            if reference is not None:
                np.maximum(dev, np.max(np.abs(u - ref[j + 1]), axis=1), out=dev)
        end_slow[r0:r1] = u
        end_fast[r0:r1] = x
        if reference is not None:
            sup_dev[r0:r1] = dev
        if record_noise:
            noise_rec[0].append(ns)
            noise_rec[1].append(nf)

    total_sub = n_replicas * T_sub
    flagged = reflections > 0.01 * total_sub
    if flagged:
        warnings.warn(
            f"{reflections} boundary reflections in {total_sub} substeps; "
            "the box truncation is biting", UserWarning)
    return SimBatch(
        endpoint_slow=end_slow, endpoint_fast=end_fast, log_weight=log_w,
        sup_deviation=sup_dev, hat_integral=hat_int,
        reflections=reflections, flagged=flagged, n_substeps=T_sub,
        slow_noise=np.concatenate(noise_rec[0]) if record_noise else None,
        fast_noise=np.concatenate(noise_rec[1]) if record_noise else None)


def _fast_trajectory(coeffs: CoefficientSet, s: float, u, lam, eps: float,
                     horizon: float, dt: float, seed: int, grid,
                     x0=None, derived=None):
    """States of the frozen tilted fast diffusion, one row per step.

    Drift a(s, u, .) + G(s, u, .)^T lam, diffusion b(s, u, .), scale eps.
    The update runs in rescaled time dt/eps, so (eps, T, dt) and
    (1, T/eps, dt/eps) consume the identical normal stream and produce
    bit-identical iterates.
    """
    dims = coeffs.dims
    if derived is None:
        derived = derive(coeffs)
    frozen = coeffs.frozen(s, u, derived)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if not np.all(np.isfinite(lam)):
        raise ValueError("tilt vector must be finite")
    n_steps = int(round(horizon / dt)) if horizon > 0 else 0
    lo, hi = _box_bounds(grid)
    dte = dt / eps
    sq_dte = np.sqrt(dte)
    x = np.zeros(dims.l) if x0 is None else \
        np.broadcast_to(np.asarray(x0, dtype=float), (dims.l,)).astype(float).copy()
    out = np.empty((n_steps, dims.l))
    rng = _replica_rng(seed, 0)
    block = 65536
    done = 0
    while done < n_steps:
        m = min(block, n_steps - done)
        xi = rng.standard_normal((m, dims.k))
        for i in range(m):
            pt = x[None, :]
            drift = frozen.a(pt)[0] + frozen.G(pt)[0].T @ lam
            bmat = np.asarray(coeffs.b(s, frozen.u, pt), dtype=float)[0]
            x = x + drift * dte + sq_dte * (bmat @ xi[i])
            x, _ = _reflect(x, lo, hi)
            if not np.all(np.isfinite(x)):
                raise NumericalError(
                    f"non-finite fast state at step {done + i + 1}/{n_steps}: {x}")
            out[done + i] = x
        done += m
    return out


def simulate_frozen_fast(coeffs: CoefficientSet, s: float, u, lam,
                         T_long: float, seed: int, grid=None, dt=0.01,
                         x0=None, derived=None) -> OccupationMeasure:
    """Occupation of the tilted frozen fast diffusion, as a probability.

    Integrates dy = (a(s, u, y) + G(s, u, y)^T lam) dt + b(s, u, y) dW at
    unit scale over [0, T_long] and returns the normalized histogram.
    T_long = 0 gives the empty measure of mass zero.
    """
    dims = coeffs.dims
    if grid is None:
        grid = default_fast_grid(dims.l)
    traj = _fast_trajectory(coeffs, s, u, lam, 1.0, T_long, dt, seed, grid,
                            x0=x0, derived=derived)
    ncells = int(np.prod(grid.shape))
    w = np.zeros(ncells)
    if len(traj):
        idx = grid.locate(traj if grid.dim > 1 else traj[:, 0])
        np.add.at(w, idx, dt)
    total = w.sum()
    normalized = total > 0.0
    if normalized:
        w = w / total
    return OccupationMeasure(
        grid=grid, times=np.array([0.0, T_long]),
        weights=w.reshape((1,) + grid.shape), normalized=normalized)


def tilted_drift(coeffs: CoefficientSet, s: float, u, lam, h_grad=None,
                 derived=None):
    """Drift of the tilted frozen fast dynamics, as a field of x.

    Returns x -> a(s, u, x) + G(s, u, x)^T lam + c(s, u, x) h(x), where h
    is an optional gradient correction: a callable of the points, or a
    GradientField (read back as piecewise-constant cell values).  Used as
    the importance-sampling drift for frozen-fast experiments.
    """
    if derived is None:
        derived = derive(coeffs)
    frozen = coeffs.frozen(s, u, derived)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    l = coeffs.dims.l

    if h_grad is None:
        h_fn = None
    elif isinstance(h_grad, GradientField):
        grid = h_grad.grid
        cellvals = h_grad.center_values().reshape((-1, grid.dim))

        def h_fn(pts):
            idx = grid.locate(pts if grid.dim > 1 else pts[:, 0])
            return cellvals[idx]
    else:
        def h_fn(pts):
            vals = np.asarray(h_grad(pts), dtype=float)
            return np.broadcast_to(vals, (pts.shape[0], l))

    def drift(x):
        pts = np.asarray(x, dtype=float)
        squeeze = False
        if pts.ndim == 1 and l == 1:
            squeeze = True
        pts2 = frozen._x(pts)
        out = frozen.a(pts2) + np.einsum("xnl,n->xl", frozen.G(pts2), lam)
        if h_fn is not None:
            out = out + np.einsum("xlm,xm->xl", frozen.c(pts2), h_fn(pts2))
        return out[:, 0] if squeeze else out

    return drift


def path_to_csv(path: Path, fname: str):
    """Write a slow path as CSV with columns t, X_1..X_n."""
    with open(fname, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"X_{i + 1}" for i in range(path.n)])
        for t, row in zip(path.times, path.values):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def occupation_to_csv(occ: OccupationMeasure, fname: str):
    """Write occupation slices as CSV: t, cell centers, weight."""
    grid = occ.grid
    if grid.dim == 1:
        occ_centers = grid.centers[:, None]
    else:
        cx, cy = np.meshgrid(grid.gx.centers, grid.gy.centers, indexing="ij")
        occ_centers = np.column_stack([cx.ravel(), cy.ravel()])
    with open(fname, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"x_{d + 1}" for d in range(grid.dim)] + ["weight"])
        for j in range(occ.n_slices):
            t = occ.times[j]
            flat = occ.weights[j].ravel()
            for c, w in zip(occ_centers, flat):
                if w != 0.0:
                    wr.writerow([repr(float(t))] +
                                [repr(float(v)) for v in c] + [repr(float(w))])
