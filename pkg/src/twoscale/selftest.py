"""Desk-scale acceptance checks runnable from tests and the CLI.

Each criterion_* function runs one validation experiment end to end and
returns a CheckResult carrying the pass/fail verdict, the measured
numbers, and the wall time.  run_all executes the list and prints one
line per check.  The checks are self-contained: they build their own
grids, presets, and oracles, so a single call documents the state of the
whole toolkit.
"""

import time
from dataclasses import dataclass

import numpy as np
from numpy.random import default_rng

from .flows import constant_flow, gaussian_flow, gaussian_slices
from .grids import (GradientField, box_grid, default_fast_grid, face_inner,
                    face_weights, log_gradient_half)
from .model import (CoefficientSet, Dimensions, PRESETS, const_field, derive,
                    preset)
from .paths import Path
from .poisson import project, solve_cell, solve_phi, solve_psi
from .rate import SplineBasis, rate_closed_form, rate_density_slice, \
    rate_sup_form
from .stationary import invariant_density_grid, zero_cost_path
from .verify import (EventSpec, estimate_H, h_variational, mc_decay,
                     occupation_lln_ladder)

LQ_ENDPOINT = 0.8
LQ_REFERENCE = LQ_ENDPOINT ** 2 * (np.e ** 2 - 1.0) / (4.0 * np.sinh(1.0) ** 2)


@dataclass
class CheckResult:
    """Outcome of one acceptance criterion."""

    number: int
    label: str
    passed: bool
    detail: str
    runtime: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (f"criterion {self.number:2d} [{tag}] {self.label}: "
                f"{self.detail} ({self.runtime:.1f} s)")


def _timed(number, label, started, passed, detail) -> CheckResult:
    return CheckResult(number, label, bool(passed), detail,
                       time.perf_counter() - started)


def _weighted_norm(grid, comps_err, c_faces, m_centers) -> float:
    field = GradientField(grid, comps_err)
    m_f = face_weights(grid, m_centers)
    val = np.asarray(face_inner(grid, field, field, c_faces, m_f),
                     dtype=float)
    total = float(np.trace(val)) if val.ndim == 2 else float(np.sum(val))
    return float(np.sqrt(max(total, 0.0)))


# ---------------------------------------------------------------------------
# 1: duality gap between the closed form and the variational form


def criterion_1(lo: float = -8.0, hi: float = 8.0, cells: int = 400,
                time_limit: float = 10.0) -> CheckResult:
    """Variational value with 16 splines within 5 percent of closed form."""
    t0 = time.perf_counter()
    grid = box_grid(lo, hi, cells)
    coeffs = preset("ou")
    times = np.linspace(0.0, 1.0, 21)
    flow = gaussian_flow(grid, times, 0.6 * np.ones_like(times),
                         np.ones_like(times))
    X = Path(times, 0.3 * times)
    closed = rate_closed_form(coeffs, X, flow).total
    basis = SplineBasis.build(grid, n_splines=16)
    sup = rate_sup_form(coeffs, X, flow, basis=basis).value
    rel = abs(sup - closed) / closed
    runtime = time.perf_counter() - t0
    passed = rel <= 0.05 and (time_limit is None or runtime <= time_limit)
    return CheckResult(1, "duality gap", passed,
                       f"closed {closed:.6f} sup {sup:.6f} rel {rel:.2e}",
                       runtime)


# ---------------------------------------------------------------------------
# 2: Gaussian occupation cost theta^2 / 4


def criterion_2(lo: float = -8.0, hi: float = 8.0,
                cells: int = 400) -> CheckResult:
    """Occupation cost of N(theta, 1) against a=-x, c=2 is theta^2/4."""
    t0 = time.perf_counter()
    grid = box_grid(lo, hi, cells)
    frozen = preset("ou").frozen(0.0, np.zeros(1))
    worst = 0.0
    for theta in (0.25, 0.5, 1.0):
        m, g = gaussian_slices(grid, theta, 1.0)
        sol = solve_cell(frozen, m, grid)
        val = rate_density_slice(frozen, m, sol.phi, grid, grad_half=g)
        worst = max(worst, abs(val - theta ** 2 / 4.0))
    m0, g0 = gaussian_slices(grid, 0.0, 1.0)
    sol0 = solve_cell(frozen, m0, grid)
    at_zero = rate_density_slice(frozen, m0, sol0.phi, grid, grad_half=g0)
    passed = worst <= 1e-3 and at_zero <= 1e-8
    return _timed(2, "Gaussian occupation cost", t0, passed,
                  f"worst gap {worst:.2e} value at zero {at_zero:.2e}")


# ---------------------------------------------------------------------------
# 3: zero-cost pair converges and costs nothing


def criterion_3() -> CheckResult:
    t0 = time.perf_counter()
    coeffs = preset("linear")
    grid = default_fast_grid(1)
    times = np.linspace(0.0, 1.0, 21)
    pair = zero_cost_path(coeffs, 0.7, times, grid)
    total = rate_closed_form(coeffs, pair.path, pair.flow).total
    residual = float(pair.residuals[-1])
    passed = (pair.converged and pair.iterations <= 50
              and residual <= 1e-8 and total <= 1e-4)
    return _timed(3, "zero-cost pair", t0, passed,
                  f"iterations {pair.iterations} residual {residual:.2e} "
                  f"rate {total:.2e}")


# ---------------------------------------------------------------------------
# 4: projection laws on randomized smooth fields


def _random_face_field(grid, rng) -> GradientField:
    comps = []
    for d in range(grid.dim):
        pts = grid.face_points(d)
        x = pts[:, 0]
        y = pts[:, 1] if grid.dim == 2 else np.zeros_like(x)
        vals = (rng.normal() * np.cos(0.7 * x + 0.3 * y)
                + rng.normal() * np.sin(0.4 * x) * np.cos(0.5 * y)
                + rng.normal() * np.exp(-0.05 * (x ** 2 + y ** 2)))
        comps.append(vals.reshape(grid.face_shape(d)))
    return GradientField(grid, comps)


def _random_potentials(grid, rng, count) -> list:
    pts = grid.points()
    out = []
    for _ in range(count):
        w = rng.uniform(0.3, 1.2, size=pts.shape[1])
        phase = rng.uniform(0.0, 6.0, size=pts.shape[1])
        p = np.prod(np.cos(w * pts + phase), axis=1)
        out.append(p.reshape(grid.shape))
    return out


def criterion_4(n_fields: int = 10) -> CheckResult:
    """Idempotence, gradient fixed point, orthogonality, Pythagoras."""
    t0 = time.perf_counter()
    gaps = {"orth": 0.0, "pyth": 0.0, "idem": 0.0, "fix": 0.0}
    for name in PRESETS:
        coeffs = preset(name)
        grid = default_fast_grid(coeffs.dims.l)
        frozen = coeffs.frozen(0.0, np.full(coeffs.dims.n, 0.4))
        m = invariant_density_grid(frozen, grid).values
        c_f = frozen.c_diag_faces(grid)
        m_f = face_weights(grid, m)
        rng = default_rng(101)
        pots = _random_potentials(grid, rng, n_fields)
        for i in range(n_fields):
            raw = _random_face_field(grid, rng)
            res = project(grid, c_f, m, raw)
            diff = raw - res.field
            worst = max(abs(float(face_inner(
                grid, GradientField.from_potential(grid, p), diff, c_f, m_f)))
                for p in pots)
            gaps["orth"] = max(gaps["orth"], worst)
            total = float(face_inner(grid, raw, raw, c_f, m_f))
            part = float(face_inner(grid, res.field, res.field, c_f, m_f))
            rest = float(face_inner(grid, diff, diff, c_f, m_f))
            gaps["pyth"] = max(gaps["pyth"], abs(total - part - rest)
                               / max(total, 1.0))
            again = project(grid, c_f, m, res.field)
            d2 = again.field - res.field
            gaps["idem"] = max(gaps["idem"], float(np.sqrt(max(
                float(face_inner(grid, d2, d2, c_f, m_f)), 0.0))))
            g = GradientField.from_potential(grid, pots[i])
            gres = project(grid, c_f, m, g)
            d3 = gres.field - g
            gaps["fix"] = max(gaps["fix"], float(np.sqrt(max(
                float(face_inner(grid, d3, d3, c_f, m_f)), 0.0))))
    passed = all(v <= 1e-6 for v in gaps.values())
    detail = " ".join(f"{k} {v:.2e}" for k, v in gaps.items())
    return _timed(4, "projection laws", t0, passed, detail)


# ---------------------------------------------------------------------------
# 5: one-dimensional closed forms of the correctors and the mobility


def _variable_c_set() -> CoefficientSet:
    """Custom 1D set with c(x) = 2 + sin(x)^2, so the c' term is live."""
    dims = Dimensions(1, 1, 2)

    def b(t, u, x):
        s = np.sqrt(2.0 + np.sin(x[..., 0]) ** 2)
        out = np.zeros(x.shape[:-1] + (1, 2))
        out[..., 0, 1] = s
        return out

    return CoefficientSet(
        dims=dims,
        A=const_field(np.zeros(1)),
        B=const_field([[1.0, 0.0]]),
        a=lambda t, u, x: -x,
        b=b,
        div_c=lambda t, u, x: np.sin(2.0 * x[..., :1]),
        name="variable-c", fast_u_dependent=False)


def criterion_5(lo: float = -8.0, hi: float = 8.0,
                cells: int = 400) -> CheckResult:
    """Phi = (a - c'/2)/c, Psi = G/c, corrected mobility 1 - rho^2."""
    t0 = time.perf_counter()
    grid = box_grid(lo, hi, cells)
    xf = grid.face_points(0)[:, 0]
    phi_gap = 0.0
    cases = [
        (preset("ou").frozen(0.0, np.zeros(1)), -xf / 2.0, [2.0]),
        (preset("doublewell").frozen(0.0, np.zeros(1)),
         (xf - xf ** 3) / 2.0, [2.0]),
        (_variable_c_set().frozen(0.0, np.zeros(1)),
         (-xf - 0.5 * np.sin(2.0 * xf)) / (2.0 + np.sin(xf) ** 2), None),
    ]
    for frozen, exact, c_override in cases:
        m = invariant_density_grid(frozen, grid).values
        res = solve_phi(frozen, m, grid)
        err = res.field.comps[0] - exact
        c_f = c_override if c_override is not None else frozen.c_diag_faces(grid)
        phi_gap = max(phi_gap, _weighted_norm(grid, [err], c_f, m))
    psi_gap = 0.0
    q_gap = 0.0
    for rho in (0.0, 0.5, 0.9):
        frozen = preset("ou_rho", rho=rho).frozen(0.0, np.zeros(1))
        m = invariant_density_grid(frozen, grid).values
        sol = solve_cell(frozen, m, grid)
        if rho != 0.0:
            err = sol.psi.comps[0][:, 0] - rho
            psi_gap = max(psi_gap, _weighted_norm(grid, [err], [1.0], m))
        q_gap = max(q_gap, abs(float(sol.q[0, 0]) - (1.0 - rho ** 2)))
    passed = phi_gap <= 1e-5 and psi_gap <= 1e-5 and q_gap <= 1e-6
    return _timed(5, "1D closed forms", t0, passed,
                  f"phi {phi_gap:.2e} psi {psi_gap:.2e} mobility {q_gap:.2e}")


# ---------------------------------------------------------------------------
# 6: reduction to the small-noise path functional


def criterion_6() -> CheckResult:
    """Decoupled preset: rate equals the quadratic path cost exactly."""
    t0 = time.perf_counter()
    coeffs = preset("decoupled")
    grid = default_fast_grid(1)
    times = np.linspace(0.0, 1.0, 21)
    m, gf = gaussian_slices(grid, 0.0, 1.0)
    flow = constant_flow(grid, times, m, gf)
    rng = default_rng(17)
    worst = 0.0
    for _ in range(5):
        vals = np.cumsum(rng.normal(0.0, 0.2, size=len(times)))
        X = Path(times, vals)
        total = rate_closed_form(coeffs, X, flow).total
        xdot = np.gradient(vals, times)
        quad = float(np.trapezoid(0.5 * (xdot + vals) ** 2, times))
        worst = max(worst, abs(total - quad))
    return _timed(6, "small-noise reduction", t0, worst <= 1e-8,
                  f"worst gap {worst:.2e}")


# ---------------------------------------------------------------------------
# 7: Monte Carlo decay slope against the quadratic reference


def criterion_7(replicas: int = 100000,
                time_limit: float = 300.0) -> CheckResult:
    t0 = time.perf_counter()
    event = EventSpec(kind="endpoint-halfspace", direction=[1.0],
                      threshold=LQ_ENDPOINT)
    est = mc_decay(preset("decoupled"), event, [0.2, 0.1, 0.05], replicas,
                   seed=7, tilted=True, n_nodes=9)
    rel = abs(-est.slope - LQ_REFERENCE) / LQ_REFERENCE
    runtime = time.perf_counter() - t0
    passed = rel <= 0.25 and np.all(est.usable) and runtime <= time_limit
    return CheckResult(7, "decay slope", passed,
                       f"slope {est.slope:.4f} reference {-LQ_REFERENCE:.4f} "
                       f"rel {rel:.2e}", runtime)


# ---------------------------------------------------------------------------
# 8: law of large numbers for the occupation density


def criterion_8() -> CheckResult:
    t0 = time.perf_counter()
    ladder = occupation_lln_ladder(preset("ou"), [1e-1, 1e-2, 1e-3],
                                   seeds=(12, 13, 14))
    passed = (ladder[0] <= 0.25 and ladder[-1] <= 0.1
              and bool(np.all(np.diff(ladder) < 0.0)))
    detail = "L1 " + " ".join(f"{v:.4f}" for v in ladder)
    return _timed(8, "occupation LLN", t0, passed, detail)


# ---------------------------------------------------------------------------
# 9: long-run growth rate, simulation against variational value


def criterion_9() -> CheckResult:
    t0 = time.perf_counter()
    coeffs = preset("linear")
    worst = 0.0
    details = []
    for lam in (0.5, 1.0):
        hv, _ = h_variational(coeffs, 0.4, lam)
        hm = estimate_H(coeffs, 0.4, lam, T_long=200.0, replicas=1500,
                        seed=0)
        rel = abs(hm - hv) / hv
        worst = max(worst, rel)
        details.append(f"lam {lam:g}: mc {hm:.4f} var {hv:.4f}")
    return _timed(9, "growth-rate consistency", t0, worst <= 0.10,
                  "; ".join(details) + f" worst rel {worst:.2e}")


# ---------------------------------------------------------------------------
# 10: symmetric case at the invariant density


def criterion_10() -> CheckResult:
    t0 = time.perf_counter()
    grid = default_fast_grid(1)
    fast_gap = 0.0
    point_gap = 0.0
    # numerically computed invariant density, compared against its own
    # flux-balance log gradient (the exact discrete Dm/(2m); raw log
    # differencing would add an O(h^2) quadrature term)
    for name, u in (("ou", 0.0), ("ou_rho", 0.0), ("linear", 0.4),
                    ("decoupled", 0.0)):
        frozen = preset(name).frozen(0.0, np.full(1, u))
        dens = invariant_density_grid(frozen, grid)
        res = solve_phi(frozen, dens.values, grid)
        fast_gap = max(fast_gap,
                       rate_density_slice(frozen, dens.values, res.field,
                                          grid))
        err = res.field.comps[0] - dens.log_grad_half().comps[0]
        m_f = face_weights(grid, dens.values)[0]
        point_gap = max(point_gap, float(np.max(np.abs(err[m_f > 1e-8]))))
    # bistable landscape with the closed-form density exp(x^2/2 - x^4/4),
    # compared against the analytic log gradient at the faces
    frozen = preset("doublewell").frozen(0.0, np.zeros(1))
    x = grid.centers
    m = np.exp(x ** 2 / 2.0 - x ** 4 / 4.0)
    m = m / grid.integrate(m)
    res = solve_phi(frozen, m, grid)
    fast_gap = max(fast_gap, rate_density_slice(frozen, m, res.field, grid))
    xf = grid.face_points(0)[:, 0]
    err = res.field.comps[0] - (xf - xf ** 3) / 2.0
    m_f = face_weights(grid, m)[0]
    point_gap = max(point_gap, float(np.max(np.abs(err[m_f > 1e-8]))))
    passed = fast_gap <= 1e-6 and point_gap <= 1e-6
    return _timed(10, "symmetric case", t0, passed,
                  f"fast part {fast_gap:.2e} pointwise {point_gap:.2e}")


# ---------------------------------------------------------------------------
# 11: robustness to enlarging the box


def criterion_11() -> CheckResult:
    """Criteria 1, 2, 5 reproduced on [-12, 12] at the same cell width."""
    t0 = time.perf_counter()
    parts = [criterion_1(-12.0, 12.0, 600, time_limit=None),
             criterion_2(-12.0, 12.0, 600),
             criterion_5(-12.0, 12.0, 600)]
    passed = all(p.passed for p in parts)
    detail = "; ".join(f"#{p.number} {'ok' if p.passed else 'FAIL'} "
                       f"({p.detail})" for p in parts)
    return _timed(11, "box robustness", t0, passed, detail)


# ---------------------------------------------------------------------------


ALL_CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4,
                criterion_5, criterion_6, criterion_7, criterion_8,
                criterion_9, criterion_10, criterion_11)


def run_all(numbers=None, stream=None) -> list:
    """Run the acceptance checks (all by default) and print one line each."""
    results = []
    for k, fn in enumerate(ALL_CRITERIA, start=1):
        if numbers is not None and k not in numbers:
            continue
        try:
            res = fn()
        except Exception as exc:   # a crashed check is a failed check
            res = CheckResult(k, fn.__name__, False,
                              f"raised {type(exc).__name__}: {exc}", 0.0)
        results.append(res)
        print(res.line(), file=stream)
    return results
