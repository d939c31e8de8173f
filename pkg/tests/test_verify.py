"""Validation-layer tests: decay experiments, minimization, growth rate.

The closed forms used as oracles:
  - endpoint cost of the small-noise OU slow process, min over paths
    from 0 to theta of 1/2 int (xdot + x)^2: theta^2 (e^2-1)/(4 sinh^2 1)
  - mean-shift decomposition at rho = 0: the joint slow/occupation
    minimum is exactly half the endpoint cost above (the occupation
    penalty mu^2/2 halves the effective control cost pointwise)
  - frozen tilt growth rates: principal eigenvalue of the symmetrized
    tilted generator on the grid, an independent tridiagonal eigensolve
"""

import numpy as np
import pytest
from scipy.linalg import eigh_tridiagonal

from twoscale.flows import gaussian_slices
from twoscale.grids import default_fast_grid
from twoscale.model import (CoefficientSet, Dimensions, const_field, derive,
                            preset)
from twoscale.paths import Path
from twoscale.stationary import NumericalError, invariant_density_grid
from twoscale.verify import (DecayEstimate, EventSpec, PhiCheckReport,
                             bounded_lipschitz_distance, decay_to_csv,
                             estimate_H, h_variational, hat_functions,
                             mc_decay, minimize_rate, occupation_lln_ladder,
                             phi_mc_crosscheck, wilson_interval)

GRID = default_fast_grid(1)

ENDPOINT = 0.8
LQ_COST = ENDPOINT ** 2 * (np.e ** 2 - 1.0) / (4.0 * np.sinh(1.0) ** 2)


def fk_oracle_set():
    """Fast OU with slow functional A = x and no slow noise at all."""
    dims = Dimensions(1, 1, 1)
    return CoefficientSet(
        dims=dims,
        A=lambda t, u, x: x,
        B=const_field([[0.0]]),
        a=lambda t, u, x: -x,
        b=const_field([[np.sqrt(2.0)]]),
        div_c=const_field([0.0]),
        name="fk-oracle", fast_u_dependent=False)


def eigen_growth_rate(frozen, lam, grid):
    """Principal eigenvalue of the tilted frozen generator plus potential.

    Independent route: symmetrize by the stationary density with
    geometric face weights and call a tridiagonal eigensolver.
    """
    m = invariant_density_grid(frozen, grid).values
    x = grid.centers
    h = grid.h
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    cc = np.asarray(frozen.c(x), dtype=float).reshape(-1)
    cf = 0.5 * (cc[:-1] + cc[1:])
    mgeo = np.sqrt(m[:-1] * m[1:])
    Av = np.asarray(frozen.A(x), dtype=float).reshape(-1, lam.size) @ lam
    Cv = np.asarray(frozen.C(x), dtype=float).reshape(-1, lam.size, lam.size)
    Vv = Av + 0.5 * np.einsum("xij,i,j->x", Cv, lam, lam)
    # the geometric face weight cancels against the symmetrizer on the
    # off-diagonal, leaving the bare conductance
    off = 0.5 * cf / (h * h)
    diag = Vv.copy()
    diag[:-1] -= 0.5 * cf * mgeo / (h * h * m[:-1])
    diag[1:] -= 0.5 * cf * mgeo / (h * h * m[1:])
    w, _ = eigh_tridiagonal(diag, off, select="i",
                            select_range=(grid.n - 1, grid.n - 1))
    return float(w[0])


# ---------------------------------------------------------------------------
# distance class and intervals


def test_hat_class_bounded_and_lipschitz():
    hats = hat_functions(GRID)
    assert hats.shape[1] == GRID.n
    assert np.all(hats >= 0.0) and np.all(hats <= 1.0)
    x = GRID.centers
    slopes = np.abs(np.diff(hats, axis=1)) / np.diff(x)
    assert np.max(slopes) <= 1.0 + 1e-9
    # every node carries one hat that peaks there
    assert np.isclose(np.max(hats), 1.0, atol=GRID.h)


def test_bounded_lipschitz_distance_properties():
    m0, _ = gaussian_slices(GRID, [0.0], [1.0])
    m1, _ = gaussian_slices(GRID, [0.5], [1.0])
    assert bounded_lipschitz_distance(m0, m0, GRID) == 0.0
    d01 = bounded_lipschitz_distance(m0, m1, GRID)
    d10 = bounded_lipschitz_distance(m1, m0, GRID)
    assert d01 == pytest.approx(d10, rel=1e-12)
    assert 0.05 < d01 < 0.5


def test_wilson_interval_endpoints_and_value():
    lo, hi = wilson_interval(0, 50)
    assert lo == pytest.approx(0.0, abs=1e-15)
    assert 0.0 < hi < 0.2
    lo1, hi1 = wilson_interval(50, 50)
    assert hi1 == pytest.approx(1.0, abs=1e-15)
    # frozen hand evaluation of the score interval at 8 hits out of 100
    lo2, hi2 = wilson_interval(8, 100)
    assert lo2 == pytest.approx(0.04109346, abs=1e-6)
    assert hi2 == pytest.approx(0.14998108, abs=1e-6)
    with pytest.raises(ValueError):
        wilson_interval(5, 0)


def test_event_spec_validation():
    with pytest.raises(ValueError, match="unknown event kind"):
        EventSpec(kind="banana")
    with pytest.raises(ValueError, match="direction"):
        EventSpec(kind="endpoint-halfspace")
    with pytest.raises(ValueError, match="radius"):
        EventSpec(kind="path-ball",
                  reference=Path(np.array([0.0, 1.0]), np.zeros((2, 1))))
    ev = EventSpec(kind="endpoint-halfspace", direction=[1.0, 0.0],
                   threshold=0.3)
    with pytest.raises(ValueError, match="slow dimension"):
        ev.check_dimensions(preset("ou").dims)
    full = EventSpec(kind="endpoint-halfspace", direction=[1.0],
                     threshold=-np.inf)
    full.check_dimensions(preset("ou").dims)


def test_decay_estimate_validation():
    base = dict(p_hat=[0.5, 0.4], ci_lo=[0.4, 0.3], ci_hi=[0.6, 0.5],
                eps_ln_p=[-0.1, -0.09], slope=-0.08, reference=0.1,
                hits=[5, 4], replicas=10, usable=[True, True], tilted=False)
    with pytest.raises(ValueError, match="strictly decreasing"):
        DecayEstimate(eps=[0.1, 0.2], **base)
    bad = dict(base)
    bad["p_hat"] = [0.5, 0.0]
    with pytest.raises(ValueError, match="probabilities"):
        DecayEstimate(eps=[0.2, 0.1], **bad)
    est = DecayEstimate(eps=[0.2, 0.1], **base)
    d = est.as_json_dict()
    assert d["slope"] == -0.08 and len(d["eps"]) == 2


def test_decay_csv_roundtrip(tmp_path):
    est = DecayEstimate(eps=[0.2, 0.1], p_hat=[0.5, 0.4], ci_lo=[0.4, 0.3],
                        ci_hi=[0.6, 0.5], eps_ln_p=[-0.14, -0.09],
                        slope=-0.05, reference=0.1, hits=[5, 4], replicas=10,
                        usable=[True, True], tilted=True)
    out = tmp_path / "decay.csv"
    decay_to_csv(est, out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "eps,p_hat,ci_lo,ci_hi,eps_ln_p,reference"
    row = lines[1].split(",")
    assert float(row[0]) == 0.2 and float(row[5]) == 0.1


# ---------------------------------------------------------------------------
# constrained minimization


def test_minimize_rate_endpoint_matches_lq():
    ev = EventSpec(kind="endpoint-halfspace", direction=[1.0],
                   threshold=ENDPOINT)
    pair, value = minimize_rate(preset("decoupled"), ev, n_nodes=9)
    assert abs(value - LQ_COST) / LQ_COST <= 0.01
    assert pair.constraint_violation <= 1e-6
    assert float(pair.path.values[-1, 0]) >= ENDPOINT - 1e-6
    # the slow excursion carries all of the cost at the invariant flow
    assert pair.breakdown.fast_part <= 1e-6 * (1.0 + value)


def test_minimize_rate_zero_cost_event():
    ev = EventSpec(kind="endpoint-halfspace", direction=[1.0], threshold=0.05)
    pair, value = minimize_rate(preset("decoupled"), ev, n_nodes=9, x0=[0.3])
    assert value <= 1e-4
    assert pair.constraint_violation <= 1e-6


def test_minimize_rate_infeasible_event_raises():
    target, _ = gaussian_slices(GRID, [6.0], [0.25])
    ev = EventSpec(kind="occupation-ball", target=target, radius=0.01)
    with pytest.raises(NumericalError, match="infeasible"):
        minimize_rate(preset("ou"), ev, n_nodes=5)


def test_minimize_rate_rho_scan_decomposition():
    ev = EventSpec(kind="endpoint-halfspace", direction=[1.0],
                   threshold=ENDPOINT)
    values = {}
    for rho in (0.0, 0.5, 0.9):
        _, v = minimize_rate(preset("ou_rho", rho=rho), ev, n_nodes=9,
                             flow_family="gaussian-mean")
        values[rho] = v
    print(f"rho scan of minimized values: {values}")
    assert all(v > 0 for v in values.values())
    # shared noise lowers the cost monotonically here; recorded, and the
    # rho = 0 value factorizes into the mean-shift decomposition
    assert abs(values[0.0] - 0.5 * LQ_COST) / (0.5 * LQ_COST) <= 0.02


# ---------------------------------------------------------------------------
# Monte Carlo decay


def test_mc_decay_full_space_event():
    ev = EventSpec(kind="endpoint-halfspace", direction=[1.0],
                   threshold=-np.inf)
    est = mc_decay(preset("decoupled"), ev, [0.2, 0.1], 500, seed=1,
                   reference=0.0, n_nodes=5)
    assert np.all(est.p_hat == 1.0)
    assert est.slope == 0.0
    assert np.all(est.usable)


def test_mc_decay_zero_hit_rung_unusable():
    ev = EventSpec(kind="endpoint-halfspace", direction=[1.0],
                   threshold=ENDPOINT)
    est = mc_decay(preset("decoupled"), ev, [0.2, 0.05], 300, seed=5,
                   reference=LQ_COST, pair=None, n_nodes=5)
    assert not est.usable[1]
    assert np.isnan(est.eps_ln_p[1])
    assert est.hits[1] == 0
    # the slope falls back to the single usable rung
    assert est.slope == pytest.approx(est.eps_ln_p[0])


def test_mc_decay_plain_and_tilted_agree():
    ev = EventSpec(kind="endpoint-halfspace", direction=[1.0],
                   threshold=ENDPOINT)
    co = preset("decoupled")
    plain = mc_decay(co, ev, [0.2], 4000, seed=5, tilted=False, n_nodes=9)
    tilt = mc_decay(co, ev, [0.2], 4000, seed=5, tilted=True, n_nodes=9)
    # joint confidence intervals overlap
    assert plain.ci_lo[0] <= tilt.ci_hi[0]
    assert tilt.ci_lo[0] <= plain.ci_hi[0]
    assert tilt.hits[0] > 10 * plain.hits[0]


def test_mc_decay_decoupled_slope_near_reference():
    ev = EventSpec(kind="endpoint-halfspace", direction=[1.0],
                   threshold=ENDPOINT)
    est = mc_decay(preset("decoupled"), ev, [0.2, 0.1, 0.05], 20000, seed=7,
                   tilted=True, n_nodes=9)
    assert abs(-est.slope - LQ_COST) / LQ_COST <= 0.25
    assert np.all(est.usable)
    # the finite-eps values approach the limit from below in magnitude
    assert np.all(np.diff(est.eps_ln_p) > 0)


def test_mc_decay_occupation_ball_lln():
    co = preset("ou")
    mhat = invariant_density_grid(
        co.frozen(0.0, np.zeros(1), derive(co)), GRID).values
    ev = EventSpec(kind="occupation-ball", target=mhat, radius=0.2)
    est = mc_decay(co, ev, [0.1, 0.01], 400, seed=3, n_nodes=5)
    assert est.reference <= 1e-8
    assert est.eps_ln_p[-1] >= -0.05
    assert est.slope >= -0.05


def test_mc_decay_rejects_bad_ladder():
    ev = EventSpec(kind="endpoint-halfspace", direction=[1.0], threshold=0.1)
    with pytest.raises(ValueError, match="strictly decreasing"):
        mc_decay(preset("decoupled"), ev, [0.1, 0.2], 100, reference=0.0)


def test_occupation_lln_ladder_decreases():
    lad = occupation_lln_ladder(preset("ou"), [1e-1, 1e-2, 1e-3],
                                seeds=(12, 13, 14))
    assert lad[0] <= 0.25
    assert lad[-1] <= 0.1
    assert np.all(np.diff(lad) < 0.0)


# ---------------------------------------------------------------------------
# growth rate of tilted averages


def test_h_variational_exact_on_fast_ou():
    co = fk_oracle_set()
    for lam in (0.5, 0.8):
        value, (mu, sig) = h_variational(co, 0.0, lam, GRID)
        assert value == pytest.approx(lam * lam, abs=1e-6)
        assert mu[0] == pytest.approx(2.0 * lam, abs=1e-3)
        assert sig[0] == pytest.approx(1.0, abs=1e-3)


def test_h_variational_matches_eigen_oracle():
    co = fk_oracle_set()
    der = derive(co)
    frozen = co.frozen(0.0, np.zeros(1), der)
    for lam in (0.5, 0.8):
        ev = eigen_growth_rate(frozen, lam, GRID)
        hv, _ = h_variational(co, 0.0, lam, GRID, der)
        assert abs(ev - hv) <= 1e-3 * max(hv, 1e-12)
    lin = preset("linear")
    fr2 = lin.frozen(0.0, np.array([0.4]), derive(lin))
    for lam in (0.5, 1.0):
        ev = eigen_growth_rate(fr2, lam, GRID)
        assert ev == pytest.approx(1.5 * lam * lam, rel=1e-3)


def test_estimate_h_zero_tilt_is_zero():
    assert estimate_H(preset("linear"), 0.4, 0.0) == 0.0


def test_estimate_h_against_eigen_oracle():
    co = fk_oracle_set()
    h_mc = estimate_H(co, 0.0, 0.8, T_long=100.0, replicas=800, seed=4)
    assert h_mc == pytest.approx(0.64, rel=0.05)


def test_estimate_h_linear_consistency():
    co = preset("linear")
    for lam in (0.5, 1.0):
        hv, _ = h_variational(co, 0.4, lam)
        h_mc = estimate_H(co, 0.4, lam, T_long=200.0, replicas=1500, seed=0)
        assert abs(h_mc - hv) / hv <= 0.10


def test_estimate_h_large_tilt_warns():
    with pytest.warns(UserWarning):
        estimate_H(fk_oracle_set(), 0.0, 2.5, T_long=5.0, replicas=50,
                   seed=0)


# ---------------------------------------------------------------------------
# trajectory crosscheck of the cell potential


def test_phi_crosscheck_ou():
    co = preset("ou")
    frozen = co.frozen(0.0, np.zeros(1), derive(co))
    mhat = invariant_density_grid(frozen, GRID).values
    rep = phi_mc_crosscheck(frozen, mhat, GRID, T_long=10.0, seed=0,
                            replicas=20000)
    assert isinstance(rep, PhiCheckReport)
    assert not rep.excluded.any()
    assert rep.max_discrepancy <= 0.05
    # solver probe differences reproduce the quadratic closed form
    quad = -rep.probes ** 2 / 4.0
    adj_solver = rep.solver_values - rep.solver_values.mean()
    assert np.max(np.abs(adj_solver - (quad - quad.mean()))) <= 1e-8


def test_phi_crosscheck_zero_source():
    co = preset("ou")
    frozen = co.frozen(0.0, np.zeros(1), derive(co))
    mhat = invariant_density_grid(frozen, GRID).values
    rep = phi_mc_crosscheck(frozen, mhat, GRID, T_long=5.0, seed=2,
                            replicas=2000, f_override=np.zeros(GRID.n))
    assert np.all(rep.mc_values == 0.0)
    assert rep.max_discrepancy == 0.0


def test_phi_crosscheck_edge_probe_excluded():
    co = preset("ou")
    frozen = co.frozen(0.0, np.zeros(1), derive(co))
    mhat = invariant_density_grid(frozen, GRID).values
    rep = phi_mc_crosscheck(frozen, mhat, GRID, T_long=10.0, seed=1,
                            replicas=20000, probes=[0.0, 7.5])
    assert not rep.excluded[0]
    assert rep.excluded[1]


def test_phi_crosscheck_all_noisy_raises():
    co = preset("ou")
    frozen = co.frozen(0.0, np.zeros(1), derive(co))
    mhat = invariant_density_grid(frozen, GRID).values
    with pytest.raises(NumericalError, match="standard-error"):
        phi_mc_crosscheck(frozen, mhat, GRID, T_long=10.0, seed=3,
                          replicas=200)
