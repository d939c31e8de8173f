"""Coefficient products and sampled condition checks.

The reference for the noise products is a brute-force triple loop, kept
deliberately dumb so it cannot share a bug with the vectorized einsum path.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale.model import (CoefficientSet, Dimensions, FrozenFast,
                            SamplingLattice, check_conditions, const_field,
                            derive, preset)


def product_oracle(M1, M2):
    """Plain-loop M1 @ M2^T used as the independent reference."""
    n, k = M1.shape
    m, k2 = M2.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for r in range(k):
                s += M1[i, r] * M2[j, r]
            out[i, j] = s
    return out


def make_coeffs(Bmat, bmat):
    n, k = Bmat.shape
    l = bmat.shape[0]
    return CoefficientSet(
        dims=Dimensions(n, l, k),
        A=const_field(np.zeros(n)),
        B=const_field(Bmat),
        a=lambda t, u, x: -x,
        b=const_field(bmat),
    )


class TestDerive:
    def test_correlated_1d_pair(self):
        # B=(1,0), b=(rho, sqrt(1-rho^2)): C=1, c=1, G=rho
        rho = 0.9
        d = derive(preset("ou_rho", rho=rho))
        u, x = np.zeros(1), np.zeros(1)
        assert d.C(0.0, u, x) == pytest.approx(np.array([[1.0]]))
        assert d.c(0.0, u, x) == pytest.approx(np.array([[1.0]]))
        assert d.G(0.0, u, x) == pytest.approx(np.array([[rho]]))

    def test_zero_slow_noise(self):
        d = derive(preset("degenerate"))
        u, x = np.zeros(1), np.zeros(1)
        assert np.all(d.C(0.0, u, x) == 0.0)
        assert np.all(d.G(0.0, u, x) == 0.0)

    def test_identity_fast_noise_row_of_ones(self):
        l = 3
        Bmat = np.ones((1, l))
        bmat = np.eye(l)
        coeffs = make_coeffs(Bmat, bmat)
        d = derive(coeffs)
        u, x = np.zeros(1), np.zeros(l)
        expected = product_oracle(Bmat, bmat)
        assert d.G(0.0, u, x) == pytest.approx(expected)
        assert np.all(expected == 1.0)

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4),
           st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_products_match_brute_force(self, n, l, k, seed):
        rng = np.random.default_rng(seed)
        Bmat = rng.normal(size=(n, k))
        bmat = rng.normal(size=(l, k))
        d = derive(make_coeffs(Bmat, bmat))
        u, x = np.zeros(n), np.zeros(l)
        assert d.C(0.0, u, x) == pytest.approx(product_oracle(Bmat, Bmat))
        assert d.c(0.0, u, x) == pytest.approx(product_oracle(bmat, bmat))
        assert d.G(0.0, u, x) == pytest.approx(product_oracle(Bmat, bmat))

    def test_symmetry_of_squares(self):
        rng = np.random.default_rng(7)
        d = derive(make_coeffs(rng.normal(size=(2, 3)), rng.normal(size=(2, 3))))
        u, x = np.zeros(2), np.zeros(2)
        C = d.C(0.0, u, x)
        c = d.c(0.0, u, x)
        assert np.allclose(C, C.T) and np.allclose(c, c.T)
        assert np.min(np.linalg.eigvalsh(C)) >= -1e-12
        assert np.min(np.linalg.eigvalsh(c)) >= -1e-12

    def test_purity_bit_exact(self):
        rng = np.random.default_rng(3)
        coeffs = make_coeffs(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)))
        d1 = derive(coeffs)
        d2 = derive(coeffs)
        u = rng.normal(size=2)
        x = rng.normal(size=(5, 2))
        for f1, f2 in ((d1.C, d2.C), (d1.c, d2.c), (d1.G, d2.G)):
            a1, a2 = f1(0.3, u, x), f2(0.3, u, x)
            assert np.array_equal(a1, a2)

    def test_k_mismatch_raises(self):
        coeffs = CoefficientSet(
            dims=Dimensions(1, 1, 2),
            A=const_field(np.zeros(1)),
            B=const_field(np.ones((1, 2))),
            a=lambda t, u, x: -x,
            b=const_field(np.ones((1, 3))),
        )
        with pytest.raises(ValueError, match="k"):
            derive(coeffs)

    def test_dims_must_be_positive(self):
        with pytest.raises(ValueError):
            Dimensions(0, 1, 1)


class TestCheckConditions:
    def test_angle_margin_correlated_pair(self):
        for rho in (0.0, 0.5, 0.9):
            rep = check_conditions(preset("ou_rho", rho=rho))
            assert rep.angle_margin == pytest.approx(1.0 - rho ** 2, abs=1e-12)
            assert rep.ellipticity_margin == pytest.approx(1.0, abs=1e-12)

    def test_stability_worst_radial(self):
        rep = check_conditions(preset("ou"))
        # a = -x: radial drift on the shell |x| = R equals -R
        assert rep.stability_worst == pytest.approx(-8.0, abs=1e-12)
        assert rep.stability_ok

    def test_degenerate_branch_flagged(self):
        rep = check_conditions(preset("degenerate"))
        assert rep.degenerate_slow_noise
        assert rep.angle_margin is None
        assert any("constrained" in msg for msg in rep.notes)

    def test_report_deterministic_and_json_keys(self):
        lat = SamplingLattice(x_count=17, u_count=5)
        r1 = check_conditions(preset("doublewell"), lattice=lat)
        r2 = check_conditions(preset("doublewell"), lattice=lat)
        assert r1.to_json() == r2.to_json()
        payload = json.loads(r1.to_json())
        for key in ("ellipticity_margin", "angle_margin", "stability_worst",
                    "lattice"):
            assert key in payload

    def test_doublewell_unstable_inside_stable_outside(self):
        # a = x - x^3 points inward on the default shell radius 8
        rep = check_conditions(preset("doublewell"))
        assert rep.stability_worst == pytest.approx(8.0 - 8.0 ** 3, abs=1e-9)

    def test_2d_preset_margins(self):
        rep = check_conditions(preset("ou2d"),
                               lattice=SamplingLattice(x_count=9, u_count=3))
        assert rep.ellipticity_margin == pytest.approx(2.0, abs=1e-12)
        assert rep.angle_margin == pytest.approx(1.0, abs=1e-12)


class TestFrozenFast:
    def test_numeric_divergence_matches_analytic(self):
        # c = 2 + sin(x)^2 has div c = 2 sin x cos x = sin(2x)
        dims = Dimensions(1, 1, 1)
        coeffs = CoefficientSet(
            dims=dims,
            A=const_field(np.zeros(1)),
            B=const_field(np.zeros((1, 1))),
            a=lambda t, u, x: -x,
            b=lambda t, u, x: np.sqrt(2.0 + np.sin(x) ** 2)[..., None],
        )
        frozen = FrozenFast(coeffs, derive(coeffs), 0.0, np.zeros(1))
        xs = np.linspace(-2, 2, 11)
        got = frozen.div_c(xs)[:, 0]
        assert got == pytest.approx(np.sin(2 * xs), abs=1e-7)

    def test_unknown_preset_lists_names(self):
        with pytest.raises(KeyError, match="ou_rho"):
            preset("nope")
