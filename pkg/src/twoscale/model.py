"""Coefficient sets for coupled slow-fast diffusions.

A model is four callables on (t, u, x):

    A : slow drift, values in R^n          B : slow noise map, R^(n x k)
    a : fast drift, values in R^l          b : fast noise map, R^(l x k)

The slow and fast equations are driven by the same k Wiener components,
which is where the noise correlation comes from; the derived products

    C = B B^T   (n x n),   c = b b^T   (l x l),   G = B b^T   (n x l)

carry all of it.  Callables must broadcast: u and x may have arbitrary
compatible leading axes and outputs keep those axes in front of the value
shape.  Builtin presets follow that convention and provide analytic
divergences of c; user-supplied sets fall back to centered differences.

Well-posedness is checked by sampling, not symbolically: ellipticity of c,
the perpendicular-noise condition (C - G c^{-1} G^T positive definite,
unless C vanishes identically, which selects the constrained regime),
radial stability of the fast drift and Lipschitz difference quotients are
all evaluated on a declared lattice and reported with their margins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Dimensions:
    """State-space dimensions: slow n, fast l, driving noise k."""

    n: int
    l: int
    k: int

    def __post_init__(self):
        if min(self.n, self.l, self.k) < 1:
            raise ValueError("dimensions must be positive")


def const_field(value):
    """Wrap a constant array as a broadcasting coefficient callable."""
    value = np.asarray(value, dtype=float)

    def fn(t, u, x):
        lead = np.broadcast_shapes(np.shape(u)[:-1], np.shape(x)[:-1])
        return np.broadcast_to(value, lead + value.shape)

    return fn


@dataclass
class CoefficientSet:
    """Model coefficients plus evaluation metadata.

    div_c, if given, maps (t, u, x) to the vector (div c)_i = sum_j d_j c_ij
    analytically; otherwise derived quantities use centered differences.
    fast_u_dependent marks whether (a, b) read the slow state, which cell
    solution caches use to decide what may be reused across path points.
    """

    dims: Dimensions
    A: callable
    B: callable
    a: callable
    b: callable
    div_c: callable | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    fast_u_dependent: bool = True
    time_dependent: bool = False

    def frozen(self, t: float, u, derived: "DerivedCoefficients | None" = None
               ) -> "FrozenFast":
        """Freeze the fast-variable coefficients at one (t, u)."""
        return FrozenFast(self, derived if derived is not None else derive(self),
                          t, u)


@dataclass
class DerivedCoefficients:
    """Noise products C = BB^T, c = bb^T, G = Bb^T as callables."""

    C: callable
    c: callable
    G: callable
    dims: Dimensions


def _outer(fn1, fn2):
    def prod(t, u, x):
        M1 = np.asarray(fn1(t, u, x), dtype=float)
        M2 = np.asarray(fn2(t, u, x), dtype=float)
        if M1.shape[-1] != M2.shape[-1]:
            raise ValueError(
                f"noise maps disagree on k: {M1.shape[-1]} vs {M2.shape[-1]}")
        return np.einsum("...ik,...jk->...ij", M1, M2)

    return prod


def derive(coeffs: CoefficientSet) -> DerivedCoefficients:
    """Form C, c, G from the noise maps.

    Pure: the returned callables close over the inputs only.  A shared-k
    mismatch between B and b raises on first evaluation, and immediately
    here for the probe point.
    """
    dims = coeffs.dims
    C = _outer(coeffs.B, coeffs.B)
    c = _outer(coeffs.b, coeffs.b)
    G = _outer(coeffs.B, coeffs.b)
    # probe once so dimension mismatches fail at derive time
    u0 = np.zeros(dims.n)
    x0 = np.zeros(dims.l)
    for fn, shape, label in ((C, (dims.n, dims.n), "C"),
                             (c, (dims.l, dims.l), "c"),
                             (G, (dims.n, dims.l), "G")):
        got = np.asarray(fn(0.0, u0, x0)).shape
        if got != shape:
            raise ValueError(f"{label} evaluates to shape {got}, expected {shape}")
    return DerivedCoefficients(C=C, c=c, G=G, dims=dims)


def div_c_numeric(c_fn, t, u, x, step: float) -> np.ndarray:
    """Centered-difference divergence of c along x, row sums over columns."""
    x = np.asarray(x, dtype=float)
    l = x.shape[-1]
    out = np.zeros(x.shape[:-1] + (l,))
    for j in range(l):
        e = np.zeros(l)
        e[j] = step
        dc = (np.asarray(c_fn(t, u, x + e)) - np.asarray(c_fn(t, u, x - e))) / (2 * step)
        out += dc[..., :, j]
    return out


class FrozenFast:
    """Fast-variable coefficients frozen at one (t, u).

    Exposes vectorized callables of x alone, shaped for point batches
    (N, l json-style or bare (N,) in 1D is accepted).  The finite-difference
    step for div c defaults to 1e-4 of a reference cell width.
    """

    def __init__(self, coeffs: CoefficientSet, derived: DerivedCoefficients,
                 t: float, u, fd_step: float = 1e-4 * 0.04):
        self.coeffs = coeffs
        self.derived = derived
        self.t = float(t)
        self.u = np.atleast_1d(np.asarray(u, dtype=float))
        self.fd_step = float(fd_step)
        self.dims = coeffs.dims

    def _x(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and self.dims.l == 1:
            x = x[:, None]
        return x

    def a(self, x):
        return np.asarray(self.coeffs.a(self.t, self.u, self._x(x)), dtype=float)

    def c(self, x):
        return np.asarray(self.derived.c(self.t, self.u, self._x(x)), dtype=float)

    def C(self, x):
        return np.asarray(self.derived.C(self.t, self.u, self._x(x)), dtype=float)

    def G(self, x):
        return np.asarray(self.derived.G(self.t, self.u, self._x(x)), dtype=float)

    def A(self, x):
        return np.asarray(self.coeffs.A(self.t, self.u, self._x(x)), dtype=float)

    def div_c(self, x):
        x = self._x(x)
        if self.coeffs.div_c is not None:
            return np.asarray(self.coeffs.div_c(self.t, self.u, x), dtype=float)
        return div_c_numeric(self.derived.c, self.t, self.u, x, self.fd_step)

    def c_diag_faces(self, grid) -> list:
        """Diagonal entries c_dd at the face midpoints of each axis.

        The weighted solvers assume the off-diagonal part of c vanishes in
        2D; a genuinely anisotropic c on a 2D grid is rejected loudly.
        """
        out = []
        for d in range(grid.dim):
            pts = grid.face_points(d)
            cmat = self.c(pts)
            if grid.dim == 2:
                off = np.max(np.abs(cmat[..., 0, 1])) + np.max(np.abs(cmat[..., 1, 0]))
                if off > 1e-12 * (1.0 + np.max(np.abs(cmat))):
                    raise ValueError(
                        "2D solvers support diagonal diffusion c only; "
                        f"off-diagonal magnitude {off:.2e} found")
            out.append(cmat[..., d, d].reshape(grid.face_shape(d)))
        return out


@dataclass
class SamplingLattice:
    """Declared check lattice: where the sampled conditions are evaluated."""

    t_values: tuple = (0.0,)
    u_lo: float = -4.0
    u_hi: float = 4.0
    u_count: int = 9
    x_lo: float = -8.0
    x_hi: float = 8.0
    x_count: int = 33
    shell_radius: float = 8.0
    shell_count: int = 16

    def describe(self) -> dict:
        return {
            "t_values": list(self.t_values),
            "u_box": [self.u_lo, self.u_hi], "u_count": self.u_count,
            "x_box": [self.x_lo, self.x_hi], "x_count": self.x_count,
            "shell_radius": self.shell_radius, "shell_count": self.shell_count,
        }


@dataclass
class ConditionReport:
    """Sampled well-posedness margins; serializes to stable JSON."""

    ellipticity_margin: float
    angle_margin: float | None
    stability_worst: float
    stability_ok: bool
    lipschitz_a: float
    lipschitz_div_c: float
    degenerate_slow_noise: bool
    lattice: dict
    notes: list = field(default_factory=list)

    def to_json(self, indent: int = 2) -> str:
        payload = {
            "ellipticity_margin": self.ellipticity_margin,
            "angle_margin": self.angle_margin,
            "stability_worst": self.stability_worst,
            "stability_ok": self.stability_ok,
            "lipschitz_a": self.lipschitz_a,
            "lipschitz_div_c": self.lipschitz_div_c,
            "degenerate_slow_noise": self.degenerate_slow_noise,
            "lattice": self.lattice,
            "notes": self.notes,
        }
        return json.dumps(payload, indent=indent, sort_keys=True)


def _axis_points(lo, hi, count, dim):
    axes = [np.linspace(lo, hi, count)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _shell_directions(dim, count):
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    ang = 2 * np.pi * np.arange(count) / count
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def check_conditions(coeffs: CoefficientSet,
                     derived: DerivedCoefficients | None = None,
                     lattice: SamplingLattice | None = None) -> ConditionReport:
    """Sample ellipticity, noise-angle, stability and Lipschitz margins.

    Deterministic given the lattice.  When C vanishes on the whole lattice
    the angle margin is reported as None and the degenerate flag is set;
    the rate evaluation then runs its constrained branch.
    """
    derived = derived or derive(coeffs)
    lattice = lattice or SamplingLattice()
    dims = coeffs.dims
    xs = _axis_points(lattice.x_lo, lattice.x_hi, lattice.x_count, dims.l)
    us = _axis_points(lattice.u_lo, lattice.u_hi, lattice.u_count, dims.n)

    ell = np.inf
    ang = np.inf
    c_norm_max = 0.0
    C_norm_max = 0.0
    notes = []
    for t in lattice.t_values:
        for u in us:
            cmat = derived.c(t, u, xs)
            Cmat = derived.C(t, u, xs)
            Gmat = derived.G(t, u, xs)
            ell = min(ell, float(np.min(np.linalg.eigvalsh(cmat))))
            c_norm_max = max(c_norm_max, float(np.max(np.abs(cmat))))
            C_norm_max = max(C_norm_max, float(np.max(np.abs(Cmat))))
            angle = Cmat - Gmat @ np.linalg.solve(cmat, np.swapaxes(Gmat, -1, -2))
            ang = min(ang, float(np.min(np.linalg.eigvalsh(angle))))

    degenerate = C_norm_max < 1e-14
    angle_margin = None if degenerate else ang
    if degenerate:
        notes.append("slow noise C vanishes on the lattice; constrained regime")

    # radial stability of the fast drift on the outer shell
    dirs = _shell_directions(dims.l, lattice.shell_count)
    shell = lattice.shell_radius * dirs
    worst = -np.inf
    for t in lattice.t_values:
        for u in us:
            aval = np.asarray(coeffs.a(t, u, shell), dtype=float)
            radial = np.sum(aval * dirs, axis=-1)
            worst = max(worst, float(np.max(radial)))

    # Lipschitz difference quotients along lattice neighbours
    frozen = FrozenFast(coeffs, derived, lattice.t_values[0], us[len(us) // 2])
    step = (lattice.x_hi - lattice.x_lo) / (lattice.x_count - 1)
    lip_a = 0.0
    lip_dc = 0.0
    for j in range(dims.l):
        e = np.zeros(dims.l)
        e[j] = step
        da = frozen.a(xs + e) - frozen.a(xs)
        ddc = frozen.div_c(xs + e) - frozen.div_c(xs)
        lip_a = max(lip_a, float(np.max(np.linalg.norm(da, axis=-1))) / step)
        lip_dc = max(lip_dc, float(np.max(np.linalg.norm(ddc, axis=-1))) / step)

    return ConditionReport(
        ellipticity_margin=ell,
        angle_margin=angle_margin,
        stability_worst=worst,
        stability_ok=worst < 0.0,
        lipschitz_a=lip_a,
        lipschitz_div_c=lip_dc,
        degenerate_slow_noise=degenerate,
        lattice=lattice.describe(),
        notes=notes,
    )


# ---------------------------------------------------------------------------
# preset catalog


def preset(name: str, **params) -> CoefficientSet:
    """Builtin coefficient sets; see PRESETS for the catalog."""
    try:
        factory = PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown preset {name!r}; available: {known}") from None
    return factory(**params)


def _preset_ou() -> CoefficientSet:
    """n=l=1, k=2.  Slow drift -u + x; fast OU with unit-variance invariant law.

    C = 1, c = 2, G = 0: independent noises, fully coupled drifts.
    """
    dims = Dimensions(1, 1, 2)
    return CoefficientSet(
        dims=dims,
        A=lambda t, u, x: -u + x,
        B=const_field([[1.0, 0.0]]),
        a=lambda t, u, x: -x,
        b=const_field([[0.0, np.sqrt(2.0)]]),
        div_c=const_field([0.0]),
        name="ou", params={}, fast_u_dependent=False)


def _preset_ou_rho(rho: float = 0.5) -> CoefficientSet:
    """n=l=1, k=2 with correlated noises: B=(1,0), b=(rho, sqrt(1-rho^2)).

    C = 1, c = 1, G = rho; the angle margin is 1 - rho^2.
    """
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie in (-1, 1) for an elliptic fast noise")
    dims = Dimensions(1, 1, 2)
    return CoefficientSet(
        dims=dims,
        A=lambda t, u, x: -u + x,
        B=const_field([[1.0, 0.0]]),
        a=lambda t, u, x: -x,
        b=const_field([[rho, np.sqrt(1.0 - rho ** 2)]]),
        div_c=const_field([0.0]),
        name="ou_rho", params={"rho": rho}, fast_u_dependent=False)


def _preset_linear() -> CoefficientSet:
    """Fast variable tracks the slow one: a = -(x - u), invariant N(u, 1).

    The averaged slow drift vanishes, so constant paths cost nothing.
    """
    dims = Dimensions(1, 1, 2)
    return CoefficientSet(
        dims=dims,
        A=lambda t, u, x: -u + x,
        B=const_field([[1.0, 0.0]]),
        a=lambda t, u, x: -(x - u),
        b=const_field([[0.0, np.sqrt(2.0)]]),
        div_c=const_field([0.0]),
        name="linear", params={}, fast_u_dependent=True)


def _preset_coupled() -> CoefficientSet:
    """Like 'linear' but the fast variable tracks u/2: averaged drift -u/2.

    Fixed-point iterations for the zero-cost pair contract visibly here.
    """
    dims = Dimensions(1, 1, 2)
    return CoefficientSet(
        dims=dims,
        A=lambda t, u, x: -u + x,
        B=const_field([[1.0, 0.0]]),
        a=lambda t, u, x: -(x - 0.5 * u),
        b=const_field([[0.0, np.sqrt(2.0)]]),
        div_c=const_field([0.0]),
        name="coupled", params={}, fast_u_dependent=True)


def _preset_decoupled() -> CoefficientSet:
    """Slow OU independent of the fast variable; classical small-noise limit."""
    dims = Dimensions(1, 1, 2)
    return CoefficientSet(
        dims=dims,
        A=lambda t, u, x: -u + 0.0 * x,
        B=const_field([[1.0, 0.0]]),
        a=lambda t, u, x: -x,
        b=const_field([[0.0, np.sqrt(2.0)]]),
        div_c=const_field([0.0]),
        name="decoupled", params={}, fast_u_dependent=False)


def _preset_doublewell() -> CoefficientSet:
    """Bistable fast drift a = x - x^3 with c = 2; slow drift -u + x."""
    dims = Dimensions(1, 1, 2)
    return CoefficientSet(
        dims=dims,
        A=lambda t, u, x: -u + x,
        B=const_field([[1.0, 0.0]]),
        a=lambda t, u, x: x - x ** 3,
        b=const_field([[0.0, np.sqrt(2.0)]]),
        div_c=const_field([0.0]),
        name="doublewell", params={}, fast_u_dependent=False)


def _preset_degenerate() -> CoefficientSet:
    """No slow noise at all (B = 0): the constrained large-deviation regime."""
    dims = Dimensions(1, 1, 2)
    return CoefficientSet(
        dims=dims,
        A=lambda t, u, x: -u + x,
        B=const_field([[0.0, 0.0]]),
        a=lambda t, u, x: -x,
        b=const_field([[0.0, np.sqrt(2.0)]]),
        div_c=const_field([0.0]),
        name="degenerate", params={}, fast_u_dependent=False)


def _preset_ou2d() -> CoefficientSet:
    """l=2 fast OU with c = 2 I and product standard normal invariant law."""
    dims = Dimensions(1, 2, 3)

    def A(t, u, x):
        return -u + x[..., :1]

    return CoefficientSet(
        dims=dims,
        A=A,
        B=const_field([[1.0, 0.0, 0.0]]),
        a=lambda t, u, x: -x,
        b=const_field([[0.0, np.sqrt(2.0), 0.0],
                       [0.0, 0.0, np.sqrt(2.0)]]),
        div_c=const_field([0.0, 0.0]),
        name="ou2d", params={}, fast_u_dependent=False)


PRESETS = {
    "ou": _preset_ou,
    "ou_rho": _preset_ou_rho,
    "linear": _preset_linear,
    "coupled": _preset_coupled,
    "decoupled": _preset_decoupled,
    "doublewell": _preset_doublewell,
    "degenerate": _preset_degenerate,
    "ou2d": _preset_ou2d,
}
