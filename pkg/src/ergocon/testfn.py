"""Test functions: kernels, indicators, smoothed indicators, and their norms."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial

from ._quad import abs_integral, gl_points, integrate, refined_sup

Fn = Callable[[np.ndarray], np.ndarray]


class NormError(ValueError):
    """A norm could not be certified (e.g. unbounded support with no tail radius)."""


class KernelSupportError(ValueError):
    pass


@dataclass(frozen=True)
class TestFunction:
    """A function ``phi`` with optional derivatives, support data and cached norms.

    The support is ``[center - support_radius, center + support_radius]``;
    ``breakpoints`` lists points where ``phi`` or its derivatives are not smooth
    (used as quadrature panel edges).  ``tail_radius`` may be set for functions
    with unbounded support whose values are negligible beyond it.
    """

    __test__ = False  # not a pytest class

    value: Fn
    d1: Fn | None = None
    d2: Fn | None = None
    center: float = 0.0
    support_radius: float = math.inf
    breakpoints: tuple = ()
    l1_norm: float | None = None
    sup_norm: float | None = None
    d1_sup_norm: float | None = None
    name: str = "phi"
    tail_radius: float | None = None
    poly: Polynomial | None = field(default=None, compare=False)

    def __call__(self, y):
        return self.value(np.asarray(y, dtype=float))

    @property
    def support_interval(self) -> tuple[float, float]:
        return self.center - self.support_radius, self.center + self.support_radius

    @property
    def is_c2(self) -> bool:
        return self.d1 is not None and self.d2 is not None

    def scaled(self, a: float) -> "TestFunction":
        """``a * phi`` with derivatives and cached norms scaled accordingly."""
        a = float(a)
        mul = lambda f: (None if f is None else (lambda y: a * f(y)))  # noqa: E731
        scale = lambda v: None if v is None else abs(a) * v  # noqa: E731
        return replace(
            self,
            value=mul(self.value),
            d1=mul(self.d1),
            d2=mul(self.d2),
            l1_norm=scale(self.l1_norm),
            sup_norm=scale(self.sup_norm),
            d1_sup_norm=scale(self.d1_sup_norm),
            poly=None if self.poly is None else a * self.poly,
            name=f"{a:g}*{self.name}",
        )


def _norm_interval(phi: TestFunction) -> tuple[float, float]:
    if math.isfinite(phi.support_radius):
        return phi.support_interval
    if phi.tail_radius is not None:
        return phi.center - phi.tail_radius, phi.center + phi.tail_radius
    raise NormError(f"cannot certify L1 norm of {phi.name}: unbounded support and no tail radius")


def norms(phi: TestFunction) -> TestFunction:
    """Return ``phi`` with ``l1_norm``, ``sup_norm`` and ``d1_sup_norm`` filled in."""
    lo, hi = _norm_interval(phi)
    if hi <= lo:
        return replace(phi, l1_norm=0.0, sup_norm=0.0, d1_sup_norm=0.0 if phi.d1 else None)
    l1 = abs_integral(phi.value, lo, hi, breakpoints=phi.breakpoints, atol=0.0)
    sup = refined_sup(phi.value, lo, hi)
    d1 = refined_sup(phi.d1, lo, hi) if phi.d1 is not None else None
    return replace(phi, l1_norm=l1, sup_norm=sup, d1_sup_norm=d1)


def zero_function() -> TestFunction:
    z = lambda y: np.zeros(np.shape(y))  # noqa: E731
    return TestFunction(z, z, z, support_radius=0.0, l1_norm=0.0, sup_norm=0.0, d1_sup_norm=0.0, name="zero")


def constant_function(c: float) -> TestFunction:
    """Constant ``c`` (unbounded support; only for deviation statistics)."""
    return TestFunction(
        value=lambda y: np.full(np.shape(y), float(c)),
        d1=lambda y: np.zeros(np.shape(y)),
        d2=lambda y: np.zeros(np.shape(y)),
        sup_norm=abs(float(c)),
        d1_sup_norm=0.0,
        name=f"const({c:g})",
    )


def _piecewise_poly(poly: Polynomial, radius: float, name: str) -> TestFunction:
    """``poly`` on ``[-radius, radius]`` and zero outside."""
    dp, ddp = poly.deriv(), poly.deriv(2)

    def masked(p):
        def f(y):
            y = np.asarray(y, dtype=float)
            return np.where(np.abs(y) <= radius, p(y), 0.0)

        return f

    return TestFunction(
        value=masked(poly),
        d1=masked(dp),
        d2=masked(ddp),
        support_radius=radius,
        breakpoints=(-radius, radius),
        name=name,
        poly=poly,
    )


@functools.cache  # immutable; norms are costly
def bump3() -> TestFunction:
    """Default kernel ``(35/64) (1 - (y/2)^2)^3`` on ``[-2, 2]``; C^2, integrates to 1."""
    u2 = Polynomial([1.0, 0.0, -0.25])
    return norms(_piecewise_poly(35.0 / 64.0 * u2**3, 2.0, "bump3"))


@functools.cache
def biweight_mollifier() -> TestFunction:
    """``(15/16)(1 - y^2)^2`` on ``[-1, 1]`` (C^1 at the ends)."""
    return norms(_piecewise_poly(15.0 / 16.0 * Polynomial([1.0, 0.0, -1.0]) ** 2, 1.0, "biweight"))


@functools.cache
def triweight_mollifier() -> TestFunction:
    """``(35/32)(1 - y^2)^3`` on ``[-1, 1]`` (C^2; the strict-mode mollifier)."""
    return norms(_piecewise_poly(35.0 / 32.0 * Polynomial([1.0, 0.0, -1.0]) ** 3, 1.0, "triweight"))


def epanechnikov_smoothed(mollifier: TestFunction | None = None) -> TestFunction:
    """Epanechnikov kernel on ``[-1, 1]`` convolved with a unit-width mollifier.

    The result lives on ``[-2, 2]``, integrates to 1 and is C^2 whenever the
    mollifier is C^1.  Both factors are polynomials on the overlap, so the
    convolution integrals are computed exactly with Gauss-Legendre nodes.
    """
    V = mollifier or biweight_mollifier()
    if V.poly is None:
        raise ValueError("epanechnikov_smoothed needs a polynomial mollifier")
    epa = Polynomial([0.75, 0.0, -0.75])
    pv = [V.poly, V.poly.deriv(), V.poly.deriv(2)]

    def conv(order):
        def f(u):
            u = np.asarray(u, dtype=float)
            lo = np.maximum(-1.0, u - 1.0)
            hi = np.minimum(1.0, u + 1.0)
            ok = hi > lo
            # integrand degree <= 2 + 6; split in two halves so 5-point GL stays exact
            mid = 0.5 * (lo + hi)
            out = np.zeros(np.shape(u))
            for a, b in ((lo, mid), (mid, hi)):
                pts, wts = gl_points(np.where(ok, a, 0.0), np.where(ok, b, 0.0))
                out += np.sum(epa(pts) * pv[order](u[..., None] - pts) * wts, axis=-1)
            return np.where(ok, out, 0.0)

        return f

    return norms(
        TestFunction(
            value=conv(0), d1=conv(1), d2=conv(2), support_radius=2.0,
            breakpoints=(-2.0, -1.0, 0.0, 1.0, 2.0), name="epanechnikov-smoothed",
        )
    )


def kernel_from_table(y, values) -> TestFunction:
    """Tabulated kernel interpolated by a C^2 cubic spline (an approximation).

    ``y`` must cover ``[-2, 2]``; values outside the table are zero.
    """
    from scipy.interpolate import CubicSpline

    y = np.asarray(y, dtype=float)
    values = np.asarray(values, dtype=float)
    order = np.argsort(y)
    y, values = y[order], values[order]
    if y[0] < -2 - 1e-12 or y[-1] > 2 + 1e-12:
        raise KernelSupportError("tabulated kernel extends beyond [-2, 2]")
    spline = CubicSpline(y, values, bc_type="clamped")
    lo, hi = y[0], y[-1]

    def masked(f):
        def g(u):
            u = np.asarray(u, dtype=float)
            return np.where((u >= lo) & (u <= hi), f(np.clip(u, lo, hi)), 0.0)

        return g

    radius = max(abs(lo), abs(hi))
    return norms(
        TestFunction(
            value=masked(spline), d1=masked(spline.derivative(1)), d2=masked(spline.derivative(2)),
            support_radius=radius, breakpoints=tuple(y), name="tabulated",
        )
    )


def kernel_from_csv(path) -> TestFunction:
    data = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    return kernel_from_table(data[:, 0], data[:, 1])


KERNELS = {"bump3": bump3, "epanechnikov-smoothed": epanechnikov_smoothed}


@dataclass(frozen=True)
class KernelSpec:
    """Mother kernel ``psi`` (vanishing for ``|y| >= 2``), bandwidth ``h`` and point ``x0``."""

    psi: TestFunction
    h: float
    x0: float = 0.0

    def __post_init__(self):
        if not 0 < self.h < 1:
            raise ValueError(f"bandwidth out of range (need 0 < h < 1), got {self.h}")
        if self.psi.support_radius > 2.0 or self.psi.center != 0.0:
            raise KernelSupportError("mother kernel must vanish outside [-2, 2]")


def make_kernel_fn(spec: KernelSpec) -> TestFunction:
    """``psi_{h,x0}(y) = psi((y - x0)/h) / h`` with chain-rule derivatives."""
    psi, h, x0 = spec.psi, spec.h, spec.x0
    if psi.l1_norm is None or psi.sup_norm is None or (psi.d1 is not None and psi.d1_sup_norm is None):
        psi = norms(psi)

    def value(y):
        return psi.value((np.asarray(y, dtype=float) - x0) / h) / h

    d1 = None if psi.d1 is None else (lambda y: psi.d1((np.asarray(y, dtype=float) - x0) / h) / h**2)
    d2 = None if psi.d2 is None else (lambda y: psi.d2((np.asarray(y, dtype=float) - x0) / h) / h**3)
    return TestFunction(
        value=value,
        d1=d1,
        d2=d2,
        center=x0,
        support_radius=h * psi.support_radius,
        breakpoints=tuple(x0 + h * b for b in psi.breakpoints),
        l1_norm=psi.l1_norm,
        sup_norm=psi.sup_norm / h,
        d1_sup_norm=None if psi.d1_sup_norm is None else psi.d1_sup_norm / h**2,
        name=f"{psi.name}[h={h:g},x0={x0:g}]",
    )


def make_indicator_fn(h: float, x0: float = 0.0) -> TestFunction:
    """``chi_{h,x0}(y) = 1{|y - x0| <= h} / h``; not differentiable."""
    if not h > 0:
        raise ValueError("h must be positive")

    def value(y):
        return np.where(np.abs(np.asarray(y, dtype=float) - x0) <= h, 1.0 / h, 0.0)

    return TestFunction(
        value=value, center=x0, support_radius=h, breakpoints=(x0 - h, x0 + h),
        l1_norm=2.0, sup_norm=1.0 / h, name=f"chi[h={h:g},x0={x0:g}]",
    )


def _mollifier_cdf(V: TestFunction):
    """``W(s) = ∫_{-1}^{s} V`` clamped to 0 / 1 outside ``[-1, 1]``."""
    if V.poly is not None:
        W = V.poly.integ(lbnd=-1.0)

        def cdf(s):
            s = np.clip(np.asarray(s, dtype=float), -1.0, 1.0)
            return W(s)

        return cdf

    edges = np.linspace(-1.0, 1.0, 4097)
    pts, wts = gl_points(edges[:-1], edges[1:])
    cum = np.concatenate([[0.0], np.cumsum(np.sum(V.value(pts) * wts, axis=-1))])

    def cdf(s):
        s = np.clip(np.asarray(s, dtype=float), -1.0, 1.0)
        k = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, len(edges) - 2)
        p, w = gl_points(edges[k], s)
        return cum[k] + np.sum(V.value(p) * w, axis=-1)

    return cdf


def make_smoothed_indicator(eta: float, side: str = "outer", mollifier: TestFunction | None = None) -> TestFunction:
    """Indicator of ``[-a, a]`` mollified at scale ``eta``; ``a = 1 - eta`` (inner) or ``1 + eta`` (outer).

    ``Psi(u) = W((u + a)/eta) - W((u - a)/eta)`` where ``W`` is the mollifier CDF,
    so values and both derivatives are closed-form for polynomial mollifiers.
    The inner version lies below ``1{|u| <= 1}`` and the outer above it.
    """
    if not 0 < eta <= 0.5:
        raise ValueError(f"smoothing parameter out of range (need 0 < eta <= 1/2), got {eta}")
    if side not in ("inner", "outer"):
        raise ValueError("side must be 'inner' or 'outer'")
    V = mollifier or biweight_mollifier()
    _check_mollifier(V)
    a = 1.0 - eta if side == "inner" else 1.0 + eta
    W = _mollifier_cdf(V)
    dV = V.d1

    def value(u):
        u = np.asarray(u, dtype=float)
        return W((u + a) / eta) - W((u - a) / eta)

    def d1(u):
        u = np.asarray(u, dtype=float)
        return (V.value((u + a) / eta) - V.value((u - a) / eta)) / eta

    def d2(u):
        u = np.asarray(u, dtype=float)
        return (dV((u + a) / eta) - dV((u - a) / eta)) / eta**2

    r = a + eta
    return norms(
        TestFunction(
            value=value, d1=d1, d2=d2 if dV is not None else None, support_radius=r,
            breakpoints=tuple(sorted({-r, -a + eta, a - eta, r})),
            name=f"smoothed-{side}[eta={eta:g}]",
        )
    )


def _check_mollifier(V: TestFunction):
    if V.support_radius > 1.0 + 1e-12 or V.center != 0.0:
        raise ValueError("mollifier must be supported on [-1, 1]")
    grid = np.linspace(-1, 1, 2001)
    if np.max(np.abs(V.value(grid) - V.value(-grid))) > 1e-12:
        raise ValueError("mollifier must be even")
    mass = integrate(V.value, -1.0, 1.0, atol=1e-13)
    if abs(mass - 1.0) > 1e-9:
        raise ValueError(f"mollifier must integrate to 1, got {mass}")


# ----------------------------------------------------------------------------
# K_nu membership


@dataclass(frozen=True)
class MembershipLine:
    name: str
    value: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.value <= self.bound


@dataclass(frozen=True)
class KNuReport:
    lines: list[MembershipLine]

    @property
    def member(self) -> bool:
        return all(line.ok for line in self.lines)

    def failed(self) -> list[str]:
        return [line.name for line in self.lines if not line.ok]


def k_nu_membership(phi: TestFunction, model, nu, density=None) -> KNuReport:
    """Check ``phi`` against the five ``nu`` bounds for one witness ``model``.

    The generator bounds are evaluated for the supplied model only, not as a
    supremum over the whole class.
    """
    from .model import generator_apply, invariant_density, pi

    if phi.l1_norm is None or phi.sup_norm is None or phi.d1_sup_norm is None:
        phi = norms(phi)
    Lphi = generator_apply(model, phi)
    lo, hi = _norm_interval(phi)
    mu = refined_sup(Lphi.value, lo, hi, n=2**14, tol=1e-8) if hi > lo else 0.0
    density = density or invariant_density(model)
    mu_tilde = abs(pi(density, Lphi)) if hi > lo else 0.0
    return KNuReport(
        [
            MembershipLine("nu0: |phi|_1", phi.l1_norm, nu.nu0),
            MembershipLine("nu1: ||phi||_*", phi.sup_norm, nu.nu1),
            MembershipLine("nu2: ||phi'||_*", phi.d1_sup_norm, nu.nu2),
            MembershipLine("nu3: ||L phi||_*", mu, nu.nu3),
            MembershipLine("nu4: |pi(L phi)|", mu_tilde, nu.nu4),
        ]
    )


def tanh_function() -> TestFunction:
    """``tanh``: bounded by 1, the default probe for ergodicity calibration."""
    return TestFunction(
        value=np.tanh,
        d1=lambda y: 1.0 / np.cosh(y) ** 2,
        d2=lambda y: -2.0 * np.tanh(y) / np.cosh(y) ** 2,
        sup_norm=1.0,
        d1_sup_norm=1.0,
        name="tanh",
    )
