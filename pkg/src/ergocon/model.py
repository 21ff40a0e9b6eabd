"""One-dimensional ergodic diffusion models, their invariant density and generator.

A model is ``dy = S(y) dt + sigma(y) dW`` together with the numbers
``(x_star, M, L, sigma_min, sigma_max)`` describing the function class it is
supposed to belong to.  All callables are vectorised over numpy arrays.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._quad import QuadratureError, gl_points, integrate, panel_integrals
from .testfn import TestFunction

Fn = Callable[[np.ndarray], np.ndarray]

# log of the neglected tail mass allowed when truncating the density domain
_LOG_TAIL = math.log(1e-16)


class ModelEvaluationError(ValueError):
    """A model function returned a non-finite value."""


class DensityError(RuntimeError):
    """Normalisation of the invariant density failed."""


class GeneratorError(ValueError):
    """The generator was applied to a function without two derivatives."""


@dataclass(frozen=True)
class ClassParams:
    x_star: float
    M: float
    L: float
    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        if not self.x_star >= 1:
            raise ValueError(f"x_star must be >= 1, got {self.x_star}")
        if not self.M > 0:
            raise ValueError(f"M must be > 0, got {self.M}")
        if not self.L > 1:
            raise ValueError(f"L must be > 1, got {self.L}")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError(
                f"need 0 < sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )

    @property
    def beta1(self) -> float:
        return 2.0 * self.M / self.sigma_min**2

    @property
    def beta2(self) -> float:
        # read as 1 / (L * sigma_max^2)
        return 1.0 / (self.L * self.sigma_max**2)

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("x_star", "M", "L", "sigma_min", "sigma_max")}


@dataclass(frozen=True)
class DiffusionModel:
    """Drift ``S`` and diffusion ``sigma`` with analytic first/second derivatives.

    ``linear`` is ``(a, b)`` when ``S(y) = a + b*y``; together with a constant
    diffusion (``sigma_const``) it enables exact Gaussian transitions.
    """

    drift: Fn
    drift_deriv: Fn | None
    diffusion: Fn
    diffusion_d1: Fn | None
    diffusion_d2: Fn | None
    class_params: ClassParams
    y0: float = 0.0
    name: str = "custom"
    params: dict = field(default_factory=dict)
    linear: tuple[float, float] | None = None
    sigma_const: float | None = None

    @property
    def is_exact_gaussian(self) -> bool:
        return self.linear is not None and self.sigma_const is not None and self.linear[1] < 0

    def spec_dict(self) -> dict:
        return {
            "name": self.name,
            "params": {k: float(v) for k, v in sorted(self.params.items())},
            "class_params": self.class_params.as_dict(),
            "y0": float(self.y0),
        }

    def spec_hash(self) -> str:
        blob = json.dumps(self.spec_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _const(c):
    return lambda y: np.full(np.shape(y), float(c))


def ou(class_params: ClassParams, theta=1.0, mu=0.0, sigma=1.0, y0=0.0) -> DiffusionModel:
    """Ornstein-Uhlenbeck drift ``S(y) = -theta (y - mu)`` with constant ``sigma``."""
    a, b = theta * mu, -theta
    return DiffusionModel(
        drift=lambda y: a + b * np.asarray(y, dtype=float),
        drift_deriv=_const(b),
        diffusion=_const(sigma),
        diffusion_d1=_const(0.0),
        diffusion_d2=_const(0.0),
        class_params=class_params,
        y0=float(y0),
        name="ou",
        params={"theta": theta, "mu": mu, "sigma": sigma},
        linear=(a, b),
        sigma_const=float(sigma),
    )


def tanh_drift(class_params: ClassParams, a=0.5, b=1.0, sigma=1.0, sigma_amp=0.0, y0=0.0) -> DiffusionModel:
    """``S(y) = a tanh(y) - b y`` and ``sigma(y) = sigma (1 + sigma_amp sin y)``."""

    def drift(y):
        return a * np.tanh(y) - b * np.asarray(y, dtype=float)

    def drift_deriv(y):
        return a / np.cosh(y) ** 2 - b

    if sigma_amp == 0.0:
        diffusion, d1, d2, const = _const(sigma), _const(0.0), _const(0.0), float(sigma)
    else:
        diffusion = lambda y: sigma * (1.0 + sigma_amp * np.sin(y))  # noqa: E731
        d1 = lambda y: sigma * sigma_amp * np.cos(y)  # noqa: E731
        d2 = lambda y: -sigma * sigma_amp * np.sin(y)  # noqa: E731
        const = None
    return DiffusionModel(
        drift=drift,
        drift_deriv=drift_deriv,
        diffusion=diffusion,
        diffusion_d1=d1,
        diffusion_d2=d2,
        class_params=class_params,
        y0=float(y0),
        name="tanh-drift",
        params={"a": a, "b": b, "sigma": sigma, "sigma_amp": sigma_amp},
        sigma_const=const,
    )


def piecewise_linear(
    class_params: ClassParams, slope_in=0.5, slope_out=1.5, knot=1.0, width=0.25, sigma=1.0, y0=0.0
) -> DiffusionModel:
    """Odd drift with slope ``-slope_in`` inside ``knot`` and ``-slope_out`` outside.

    The slope changes linearly over ``[knot - width, knot + width]`` so the drift
    is C^1.
    """
    if not 0 < width < knot:
        raise ValueError("need 0 < width < knot")
    lo, hi = knot - width, knot + width
    jump = slope_in - slope_out

    def ramp_integral(u):
        return np.where(u <= lo, 0.0, np.where(u >= hi, u - knot, (u - lo) ** 2 / (4 * width)))

    def drift(y):
        y = np.asarray(y, dtype=float)
        u = np.abs(y)
        return np.sign(y) * (-slope_in * u + jump * ramp_integral(u))

    def drift_deriv(y):
        u = np.abs(np.asarray(y, dtype=float))
        ramp = np.clip((u - lo) / (hi - lo), 0.0, 1.0)
        return -slope_in + jump * ramp

    return DiffusionModel(
        drift=drift,
        drift_deriv=drift_deriv,
        diffusion=_const(sigma),
        diffusion_d1=_const(0.0),
        diffusion_d2=_const(0.0),
        class_params=class_params,
        y0=float(y0),
        name="piecewise-linear",
        params={"slope_in": slope_in, "slope_out": slope_out, "knot": knot, "width": width, "sigma": sigma},
        sigma_const=float(sigma),
    )


BUILTIN_MODELS = {"ou": ou, "tanh-drift": tanh_drift, "piecewise-linear": piecewise_linear}


def build_model(name: str, class_params: ClassParams, params: dict | None = None, y0: float = 0.0) -> DiffusionModel:
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    return factory(class_params, y0=y0, **(params or {}))


# ----------------------------------------------------------------------------
# class membership


@dataclass(frozen=True)
class Violation:
    condition: str
    locations: np.ndarray

    @property
    def count(self) -> int:
        return int(self.locations.size)

    def __str__(self):
        x = self.locations
        return f"{self.condition}: {x.size} points in [{x.min():.4g}, {x.max():.4g}]"


@dataclass(frozen=True)
class MembershipReport:
    violations: list[Violation]
    grid_half_width: float
    grid_step: float
    strict: bool

    @property
    def ok(self) -> bool:
        return not self.violations

    def conditions(self) -> list[str]:
        return [v.condition for v in self.violations]


def _central_diff(f, x, step=1e-5):
    return (f(x + step) - f(x - step)) / (2 * step)


def default_grid_half_width(params: ClassParams) -> float:
    return params.x_star + 10.0 * params.L


def check_class_membership(model: DiffusionModel, grid_half_width=None, grid_step=1e-3, strict=False) -> MembershipReport:
    """Check the class conditions on a uniform grid (a sampling check, not a proof).

    The lower bounds ``|sigma'|, |sigma''| >= sigma_min`` exclude constant
    diffusions, so they are only checked with ``strict=True``.
    """
    p = model.class_params
    if grid_half_width is None:
        grid_half_width = default_grid_half_width(p)
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    if grid_half_width < p.x_star + 1:
        raise ValueError("grid_half_width must be at least x_star + 1")

    n = int(round(grid_half_width / grid_step))
    x = np.arange(-n, n + 1) * grid_step
    S = np.asarray(model.drift(x), dtype=float)
    dS = np.asarray(model.drift_deriv(x) if model.drift_deriv else _central_diff(model.drift, x), dtype=float)
    sig = np.abs(np.asarray(model.diffusion(x), dtype=float))
    evaluated = [("drift", S), ("drift derivative", dS), ("diffusion", sig)]
    if strict:
        d1 = model.diffusion_d1(x) if model.diffusion_d1 else _central_diff(model.diffusion, x)
        d2 = model.diffusion_d2(x) if model.diffusion_d2 else _central_diff(lambda z: _central_diff(model.diffusion, z), x)
        d1, d2 = np.abs(np.asarray(d1, dtype=float)), np.abs(np.asarray(d2, dtype=float))
        evaluated += [("diffusion first derivative", d1), ("diffusion second derivative", d2)]
    for what, vals in evaluated:
        bad = ~np.isfinite(vals)
        if bad.any():
            raise ModelEvaluationError(f"model evaluation failure: {what} is not finite at x={x[bad][0]:.6g}")

    # tiny slack absorbs rounding in the analytic derivatives
    eps = 1e-12
    inner = np.abs(x) <= p.x_star
    outer = np.abs(x) >= p.x_star
    checks = [
        ("|S|+|S'| <= M on |x|<=x_star", inner & (np.abs(S) + np.abs(dS) > p.M + eps)),
        ("S' >= -L on |x|>=x_star", outer & (dS < -p.L - eps)),
        ("S' <= -1/L on |x|>=x_star", outer & (dS > -1.0 / p.L + eps)),
        ("|sigma| >= sigma_min", sig < p.sigma_min - eps),
        ("|sigma| <= sigma_max", sig > p.sigma_max + eps),
    ]
    if strict:
        checks += [
            ("|sigma'| >= sigma_min", d1 < p.sigma_min - eps),
            ("|sigma'| <= sigma_max", d1 > p.sigma_max + eps),
            ("|sigma''| >= sigma_min", d2 < p.sigma_min - eps),
            ("|sigma''| <= sigma_max", d2 > p.sigma_max + eps),
        ]
    violations = [Violation(name, x[mask]) for name, mask in checks if mask.any()]
    return MembershipReport(violations, float(grid_half_width), float(grid_step), bool(strict))


# ----------------------------------------------------------------------------
# invariant density


def truncation_radius(params: ClassParams, log_tail=_LOG_TAIL) -> float:
    """Largest root of ``beta1 u - beta2 (u - x_star)^2 = log_tail``."""
    b1, b2, xs = params.beta1, params.beta2, params.x_star
    # beta2 u^2 - (2 beta2 xs + beta1) u + beta2 xs^2 + log_tail = 0
    B = 2 * b2 * xs + b1
    C = b2 * xs * xs + log_tail
    return (B + math.sqrt(B * B - 4 * b2 * C)) / (2 * b2)


class InvariantDensity:
    """Tabulated ``S~(x) = 2∫_0^x S/sigma^2`` and the normalised stationary density.

    ``S~`` is stored at uniform nodes on ``[-R, R]`` (0 is a node); between nodes
    it is completed by a Gauss-Legendre integral, so evaluation is accurate to
    quadrature precision anywhere in the domain.  The density is zero outside
    ``[-truncation_radius, truncation_radius]``.
    """

    def __init__(self, model: DiffusionModel, truncation_radius: float, cell_width: float):
        self.model = model
        n = int(math.ceil(truncation_radius / cell_width))
        self.cell_width = float(cell_width)
        self.truncation_radius = n * self.cell_width
        self.nodes = np.arange(-n, n + 1) * self.cell_width
        self._n = n
        cell = panel_integrals(self._two_s1, self.nodes)
        right = np.concatenate([[0.0], np.cumsum(cell[n:])])
        left = -np.cumsum(cell[:n][::-1])[::-1]
        self.tilde_S_nodes = np.concatenate([left, right])
        self.log_normalizer = self._log_norm()

    def s1(self, y):
        """``S(y) / sigma(y)^2``."""
        return self.model.drift(y) / self.model.diffusion(y) ** 2

    def _two_s1(self, y):
        return 2.0 * self.s1(y)

    @property
    def normalizer(self) -> float:
        """``∫ sigma^-2 exp(S~)``; +inf if it overflows (use ``log_normalizer``)."""
        try:
            return math.exp(self.log_normalizer)
        except OverflowError:
            return math.inf

    def _cell_index(self, x):
        k = np.floor(x / self.cell_width).astype(np.int64) + self._n
        return np.clip(k, 0, 2 * self._n - 1)

    def tilde_S(self, x):
        x = np.asarray(x, dtype=float)
        k = self._cell_index(x)
        base = self.nodes[k]
        pts, wts = gl_points(base, x)
        return self.tilde_S_nodes[k] + np.sum(self._two_s1(pts) * wts, axis=-1)

    def log_unnormalized(self, x):
        x = np.asarray(x, dtype=float)
        return self.tilde_S(x) - 2.0 * np.log(np.abs(self.model.diffusion(x)))

    def _log_norm(self):
        pts, wts = gl_points(self.nodes[:-1], self.nodes[1:])
        logs = self.log_unnormalized(pts)
        m = float(np.max(logs))
        total = float(np.sum(np.exp(logs - m) * wts))
        if not (total > 0 and math.isfinite(total)):
            raise DensityError("density normalization failed: non-positive or non-finite mass")
        return m + math.log(total)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        inside = np.abs(x) <= self.truncation_radius
        out = np.zeros(np.shape(x))
        if np.any(inside):
            out[inside] = np.exp(self.log_unnormalized(x[inside]) - self.log_normalizer)
        return out

    def total_mass(self) -> float:
        pts, wts = gl_points(self.nodes[:-1], self.nodes[1:])
        return float(np.sum(self(pts) * wts))

    def sup(self) -> float:
        """Grid maximum of the density (refined around the best node)."""
        i = int(np.argmax(self(self.nodes)))
        lo = self.nodes[max(i - 1, 0)]
        hi = self.nodes[min(i + 1, len(self.nodes) - 1)]
        return float(np.max(self(np.linspace(lo, hi, 2001))))


def invariant_density(model: DiffusionModel, quad_tolerance=1e-10, cell_width=None, max_refinements=8) -> InvariantDensity:
    """Normalised stationary density of ``model``.

    The domain half-width comes from the class bound on ``S~``; the node spacing
    is halved until the log-normaliser changes by less than ``quad_tolerance``.
    Pass ``cell_width`` to fix the spacing (no refinement).
    """
    R = truncation_radius(model.class_params)
    if cell_width is not None:
        return InvariantDensity(model, R, cell_width)
    width = 0.1
    dens = InvariantDensity(model, R, width)
    for _ in range(max_refinements):
        width /= 2
        finer = InvariantDensity(model, R, width)
        if abs(finer.log_normalizer - dens.log_normalizer) < quad_tolerance:
            return finer
        dens = finer
    raise DensityError(
        f"density normalization failed: log-normaliser still moving after {max_refinements} refinements"
    )


def pi(density: InvariantDensity, phi: TestFunction, atol=1e-13) -> float:
    """Stationary mean ``∫ phi q`` over the support of ``phi`` within the density domain."""
    if phi.l1_norm is not None and not math.isfinite(phi.l1_norm):
        raise ValueError("pi requires an integrable test function")
    lo, hi = phi.support_interval
    R = density.truncation_radius
    lo, hi = max(lo, -R), min(hi, R)
    if not hi > lo:
        return 0.0
    n0 = max(8, int(math.ceil((hi - lo) / 0.1)))
    try:
        return integrate(lambda y: phi.value(y) * density(y), lo, hi, breakpoints=phi.breakpoints,
                         atol=atol, rtol=1e-13, initial_panels=n0)
    except QuadratureError as exc:
        raise DensityError(f"quadrature failure in pi: {exc}") from exc


def generator_apply(model: DiffusionModel, phi: TestFunction) -> TestFunction:
    """``y -> S(y) phi'(y) + sigma(y)^2 phi''(y) / 2`` (values only)."""
    if phi.d1 is None or phi.d2 is None:
        raise GeneratorError("generator requires C2 test function")
    d1, d2 = phi.d1, phi.d2

    def value(y):
        y = np.asarray(y, dtype=float)
        return model.drift(y) * d1(y) + 0.5 * model.diffusion(y) ** 2 * d2(y)

    return TestFunction(
        value=value,
        center=phi.center,
        support_radius=phi.support_radius,
        breakpoints=phi.breakpoints,
        name=f"L[{phi.name}]",
    )
