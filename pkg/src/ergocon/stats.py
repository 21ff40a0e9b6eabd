"""Deviation statistics, the drift estimator and numerical checks of the analytic building blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import stats as sps

from ._quad import gl_points
from .constants import compute_basic, compute_r_kappa0
from .model import DiffusionModel, InvariantDensity, invariant_density
from .rng import derive_seed, standard_normals
from .sde import ObservationScheme, PathSample, run_ensemble
from .testfn import KernelSpec, TestFunction, make_kernel_fn, norms


class EstimatorError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


# deviations


@dataclass(frozen=True)
class DeviationStat:
    """``value`` is the raw statistic; ``normalization`` names its natural scale."""

    value: float
    normalization: str
    phi_id: str
    scheme: ObservationScheme

    @property
    def scaled(self) -> float:
        if self.normalization == "per-sqrtN":
            return self.value / math.sqrt(self.scheme.N)
        if self.normalization == "per-T":
            return self.value / self.scheme.T
        return self.value


def deviation_discrete_values(observations, phi, pi_phi: float, delta: float) -> np.ndarray:
    """``sum_k (phi(y_k) - pi_phi) * delta`` along the last axis."""
    obs = np.asarray(observations, dtype=float)
    return np.sum(phi(obs) - pi_phi, axis=-1) * delta


def deviation_discrete(path: PathSample, phi: TestFunction, pi_phi: float, normalization="per-sqrtN") -> DeviationStat:
    """Riemann-sum deviation ``D_T`` of ``phi`` from its stationary mean."""
    v = float(deviation_discrete_values(path.observations, phi, pi_phi, path.scheme.delta))
    return DeviationStat(v, normalization, phi.name, path.scheme)


def trapezoid_integral(values, dt: float) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return (np.sum(values, axis=-1) - 0.5 * (values[..., 0] + values[..., -1])) * dt


def deviation_continuous(path: PathSample, phi: TestFunction, pi_phi: float, stride: int = 1) -> DeviationStat:
    """Trapezoid approximation of ``T^{-1/2} ∫ (phi(y_t) - pi_phi) dt`` on the fine grid.

    The integral runs to ``t_N``; its bias shrinks as the fine grid is refined.
    ``stride`` keeps every ``stride``-th fine point (refinement studies).
    """
    if path.fine_grid is None:
        raise ValueError("continuous deviation requires fine grid")
    y = path.fine_grid.values[::stride]
    dt = path.scheme.dt * stride
    val = float(trapezoid_integral(phi(y) - pi_phi, dt)) / math.sqrt(path.scheme.T)
    return DeviationStat(val, "per-sqrtT", phi.name, path.scheme)


# drift estimator


@dataclass(frozen=True)
class DriftEstimate:
    estimate: float
    denominator: float
    numerator: float


def drift_estimator_values(observations, y0, kernel: TestFunction, delta: float, anchor: str = "right"):
    """Vectorised kernel estimator over the last axis; returns ``(numerator, denominator)``.

    ``anchor="right"`` weights ``Δy_k`` by ``psi(y_{t_k})``; ``"left"`` uses
    ``psi(y_{t_{k-1}})`` (with ``y_{t_0} = y0``).
    """
    obs = np.asarray(observations, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    prev = np.concatenate([y0[..., None] * np.ones(obs.shape[:-1] + (1,)), obs[..., :-1]], axis=-1)
    dy = obs - prev
    if anchor == "right":
        w = kernel(obs)
    elif anchor == "left":
        w = kernel(prev)
    else:
        raise ValueError(f"unknown anchor {anchor!r}")
    return np.sum(w * dy, axis=-1), np.sum(w, axis=-1) * delta


def drift_estimator(path: PathSample, spec: KernelSpec, anchor: str = "right") -> DriftEstimate:
    """Kernel estimate of ``S(x0)`` from the observations of one path."""
    if path.scheme.N < 2:
        raise ValueError("drift estimator needs N >= 2")
    kernel = make_kernel_fn(spec)
    num, den = drift_estimator_values(path.observations, path.y0, kernel, path.scheme.delta, anchor)
    num, den = float(num), float(den)
    if den == 0.0:
        raise EstimatorError("no mass near x0")
    return DriftEstimate(num / den, den, num)


# Poisson equation


@dataclass
class PoissonSolution:
    """Bounded solution ``v`` of ``v' + 2 S_1 v = 2 (phi - pi(phi)) / sigma^2`` and ``V = ∫_0 v``."""

    density: InvariantDensity
    phi: TestFunction
    pi_phi: float
    r_bound: float
    edges: np.ndarray
    peak: float
    _I: np.ndarray  # right-sided cell recursions
    _J: np.ndarray  # left-sided
    _V_nodes: np.ndarray
    _zero_index: int

    def _g(self, y):
        m = self.density.model
        return (self.phi(y) - self.pi_phi) / m.diffusion(y) ** 2

    def _cell(self, u):
        k = np.searchsorted(self.edges, u, side="right") - 1
        return np.clip(k, 0, len(self.edges) - 2)

    def v(self, u):
        u = np.asarray(u, dtype=float)
        flat = np.atleast_1d(u).ravel()
        k = self._cell(flat)
        tS = self.density.tilde_S
        su = tS(flat)
        out = np.empty_like(flat)
        right = flat >= self.peak
        if np.any(right):
            uu, kk, s = flat[right], k[right], su[right]
            hi = self.edges[kk + 1]
            pts, wts = gl_points(uu, hi)
            part = np.sum(self._g(pts) * np.exp(tS(pts) - s[:, None]) * wts, axis=-1)
            out[right] = -2.0 * (part + np.exp(tS(hi) - s) * self._I[kk + 1])
        left = ~right
        if np.any(left):
            uu, kk, s = flat[left], k[left], su[left]
            lo = self.edges[kk]
            pts, wts = gl_points(lo, uu)
            part = np.sum(self._g(pts) * np.exp(tS(pts) - s[:, None]) * wts, axis=-1)
            out[left] = 2.0 * (part + np.exp(tS(lo) - s) * self._J[kk])
        return out.reshape(np.shape(u))

    __call__ = v

    def V(self, y):
        y = np.asarray(y, dtype=float)
        flat = np.atleast_1d(y).ravel()
        k = self._cell(flat)
        pts, wts = gl_points(self.edges[k], flat)
        vals = self.v(pts.ravel()).reshape(pts.shape)
        out = self._V_nodes[k] - self._V_nodes[self._zero_index] + np.sum(vals * wts, axis=-1)
        return out.reshape(np.shape(y))

    def residual(self, u, step: float = 1e-5) -> np.ndarray:
        """Finite-difference residual of the first-order ODE at ``u``."""
        u = np.asarray(u, dtype=float)
        dv = (self.v(u + step) - self.v(u - step)) / (2 * step)
        return np.abs(dv + 2.0 * self.density.s1(u) * self.v(u) - 2.0 * self._g(u))

    def eval_grid(self, n: int = 1000, margin: float = 3.0) -> np.ndarray:
        lo, hi = self.phi.support_interval
        R = self.density.truncation_radius
        lo = max(lo - margin, -R + 1)
        hi = min(hi + margin, R - 1)
        return np.linspace(lo, hi, n)

    def sup_abs(self, grid=None) -> float:
        grid = self.eval_grid() if grid is None else grid
        return float(np.max(np.abs(self.v(grid))))


def poisson_solution(model: DiffusionModel, density: InvariantDensity | None, phi: TestFunction,
                     r_bound: float | None = None, pi_phi: float | None = None, cell_width: float = 0.01) -> PoissonSolution:
    """Solve the Poisson equation for a compactly supported ``phi``.

    ``v`` is the right-sided integral for ``u`` at or beyond the mode of ``S~``
    and the equivalent left-sided integral below it, so the exponential
    weights never exceed one near the tails.  Both sides are tabulated by a
    cell recursion on a uniform grid (plus ``phi`` breakpoints) spanning the
    density domain, where the neglected tail is below ``1e-16`` relative.
    ``pi_phi`` defaults to the same-grid quadrature, making the two sides agree.
    """
    density = invariant_density(model) if density is None else density
    if not math.isfinite(phi.support_radius):
        raise ValueError("poisson_solution requires compactly supported phi")
    R = density.truncation_radius
    n = int(math.ceil(2 * R / cell_width))
    edges = np.linspace(-R, R, n + 1)
    extra = [b for b in phi.breakpoints if -R < b < R]
    edges = np.union1d(edges, extra)
    pts, wts = gl_points(edges[:-1], edges[1:])
    tS = density.tilde_S
    s_nodes = tS(edges)
    s_pts = tS(pts)
    sig2 = model.diffusion(pts) ** 2
    if pi_phi is None:
        smax = float(np.max(s_pts))
        w = np.exp(s_pts - smax) / sig2 * wts
        pi_phi = float(np.sum(phi(pts) * w) / np.sum(w))
    g = (phi(pts) - pi_phi) / sig2
    # each recursion only runs on its own side of the mode, where the factors stay <= 1
    ipeak = int(np.argmax(s_nodes))
    peak = float(edges[ipeak])
    ncell = len(edges) - 1
    lo_r, hi_l = max(ipeak - 1, 0), min(ipeak + 1, ncell)
    c_right = np.zeros(ncell)
    c_left = np.zeros(ncell)
    c_right[lo_r:] = np.sum(g[lo_r:] * np.exp(s_pts[lo_r:] - s_nodes[lo_r:-1, None]) * wts[lo_r:], axis=-1)
    c_left[:hi_l] = np.sum(g[:hi_l] * np.exp(s_pts[:hi_l] - s_nodes[1 : hi_l + 1, None]) * wts[:hi_l], axis=-1)
    I = np.zeros(len(edges))
    for k in range(ncell - 1, lo_r - 1, -1):
        I[k] = c_right[k] + math.exp(s_nodes[k + 1] - s_nodes[k]) * I[k + 1]
    J = np.zeros(len(edges))
    for k in range(hi_l):
        J[k + 1] = math.exp(s_nodes[k] - s_nodes[k + 1]) * J[k] + c_left[k]
    if r_bound is None:
        nu0 = norms(phi).l1_norm
        r_bound, _ = compute_r_kappa0(compute_basic(model.class_params, model.y0), nu0)
    sol = PoissonSolution(density, phi, float(pi_phi), float(r_bound), edges, peak, I, J, np.zeros(len(edges)),
                          int(np.argmin(np.abs(edges))))
    vals = sol.v(pts.ravel()).reshape(pts.shape)
    sol._V_nodes = np.concatenate([[0.0], np.cumsum(np.sum(vals * wts, axis=-1))])
    return sol


# Ito decomposition


def ito_decomposition_check(model: DiffusionModel, path: PathSample, phi: TestFunction, pi_phi: float | None = None,
                            poisson: PoissonSolution | None = None, stride: int = 1) -> float:
    """``|∫ phi~ dt - (V(y_T) - V(y_0) - zeta_T)|`` on the fine grid.

    ``zeta_T`` is the left-point Ito sum of ``v sigma dW``.  With ``stride > 1``
    the same Brownian path is used on a grid coarser by that factor.
    """
    fg = path.fine_grid
    if fg is None or fg.dW is None:
        raise ValueError("Ito decomposition requires fine grid with Wiener increments")
    if poisson is None:
        poisson = poisson_solution(model, None, phi, pi_phi=pi_phi)
    pi_phi = poisson.pi_phi if pi_phi is None else pi_phi
    y = fg.values[::stride]
    dW = fg.dW[: (len(fg.values) - 1) // stride * stride].reshape(-1, stride).sum(axis=1)
    dt = path.scheme.dt * stride
    lhs = float(trapezoid_integral(phi(y) - pi_phi, dt))
    left = y[:-1]
    zeta = float(np.sum(poisson.v(left) * model.diffusion(left) * dW))
    Vy = poisson.V(np.array([y[-1], y[0]]))
    return abs(lhs - (Vy[0] - Vy[1] - zeta))


# moments


@dataclass(frozen=True)
class MomentLine:
    t: float
    m: int
    empirical: float
    ci_low: float
    ci_high: float
    stderr: float
    bound: float
    analytic: float | None

    @property
    def flag(self) -> bool:
        return self.ci_high <= self.bound

    @property
    def analytic_ok(self) -> bool | None:
        if self.analytic is None:
            return None
        return abs(self.empirical - self.analytic) <= 3 * self.stderr


def ou_moment(model: DiffusionModel, t: float, m: int) -> float | None:
    """``E|y_t|^{2m}`` for an exact-Gaussian model started at ``y0``."""
    if not model.is_exact_gaussian:
        return None
    a, b = model.linear
    mu = -a / b
    e = math.exp(b * t)
    mean = mu + (model.y0 - mu) * e
    var = model.sigma_const**2 * (e * e - 1) / (2 * b)
    if var == 0:
        return abs(mean) ** (2 * m)
    return float(sps.norm(mean, math.sqrt(var)).moment(2 * m))


def moment_bound(model: DiffusionModel, m: int) -> float:
    rho = compute_basic(model.class_params, model.y0).rho
    return 4.0 * (2 * m) ** m * rho ** (2 * m)


def moment_check(model: DiffusionModel, m: int, t_grid, n_rep: int, base_seed: int, delta: float | None = None,
                 substeps: int = 16, n_boot: int = 999) -> list[MomentLine]:
    """Empirical ``E|y_t|^{2m}`` with a percentile-bootstrap 95% CI at each ``t``."""
    if not 1 <= m <= 4:
        raise ValueError("moment order m must lie in 1..4")
    t_grid = np.asarray(t_grid, dtype=float)
    delta = float(min(1.0, np.min(t_grid))) if delta is None else delta
    idx = np.rint(t_grid / delta).astype(int)
    if np.any(np.abs(idx * delta - t_grid) > 1e-9) or np.any(idx < 1):
        raise ValueError("t_grid must be positive multiples of delta")
    if model.is_exact_gaussian:
        substeps = 1
    scheme = ObservationScheme(max(1.0, float(t_grid.max())), delta, substeps)
    ens = run_ensemble(model, scheme, n_rep, base_seed)
    bound = moment_bound(model, m)
    rng = np.random.Generator(np.random.Philox(derive_seed(base_seed, 2**31 + m)))
    out = []
    for t, i in zip(t_grid, idx):
        x = np.abs(ens.observations[:, i - 1]) ** (2 * m)
        boot = sps.bootstrap((x,), np.mean, n_resamples=n_boot, method="percentile", random_state=rng,
                             vectorized=True)
        se = float(np.std(x, ddof=1) / math.sqrt(n_rep))
        out.append(MomentLine(float(t), m, float(np.mean(x)), float(boot.confidence_interval.low),
                              float(boot.confidence_interval.high), se, bound, ou_moment(model, float(t), m)))
    return out


# Burkholder


@dataclass(frozen=True)
class AR1Spec:
    """``y_{j+1} = a y_j + sigma_eps * xi_j`` with ``y_0`` deterministic."""

    a: float
    sigma_eps: float = 1.0
    y0: float = 0.0

    def __post_init__(self):
        if not abs(self.a) < 1:
            raise ValueError("AR(1) coefficient must satisfy |a| < 1")

    @classmethod
    def from_ou(cls, kappa: float, step: float, sigma: float = 1.0, y0: float = 0.0) -> "AR1Spec":
        a = math.exp(-kappa * step)
        return cls(a, sigma * math.sqrt((1 - a * a) / (2 * kappa)), y0)

    def simulate(self, n: int, n_rep: int, seed: int) -> np.ndarray:
        xi = standard_normals(seed, n * n_rep).reshape(n_rep, n)
        y = np.empty((n_rep, n))
        prev = np.full(n_rep, float(self.y0))
        for j in range(n):
            prev = self.a * prev + self.sigma_eps * xi[:, j]
            y[:, j] = prev
        return y

    def var(self, j):
        a2 = self.a * self.a
        return self.sigma_eps**2 * (1 - a2 ** np.asarray(j)) / (1 - a2)


@dataclass(frozen=True)
class BurkholderResult:
    lhs: float
    lhs_ci: tuple[float, float]
    rhs: float
    b: np.ndarray

    @property
    def flag(self) -> bool:
        return self.lhs_ci[1] <= self.rhs

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs


def _centered(chain: AR1Spec, phi: str, y: np.ndarray) -> tuple[np.ndarray, float]:
    """``X_j`` and the conditional decay factor ``c`` with ``E(X_k|F_j) = c^{k-j} X_j``."""
    j = np.arange(1, y.shape[1] + 1)
    if phi == "linear":
        return y - chain.a**j * chain.y0, chain.a
    if phi == "quadratic":
        return y**2 - (chain.a ** (2 * j) * chain.y0**2 + chain.var(j)), chain.a**2
    raise ValueError(f"unknown phi {phi!r}")


def burkholder_check(chain: AR1Spec, phi, p: int, n: int, n_rep: int, base_seed: int,
                     n_inner: int = 200) -> BurkholderResult:
    """MC check of the moment inequality for ``X_j = phi(y_j) - E phi(y_j)``.

    ``phi`` is ``"linear"`` or ``"quadratic"`` (conditional expectations in
    closed form) or a callable (nested MC, ``n <= 8`` only).
    """
    if p < 2 or p % 2:
        raise ValueError(f"p must be an even integer >= 2, got {p}")
    if n < 1:
        raise ValueError("n must be >= 1")
    y = chain.simulate(n, n_rep, derive_seed(base_seed, 0))
    if isinstance(phi, str):
        if n > 30:
            raise ValueError("n <= 30 required")
        X, c = _centered(chain, phi, y)
        absX = np.abs(X)
        geo = np.array([np.sum(np.abs(c) ** np.arange(n - j)) for j in range(n)])
        inner = absX * absX * geo  # |X_j| sum_k |c^{k-j} X_j|
    else:
        if n > 8:
            raise ValueError("nested-MC fallback supports n <= 8 only")
        X, inner = _nested_inner(chain, phi, y, n_inner, base_seed)
    b = np.mean(inner ** (p / 2), axis=0) ** (2 / p)
    rhs = (2 * p) ** (p / 2) * np.sum(b) ** (p / 2)
    s = np.abs(np.sum(X, axis=1)) ** p
    lhs = float(np.mean(s))
    se = float(np.std(s, ddof=1) / math.sqrt(n_rep)) if n_rep > 1 else math.inf
    z = sps.norm.ppf(0.975)
    return BurkholderResult(lhs, (lhs - z * se, lhs + z * se), float(rhs), b)


def _nested_inner(chain: AR1Spec, phi: Callable, y: np.ndarray, n_inner: int, base_seed: int):
    n_rep, n = y.shape
    means = np.mean(phi(y), axis=0)
    X = phi(y) - means
    inner = np.zeros_like(X)
    xi = standard_normals(derive_seed(base_seed, 1), n_rep * n * n_inner * n).reshape(n_rep, n, n_inner, n)
    for j in range(n):
        cur = np.repeat(y[:, j : j + 1], n_inner, axis=1)
        total = np.abs(X[:, j])
        for k in range(j + 1, n):
            cur = chain.a * cur + chain.sigma_eps * xi[:, j, :, k]
            total = total + np.abs(np.mean(phi(cur), axis=1) - means[k])
        inner[:, j] = np.abs(X[:, j]) * total
    return X, inner


# geometric ergodicity


@dataclass(frozen=True)
class CalibrationCell:
    t: float
    x: float
    e: float
    stderr: float
    used: bool


@dataclass(frozen=True)
class CalibrationResult:
    R_hat: float
    kappa_hat: float
    R_fit: float
    cells: list

    @property
    def max_normalized(self) -> float:
        return max((c.e * math.exp(self.kappa_hat * c.t) for c in self.cells if c.used), default=0.0)


def geometric_ergodicity_estimate(model: DiffusionModel, g: TestFunction, x_list, t_grid, n_rep: int,
                                  base_seed: int, delta: float = 0.05, substeps: int = 16, pi_g: float | None = None,
                                  density: InvariantDensity | None = None, snr: float = 3.0) -> CalibrationResult:
    """Fit ``log e(t, x) ≈ log R - kappa t`` on cells with signal-to-noise ``>= snr``.

    ``e(t, x) = |E_x g(y_t) - pi(g)| / (1 + |x|)``.  The returned ``R_hat`` is
    the larger of 1, the fitted intercept and the envelope
    ``max e(t, x) exp(kappa_hat t)``, so the calibrated curve dominates the data.
    """
    from .model import pi as stationary_mean

    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing")
    gsup = g.sup_norm if g.sup_norm is not None else norms(g).sup_norm
    if gsup > 1 + 1e-12:
        raise ValueError("calibration function must be bounded by 1")
    if pi_g is None:
        density = invariant_density(model) if density is None else density
        pi_g = stationary_mean(density, g)
    idx = np.rint(t_grid / delta).astype(int)
    if np.any(np.abs(idx * delta - t_grid) > 1e-9):
        raise ValueError("t_grid must lie on multiples of delta")
    if model.is_exact_gaussian:
        substeps = 1
    scheme = ObservationScheme(max(1.0, float(t_grid.max())), delta, substeps)
    floor = 64 * np.finfo(float).eps * max(1.0, gsup)  # below this e is rounding, not signal
    cells = []
    for i, x in enumerate(x_list):
        mx = replace(model, y0=float(x))
        ens = run_ensemble(mx, scheme, n_rep, derive_seed(base_seed, i))
        for t, k in zip(t_grid, idx):
            if k == 0:
                e, se = abs(float(g(np.array([x]))[0]) - pi_g), 0.0
            else:
                vals = g(ens.observations[:, k - 1])
                e, se = abs(float(np.mean(vals)) - pi_g), float(np.std(vals, ddof=1) / math.sqrt(n_rep))
            used = e > floor and e >= snr * se
            cells.append(CalibrationCell(float(t), float(x), e / (1 + abs(x)), se / (1 + abs(x)), bool(used)))
    used = [c for c in cells if c.used]
    if len({c.t for c in used}) < 2:
        raise CalibrationError("horizon too long for calibration: fewer than two informative times")
    tt = np.array([c.t for c in used])
    le = np.log([c.e for c in used])
    slope, intercept = np.polyfit(tt, le, 1)
    kappa = -float(slope)
    if not kappa > 0:
        raise CalibrationError(f"no decay detected (fitted rate {kappa:.3g})")
    R_fit = math.exp(intercept)
    envelope = float(np.max(np.exp(le + kappa * tt)))
    return CalibrationResult(max(1.0, R_fit, envelope), kappa, R_fit, cells)
