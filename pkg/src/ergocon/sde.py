"""Path simulation and the discrete observation scheme."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import DiffusionModel
from .rng import derive_seed, standard_normals, uniforms

# simulate at most this many (replication x substep) normals per batch
_BATCH_BUDGET = 4_000_000


class PathDivergenceError(FloatingPointError):
    pass


class ScheduleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ObservationScheme:
    """Observations at ``t_j = j * delta`` for ``j = 1..N`` with ``N = floor(T / delta)``."""

    T: float
    delta: float
    substeps: int = 16
    N: int = field(init=False)

    def __post_init__(self):
        if not self.T >= 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")
        object.__setattr__(self, "substeps", int(self.substeps))
        # the 1e-12 guard keeps e.g. 100 / 0.05 from flooring to 1999
        n = int(math.floor(self.T / self.delta * (1 + 1e-12)))
        object.__setattr__(self, "N", n)

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.N + 1) * self.delta

    @property
    def dt(self) -> float:
        return self.delta / self.substeps

    def fine_times(self) -> np.ndarray:
        k = np.arange(self.N * self.substeps + 1)
        return (k // self.substeps) * self.delta + (k % self.substeps) * self.dt

    def as_dict(self) -> dict:
        return {"T": self.T, "delta": self.delta, "substeps": self.substeps, "N": self.N}


@dataclass(frozen=True)
class ScheduleParams:
    T: float
    iota: float
    l_T: float
    eps_T: float
    delta_T: float
    conditions: dict

    def scheme(self, substeps: int = 1) -> ObservationScheme:
        return ObservationScheme(self.T, self.delta_T, substeps)


def _schedule_values(T, iota):
    lg = math.log(T + 1.0)
    l_T = lg ** (1.0 + 6.0 * iota)
    eps = lg ** (-iota)
    return l_T, eps, 1.0 / (T * l_T)


def schedule_from_T(T: float, iota: float) -> ScheduleParams:
    """``l_T = ln^{1+6 iota}(T+1)``, ``eps_T = ln^{-iota}(T+1)``, ``delta_T = 1/(T l_T)``.

    The asymptotic requirements on ``l_T`` and ``eps_T`` are checked as trends
    between ``T`` and ``2T`` (the ``l_T = o(T^m)`` check uses ``m = 1``); a
    failed trend raises a ``ScheduleWarning``.
    """
    if not iota > 0:
        raise ValueError("iota must be positive")
    if not T >= 3:
        raise ValueError(f"T too small for l_T > 1 (need T >= 3), got {T}")
    l1, e1, d1 = _schedule_values(T, iota)
    l2, e2, _ = _schedule_values(2 * T, iota)
    conditions = {
        "l_T/T decreasing": l2 / (2 * T) < l1 / T,
        "l_T/ln T increasing": l2 / math.log(2 * T) > l1 / math.log(T),
        "eps_T decreasing": e2 < e1,
        "l_T/(T eps_T) decreasing": l2 / (2 * T * e2) < l1 / (T * e1),
        "eps_T^5 l_T/ln T increasing": e2**5 * l2 / math.log(2 * T) > e1**5 * l1 / math.log(T),
    }
    for name, ok in conditions.items():
        if not ok:
            warnings.warn(f"schedule trend check failed at T={T}: {name}", ScheduleWarning, stacklevel=2)
    N = math.floor(T / d1 * (1 + 1e-12))
    if abs(N * d1 - T) > d1:
        warnings.warn("delta_T * N deviates from T by more than delta_T", ScheduleWarning, stacklevel=2)
    return ScheduleParams(float(T), float(iota), l1, e1, d1, conditions)


@dataclass(frozen=True)
class FineGrid:
    times: np.ndarray
    values: np.ndarray
    dW: np.ndarray  # increment over [times[k], times[k+1]]


@dataclass(frozen=True)
class PathSample:
    scheme: ObservationScheme
    observations: np.ndarray
    seed: int
    integrator: str
    y0: float
    fine_grid: FineGrid | None = None


def resolve_integrator(model: DiffusionModel, integrator: str = "auto") -> str:
    if integrator == "auto":
        return "exact-gaussian" if model.is_exact_gaussian else "euler-maruyama"
    if integrator == "exact-gaussian" and not model.is_exact_gaussian:
        raise ValueError("exact-gaussian integrator needs linear drift with negative slope and constant sigma")
    if integrator not in ("exact-gaussian", "euler-maruyama"):
        raise ValueError(f"unknown integrator {integrator!r}")
    return integrator


def stationary_initial_values(density, seeds) -> np.ndarray:
    """Inverse-CDF draws from the tabulated invariant density, one per seed."""
    x = density.nodes
    q = density(x)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (q[1:] + q[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    u = np.array([uniforms(derive_seed(s, 1), 1)[0] for s in seeds])
    return np.interp(u, cdf, x)


def _simulate_batch(model, scheme, seeds, integrator, keep_fine=False, fine_phis=(), increments=None, y0=None):
    """Simulate ``len(seeds)`` paths in lock-step.

    Returns ``(observations, fine_integrals, fine_values, dW)``; ``fine_integrals``
    holds trapezoid integrals of each ``fine_phis`` entry over ``[0, t_N]``.
    """
    b, N, K, dt = len(seeds), scheme.N, scheme.substeps, scheme.dt
    if increments is not None:
        dW = np.asarray(increments, dtype=float).reshape(b, N * K)
    else:
        dW = np.empty((b, N * K))
        for i, s in enumerate(seeds):
            dW[i] = standard_normals(s, N * K)
        dW *= math.sqrt(dt)
    y = np.full(b, model.y0, dtype=float) if y0 is None else np.asarray(y0, dtype=float).copy()
    obs = np.empty((b, N))
    fine = np.empty((b, N * K + 1)) if keep_fine else None
    if keep_fine:
        fine[:, 0] = y
    acc = np.zeros((b, len(fine_phis)))
    prev = [f(y) for f in fine_phis]

    if integrator == "exact-gaussian":
        a_lin, b_lin = model.linear
        m = -a_lin / b_lin
        decay = math.exp(b_lin * dt)
        scale = model.sigma_const * math.sqrt((decay * decay - 1.0) / (2.0 * b_lin)) / math.sqrt(dt)

        def step(y, w):
            return m + (y - m) * decay + scale * w
    else:
        drift, diff = model.drift, model.diffusion

        def step(y, w):
            return y + drift(y) * dt + diff(y) * w

    for k in range(N * K):
        y = step(y, dW[:, k])
        if fine_phis:
            for i, f in enumerate(fine_phis):
                cur = f(y)
                acc[:, i] += 0.5 * (prev[i] + cur) * dt
                prev[i] = cur
        if keep_fine:
            fine[:, k + 1] = y
        if k % K == K - 1:
            j = k // K
            if not np.all(np.isfinite(y)):
                raise PathDivergenceError(f"path divergence at t={(j + 1) * scheme.delta:.6g}")
            obs[:, j] = y
    return obs, acc, fine, dW


def simulate_path(model: DiffusionModel, scheme: ObservationScheme, seed: int, keep_fine_grid=False,
                  integrator="auto", increments=None, y0=None) -> PathSample:
    """Simulate one path; identical ``(model, scheme, seed)`` gives bit-identical output.

    ``increments`` (shape ``(N, substeps)``) overrides the seeded Wiener increments,
    e.g. to drive several resolutions with one Brownian path.
    """
    integrator = resolve_integrator(model, integrator)
    start = None if y0 is None else np.array([y0], dtype=float)
    obs, _, fine, dW = _simulate_batch(
        model, scheme, [seed], integrator, keep_fine=keep_fine_grid, increments=increments, y0=start
    )
    fg = FineGrid(scheme.fine_times(), fine[0], dW[0]) if keep_fine_grid else None
    y_start = model.y0 if y0 is None else float(y0)
    return PathSample(scheme, obs[0], int(seed), integrator, y_start, fg)


@dataclass(frozen=True)
class EnsembleResult:
    observations: np.ndarray  # (n_rep, N)
    fine_integrals: np.ndarray  # (n_rep, n_phi)
    y0: np.ndarray  # (n_rep,)
    seeds: list[int]
    integrator: str
    scheme: ObservationScheme


def ensemble_seeds(base_seed: int, n_rep: int) -> list[int]:
    return [derive_seed(base_seed, i) for i in range(n_rep)]


def run_ensemble(model: DiffusionModel, scheme: ObservationScheme, n_rep: int, base_seed: int, fine_phis=(),
                 threads: int = 1, integrator="auto", stationary_density=None) -> EnsembleResult:
    """Simulate ``n_rep`` replications and keep observations plus fine-grid integrals.

    Replication ``i`` uses ``derive_seed(base_seed, i)``; batches are reassembled
    in replication order so the output does not depend on ``threads``.
    """
    if n_rep < 1:
        raise ValueError("n_rep must be >= 1")
    integrator = resolve_integrator(model, integrator)
    seeds = ensemble_seeds(base_seed, n_rep)
    if stationary_density is not None:
        starts = stationary_initial_values(stationary_density, seeds)
    else:
        starts = np.full(n_rep, model.y0, dtype=float)
    per = max(1, _BATCH_BUDGET // max(1, scheme.N * scheme.substeps))
    chunks = [(i, min(i + per, n_rep)) for i in range(0, n_rep, per)]

    def work(chunk):
        lo, hi = chunk
        obs, acc, _, _ = _simulate_batch(model, scheme, seeds[lo:hi], integrator, fine_phis=fine_phis, y0=starts[lo:hi])
        return obs, acc

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    obs = np.concatenate([p[0] for p in parts])
    acc = np.concatenate([p[1] for p in parts])
    return EnsembleResult(obs, acc, starts, seeds, integrator, scheme)


def simulate_ensemble(model: DiffusionModel, scheme: ObservationScheme, n_rep: int, base_seed: int,
                      keep_fine_grid=False, threads: int = 1, integrator="auto") -> list[PathSample]:
    """List of ``PathSample``; replication ``i`` equals ``simulate_path(..., derive_seed(base_seed, i))``."""
    integrator = resolve_integrator(model, integrator)
    seeds = ensemble_seeds(base_seed, n_rep)

    def one(s):
        return simulate_path(model, scheme, s, keep_fine_grid=keep_fine_grid, integrator=integrator)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


# path export

_MAGIC = b"ERGC"
_FORMAT_VERSION = 1


def write_path_csv(path: PathSample, dest) -> None:
    """Columns ``j, t_j, y_tj``; floats written with 17 significant digits (lossless)."""
    times = path.scheme.times
    with open(dest, "w", newline="\n") as fh:
        fh.write("j,t_j,y_tj\n")
        for j, (t, y) in enumerate(zip(times, path.observations), start=1):
            fh.write(f"{j},{t:.17g},{y:.17g}\n")


def read_path_csv(src) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(src, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].copy(), data[:, 2].copy()


def write_path_binary(path: PathSample, dest) -> None:
    """Little-endian frame: ``b"ERGC"``, u32 version, u64 N, then N pairs of f64 ``(t_j, y_tj)``."""
    pairs = np.empty((path.scheme.N, 2), dtype="<f8")
    pairs[:, 0] = path.scheme.times
    pairs[:, 1] = path.observations
    with open(dest, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.array([_FORMAT_VERSION], dtype="<u4").tobytes())
        fh.write(np.array([path.scheme.N], dtype="<u8").tobytes())
        fh.write(pairs.tobytes())


def read_path_binary(src) -> tuple[np.ndarray, np.ndarray]:
    with open(src, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError("not an ERGC path frame")
    version = int(np.frombuffer(blob, "<u4", 1, 4)[0])
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported frame version {version}")
    n = int(np.frombuffer(blob, "<u8", 1, 8)[0])
    pairs = np.frombuffer(blob, "<f8", 2 * n, 16).reshape(n, 2)
    return pairs[:, 0].copy(), pairs[:, 1].copy()
