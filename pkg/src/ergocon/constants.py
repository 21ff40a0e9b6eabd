"""Explicit constants of the concentration bounds.

Every exponential quantity is carried as a logarithm; the linear value is
``math.inf`` when it does not fit in a double.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from ._quad import abs_integral, refined_sup
from .model import ClassParams
from .testfn import KernelSpec, KernelSupportError, TestFunction


class ConstantOverflowWarning(RuntimeWarning):
    pass


class DegenerateBoundWarning(RuntimeWarning):
    pass


def _exp(log_value: float, label: str = "") -> float:
    try:
        return math.exp(log_value)
    except OverflowError:
        warnings.warn(f"constant overflow: {label} = exp({log_value:.6g})", ConstantOverflowWarning, stacklevel=3)
        return math.inf


def _logadd(*logs):
    m = max(logs)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in logs))


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


@dataclass(frozen=True)
class ErgodicityConstants:
    R: float = 10.0
    kappa: float = 0.5

    def __post_init__(self):
        if not self.R >= 1:
            raise ValueError(f"R must be >= 1, got {self.R}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")


@dataclass(frozen=True)
class NuVector:
    nu0: float
    nu1: float
    nu2: float
    nu3: float
    nu4: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be > 0, got {v}")

    def as_tuple(self):
        return (self.nu0, self.nu1, self.nu2, self.nu3, self.nu4)


@dataclass(frozen=True)
class BasicConstants:
    beta1: float
    beta2: float
    log_upsilon1: float
    log_upsilon2: float
    log_q_star: float
    rho: float
    params: ClassParams
    y0: float

    @property
    def upsilon1(self):
        return _exp(self.log_upsilon1, "upsilon1")

    @property
    def upsilon2(self):
        return _exp(self.log_upsilon2, "upsilon2")

    @property
    def q_star(self):
        return _exp(self.log_q_star, "q_star")


def compute_basic(params: ClassParams, y0: float = 0.0) -> BasicConstants:
    p = params
    b1 = 2.0 * p.M / p.sigma_min**2
    b2 = 1.0 / (p.L * p.sigma_max**2)
    e = b1 * b1 / (4.0 * b2)
    log_u1 = e
    log_u2 = 0.5 * math.log(math.pi / b2) + e
    log_q = 2.0 * math.log(p.sigma_max / p.sigma_min) + b1 * p.x_star + e
    rho = max(abs(y0), p.sigma_max * math.sqrt(p.L), 2.0 * (p.x_star + p.M * p.L))
    return BasicConstants(b1, b2, log_u1, log_u2, log_q, rho, p, float(y0))


def _log_r(basic: BasicConstants, nu0: float) -> float:
    p = basic.params
    # 1 + upsilon1 + q* (x* + upsilon2), summed in log space
    inner = _logadd(0.0, basic.log_upsilon1, basic.log_q_star + _logadd(_log(p.x_star), basic.log_upsilon2))
    return math.log(2.0 * nu0 / p.sigma_min**2) + inner + p.x_star * basic.beta1


def _log_kappa0(basic: BasicConstants, log_r: float) -> float:
    p = basic.params
    return -(math.log(108.0) + 2 * log_r + math.log(3 * basic.rho**2 + basic.y0**2 + 2 * p.sigma_max**2))


def compute_r_kappa0(basic: BasicConstants, nu0: float) -> tuple[float, float]:
    """Bound ``r`` on the Poisson solution and the sub-Gaussian rate ``kappa0``."""
    if not nu0 > 0:
        raise ValueError("nu0 must be positive")
    lr = _log_r(basic, nu0)
    return _exp(lr, "r"), _exp(_log_kappa0(basic, lr), "kappa0")


@dataclass(frozen=True)
class Thm1Params:
    c1_star: float
    c2_star: float
    z0: float
    tau: float
    gamma: float
    varkappa: float
    kappa0: float
    r: float
    R1: float
    varsigma1: float
    varsigma2: float


def c_stars(basic: BasicConstants, erg: ErgodicityConstants) -> tuple[float, float]:
    c1 = 2.0 * math.exp(erg.kappa + 1.0) * math.sqrt(erg.R * (1.0 + basic.rho) / erg.kappa)
    c2 = math.sqrt(2.0) * math.e * basic.params.sigma_max
    return c1, c2


def compute_thm1_params(basic: BasicConstants, erg: ErgodicityConstants, nu: NuVector, delta: float, T: float) -> Thm1Params:
    """Threshold ``z0``, scale ``tau`` and the two decay rates for the discrete-time bound.

    ``delta == 1`` makes ``varkappa`` zero; a ``DegenerateBoundWarning`` is issued.
    """
    if not 0 < delta <= 1:
        raise ValueError(f"need 0 < delta <= 1, got {delta}")
    if not T >= 1:
        raise ValueError(f"need T >= 1, got {T}")
    c1, c2 = c_stars(basic, erg)
    d32 = delta**1.5
    z0 = d32 * max(2 * c1 * nu.nu3, 2 * c2 * nu.nu2, nu.nu4 * math.sqrt(T), nu.nu1 / math.sqrt(T))
    tau = d32 * max(c1 * nu.nu3, c2 * nu.nu2)
    gamma = 1.0 / (4.0 * tau)
    r, kappa0 = compute_r_kappa0(basic, nu.nu0)
    if delta == 1:
        warnings.warn("varkappa degenerates to 0: Theorem 1 bound vacuous", DegenerateBoundWarning, stacklevel=2)
        varkappa = 0.0
    else:
        varkappa = 9.0 * kappa0 * (1.0 - delta) / (64.0 * delta)
    R1 = erg.R * math.exp(2 * erg.kappa) * (1.0 + basic.rho) / erg.kappa
    vs1 = 2 * math.e * math.sqrt(R1) * nu.nu3 * d32
    vs2 = math.sqrt(2.0) * math.e * d32 * nu.nu2 * basic.params.sigma_max
    return Thm1Params(c1, c2, z0, tau, gamma, varkappa, kappa0, r, R1, vs1, vs2)


@dataclass(frozen=True)
class KernelNorms:
    l1: float
    l1_d1: float
    l1_d2: float
    sup: float
    sup_d1: float
    sup_d2: float

    @property
    def k_star(self) -> float:
        return max(self.l1_d1, self.l1_d2, self.sup, self.sup_d1, self.sup_d2)


def _kernel(psi):
    return psi.psi if isinstance(psi, KernelSpec) else psi


def compute_kernel_functional(psi: TestFunction | KernelSpec) -> KernelNorms:
    """L1 and sup norms of the kernel and its first two derivatives on ``[-2, 2]``."""
    psi = _kernel(psi)
    if psi.d1 is None or psi.d2 is None:
        raise ValueError("kernel must be C2 (d1 and d2 required)")
    outside = psi.value(np.array([-2 - 1e-9, 2 + 1e-9]))
    if np.any(outside != 0.0):
        raise KernelSupportError("kernel support violation: nonzero beyond |y| = 2")
    bps = psi.breakpoints
    return KernelNorms(
        l1=abs_integral(psi.value, -2.0, 2.0, breakpoints=bps, atol=0.0),
        l1_d1=abs_integral(psi.d1, -2.0, 2.0, breakpoints=bps, atol=0.0),
        l1_d2=abs_integral(psi.d2, -2.0, 2.0, breakpoints=bps, atol=0.0),
        sup=refined_sup(psi.value, -2.0, 2.0),
        sup_d1=refined_sup(psi.d1, -2.0, 2.0),
        sup_d2=refined_sup(psi.d2, -2.0, 2.0),
    )


@dataclass(frozen=True)
class Thm2Params:
    M1: float
    lambda1: float
    lambda2: float
    z0_star: float
    tau_star: float
    gamma_star: float
    k_star_psi: float


def compute_M1(params: ClassParams, x0: float) -> float:
    return params.M + params.L * (params.x_star + abs(x0) + 2.0)


def compute_thm2_params(basic: BasicConstants, erg: ErgodicityConstants, psi, x0: float = 0.0,
                        kernel_norms: KernelNorms | None = None) -> Thm2Params:
    kn = kernel_norms or compute_kernel_functional(psi)
    c1, c2 = c_stars(basic, erg)
    M1 = compute_M1(basic.params, x0)
    lam1 = max(2 * c1 * M1, 2 * c2, M1 * basic.q_star, 1.0)
    lam2 = max(c1 * M1, c2)
    z0s = lam1 * kn.k_star
    taus = lam2 * kn.k_star
    return Thm2Params(M1, lam1, lam2, z0s, taus, 1.0 / (4.0 * taus), kn.k_star)


def nu_vector_for_kernel(psi, h: float, M1: float, q_star: float, kernel_norms: KernelNorms | None = None) -> NuVector:
    """The ``nu`` vector that dominates ``psi_{h,x0}`` uniformly over the class."""
    if not 0 < h < 1:
        raise ValueError(f"bandwidth out of range: need 0 < h < 1, got {h}")
    kn = kernel_norms or compute_kernel_functional(psi)
    mu_star = max(kn.sup_d1, kn.sup_d2) * M1
    mu_tilde_star = max(kn.l1_d1, kn.l1_d2) * M1 * q_star
    return NuVector(kn.l1, kn.sup / h, kn.sup_d1 / h**2, mu_star / h**3, mu_tilde_star / h**2)


def mu_stars(kn: KernelNorms, M1: float, q_star: float) -> tuple[float, float]:
    return max(kn.sup_d1, kn.sup_d2) * M1, max(kn.l1_d1, kn.l1_d2) * M1 * q_star


# ----------------------------------------------------------------------------
# full table


@dataclass(frozen=True)
class ConstantsTable:
    beta1: float
    beta2: float
    upsilon1: float
    upsilon2: float
    q_star: float
    rho: float
    r: float
    kappa0: float
    c1_star: float
    c2_star: float
    z0: float
    tau: float
    gamma: float
    varkappa: float
    M1: float
    k_star_psi: float
    lambda1: float
    lambda2: float
    z0_star: float
    tau_star: float
    gamma_star: float
    R1: float
    varsigma1: float
    varsigma2: float
    log_upsilon1: float
    log_upsilon2: float
    log_q_star: float
    log_r: float
    log_kappa0: float

    def as_dict(self, log_space: bool = False) -> dict:
        d = asdict(self)
        if not log_space:
            d = {k: v for k, v in d.items() if not k.startswith("log_")}
        return d

    def table_hash(self) -> str:
        blob = json.dumps({k: repr(v) for k, v in asdict(self).items()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_table(params: ClassParams, y0: float, erg: ErgodicityConstants, psi, h: float, x0: float,
                delta: float, T: float) -> ConstantsTable:
    """All constants for a kernel test function ``psi_{h,x0}`` at step ``delta`` and horizon ``T``."""
    basic = compute_basic(params, y0)
    kn = compute_kernel_functional(psi)
    t2 = compute_thm2_params(basic, erg, psi, x0, kernel_norms=kn)
    nu = nu_vector_for_kernel(psi, h, t2.M1, basic.q_star, kernel_norms=kn)
    t1 = compute_thm1_params(basic, erg, nu, delta, T)
    lr = _log_r(basic, nu.nu0)
    return ConstantsTable(
        beta1=basic.beta1, beta2=basic.beta2, upsilon1=basic.upsilon1, upsilon2=basic.upsilon2,
        q_star=basic.q_star, rho=basic.rho, r=t1.r, kappa0=t1.kappa0, c1_star=t1.c1_star,
        c2_star=t1.c2_star, z0=t1.z0, tau=t1.tau, gamma=t1.gamma, varkappa=t1.varkappa, M1=t2.M1,
        k_star_psi=kn.k_star, lambda1=t2.lambda1, lambda2=t2.lambda2, z0_star=t2.z0_star,
        tau_star=t2.tau_star, gamma_star=t2.gamma_star, R1=t1.R1, varsigma1=t1.varsigma1,
        varsigma2=t1.varsigma2, log_upsilon1=basic.log_upsilon1, log_upsilon2=basic.log_upsilon2,
        log_q_star=basic.log_q_star, log_r=lr, log_kappa0=_log_kappa0(basic, lr),
    )
