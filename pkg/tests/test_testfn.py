import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ergocon.constants import NuVector, compute_basic, compute_M1, nu_vector_for_kernel
from ergocon.model import ClassParams, GeneratorError, generator_apply, invariant_density, ou, pi
from ergocon.testfn import (
    KernelSpec,
    KernelSupportError,
    NormError,
    TestFunction,
    biweight_mollifier,
    bump3,
    epanechnikov_smoothed,
    k_nu_membership,
    kernel_from_csv,
    kernel_from_table,
    make_indicator_fn,
    make_kernel_fn,
    make_smoothed_indicator,
    norms,
    triweight_mollifier,
    zero_function,
)

CP = ClassParams(1.0, 2.0, 2.0, 0.5, 1.5)


def bump_exact(y):
    return 35 / 64 * np.where(np.abs(y) <= 2, (1 - y * y / 4) ** 3, 0.0)


def test_bump_norms_against_brute_force():
    psi = bump3()
    y = np.linspace(-2, 2, 10_000_001)
    v = bump_exact(y)
    riemann = float(np.sum(v[:-1] + v[1:]) * 0.5 * (y[1] - y[0]))
    assert psi.l1_norm == pytest.approx(riemann, abs=1e-7)
    assert psi.l1_norm == pytest.approx(1.0, abs=1e-12)
    assert psi.sup_norm == pytest.approx(35 / 64, abs=1e-12)
    # closed-form max of |Psi'| is at y^2 = 4/5
    assert psi.d1_sup_norm == pytest.approx(0.4695742752749292, rel=1e-9)


def test_zero_and_hat_norms():
    z = norms(zero_function())
    assert (z.l1_norm, z.sup_norm, z.d1_sup_norm) == (0.0, 0.0, 0.0)
    hat = TestFunction(lambda y: np.maximum(0.0, 1 - np.abs(y)), support_radius=1.0, breakpoints=(-1.0, 0.0, 1.0))
    h = norms(hat)
    assert h.l1_norm == pytest.approx(1.0, abs=1e-12)
    assert h.sup_norm == pytest.approx(1.0, abs=1e-12)


def test_unbounded_support_needs_tail():
    with pytest.raises(NormError, match="cannot certify L1 norm"):
        norms(TestFunction(np.tanh))


def test_support_vanishes_beyond_radius():
    for phi in (bump3(), epanechnikov_smoothed(), make_smoothed_indicator(0.3)):
        r = phi.support_radius
        assert np.all(phi(np.array([-r - 1e-9, r + 1e-9])) == 0.0)


def test_kernel_fn_examples():
    psi = bump3()
    k = make_kernel_fn(KernelSpec(psi, 0.999, 0.7))
    assert k.l1_norm == psi.l1_norm
    assert k(np.array([0.7]))[0] == pytest.approx(psi(np.array([0.0]))[0] / 0.999)
    with pytest.raises(ValueError, match="bandwidth"):
        KernelSpec(psi, 1.0)
    with pytest.raises(ValueError):
        KernelSpec(psi, 0.0)


def test_kernel_d1_sup_matches_finite_difference():
    k = make_kernel_fn(KernelSpec(bump3(), 0.3, 0.1))
    y = np.linspace(-0.6, 0.8, 1_000_001)
    fd = np.gradient(k(y), y)
    assert k.d1_sup_norm == pytest.approx(np.max(np.abs(fd)), rel=1e-4)


@settings(max_examples=10, deadline=None)
@given(h=st.floats(0.01, 0.99), x0=st.floats(-5, 5))
def test_scaling_identities(h, x0):
    psi = bump3()
    k = make_kernel_fn(KernelSpec(psi, h, x0))
    assert k.sup_norm == psi.sup_norm / h
    assert k.d1_sup_norm == psi.d1_sup_norm / h**2
    assert k.l1_norm == psi.l1_norm
    assert k.support_radius == pytest.approx(2 * h)


def test_indicator():
    chi = make_indicator_fn(0.4, 1.0)
    assert chi(np.array([1.0]))[0] == pytest.approx(2.5)
    assert np.all(chi(np.array([1.0 - 0.4 - 1e-12, 1.0 + 0.4 + 1e-12])) == 0)
    assert chi.l1_norm == 2.0 and chi.sup_norm == pytest.approx(2.5)
    assert not chi.is_c2
    with pytest.raises(GeneratorError):
        generator_apply(ou(CP), chi)


@pytest.mark.parametrize("eta", [0.5, 0.1, 0.01])
@pytest.mark.parametrize("moll", [biweight_mollifier, triweight_mollifier])
def test_smoothed_indicator_sandwich(eta, moll):
    V = moll()
    inner = make_smoothed_indicator(eta, "inner", V)
    outer = make_smoothed_indicator(eta, "outer", V)
    u = np.linspace(-2.2, 2.2, 100_001)
    ind = (np.abs(u) <= 1).astype(float)
    assert inner(np.array([0.0]))[0] == pytest.approx(1.0, abs=1e-14)
    assert outer(np.array([0.0]))[0] == pytest.approx(1.0, abs=1e-14)
    assert np.all(inner(u) <= ind + 1e-14)
    assert np.all(outer(u) >= ind - 1e-14)
    assert np.all(outer(u[np.abs(u) >= 2]) == 0)


def test_smoothed_indicator_derivatives_consistent():
    phi = make_smoothed_indicator(0.2, "outer", triweight_mollifier())
    u = np.linspace(-1.5, 1.5, 3001)
    step = 1e-6
    assert np.allclose((phi(u + step) - phi(u - step)) / (2 * step), phi.d1(u), atol=1e-6)
    assert np.allclose((phi.d1(u + step) - phi.d1(u - step)) / (2 * step), phi.d2(u), atol=1e-4)


def test_smoothed_indicator_eta_range():
    with pytest.raises(ValueError, match="smoothing parameter out of range"):
        make_smoothed_indicator(0.6)


@pytest.mark.parametrize("eta", [0.5, 0.1, 0.01])
def test_smoothed_indicator_proximity(eta):
    d = invariant_density(ou(CP))
    q_star = compute_basic(CP).q_star
    h, x0 = 0.4, 0.3
    psi2 = make_kernel_fn(KernelSpec(make_smoothed_indicator(eta, "outer"), h, x0))
    chi = make_indicator_fn(h, x0)
    gap = abs(pi(d, psi2) - pi(d, chi))
    assert gap <= 4 * eta * q_star
    # much tighter using the actual density maximum
    assert gap <= 4 * eta * d.sup()


def test_epanechnikov_smoothed_properties():
    k = epanechnikov_smoothed()
    assert k.l1_norm == pytest.approx(1.0, abs=1e-12)
    u = np.linspace(-2, 2, 4001)
    assert np.allclose(k(u), k(-u), atol=1e-15)
    step = 1e-6
    assert np.allclose((k(u + step) - k(u - step)) / (2 * step), k.d1(u), atol=1e-6)


def test_tabulated_kernel_roundtrip(tmp_path):
    y = np.linspace(-2, 2, 401)
    path = tmp_path / "k.csv"
    np.savetxt(path, np.column_stack([y, bump_exact(y)]), delimiter=",")
    k = kernel_from_csv(path)
    u = np.linspace(-2, 2, 1001)
    assert np.max(np.abs(k(u) - bump_exact(u))) < 1e-6
    with pytest.raises(KernelSupportError):
        kernel_from_table(np.linspace(-3, 3, 11), np.ones(11))


def test_k_nu_membership_examples():
    m = ou(CP)
    d = invariant_density(m)
    assert k_nu_membership(zero_function(), m, _nu(1, 1, 1, 1, 1), d).member
    basic = compute_basic(CP)
    h = 0.5
    nu = nu_vector_for_kernel(bump3(), h, compute_M1(CP, 0.0), basic.q_star)
    phi = make_kernel_fn(KernelSpec(bump3(), h, 0.0))
    rep = k_nu_membership(phi, m, nu, d)
    assert rep.member
    low = _nu(nu.nu0, nu.nu1, 0.5 * phi.d1_sup_norm, nu.nu3, nu.nu4)
    bad = k_nu_membership(phi, m, low, d)
    assert not bad.member and bad.failed() == ["nu2: ||phi'||_*"]


def test_generator_witness_below_analytic_bounds():
    m = ou(CP)
    d = invariant_density(m)
    basic = compute_basic(CP)
    M1 = compute_M1(CP, 0.0)
    for h in (0.25, 0.5, 0.9):
        nu = nu_vector_for_kernel(bump3(), h, M1, basic.q_star)
        rep = k_nu_membership(make_kernel_fn(KernelSpec(bump3(), h, 0.0)), m, nu, d)
        assert rep.lines[3].value <= nu.nu3
        assert rep.lines[4].value <= nu.nu4


def _nu(*v):
    return NuVector(*v)


def test_tail_radius_allows_norms():
    g = TestFunction(lambda y: np.exp(-y * y), tail_radius=10.0)
    assert norms(g).l1_norm == pytest.approx(math.sqrt(math.pi), rel=1e-10)
