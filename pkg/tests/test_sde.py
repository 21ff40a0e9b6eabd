import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ergocon.model import ClassParams, invariant_density, ou, tanh_drift
from ergocon.rng import brownian_increments, coarsen_increments, derive_seed, standard_normals, uniforms
from ergocon.sde import (
    ObservationScheme,
    PathDivergenceError,
    ScheduleWarning,
    read_path_binary,
    read_path_csv,
    run_ensemble,
    schedule_from_T,
    simulate_ensemble,
    simulate_path,
    stationary_initial_values,
    write_path_binary,
    write_path_csv,
)
from ergocon.model import DiffusionModel

CP = ClassParams(1.0, 2.0, 2.0, 0.5, 1.5)


@settings(max_examples=50, deadline=None)
@given(T=st.floats(1, 500), delta=st.floats(1e-3, 1))
def test_scheme_invariants(T, delta):
    s = ObservationScheme(T, delta, 2)
    t = s.times
    assert len(t) == s.N
    assert s.N * delta <= T * (1 + 1e-12)
    assert T < (s.N + 1) * delta
    assert np.all(np.diff(t) > 0)
    assert np.array_equal(t, np.arange(1, s.N + 1) * delta)


def test_scheme_exact_counts():
    assert ObservationScheme(100, 0.05).N == 2000
    assert ObservationScheme(200, 0.01).N == 20000
    with pytest.raises(ValueError):
        ObservationScheme(0.5, 0.1)
    with pytest.raises(ValueError):
        ObservationScheme(10, 1.5)


def test_fine_times_hit_observation_times():
    s = ObservationScheme(3, 0.1, 7)
    ft = s.fine_times()
    assert np.array_equal(ft[s.substeps :: s.substeps], s.times)


def test_schedule_values():
    s = schedule_from_T(100, 0.25)
    assert s.l_T == pytest.approx(math.log(101) ** 2.5, rel=1e-15)
    assert s.l_T == pytest.approx(45.757, abs=5e-4)
    assert s.delta_T == pytest.approx(2.1855e-4, rel=1e-4)
    assert s.eps_T == pytest.approx(0.6822, abs=1e-4)
    assert s.delta_T * 100 * s.l_T == pytest.approx(1.0, rel=1e-15)
    assert all(s.conditions.values())


def test_schedule_errors_and_warnings():
    with pytest.raises(ValueError, match="T too small"):
        schedule_from_T(1.5, 0.25)
    with pytest.raises(ValueError):
        schedule_from_T(100, 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ScheduleWarning)
        schedule_from_T(1e4, 0.1)


def test_deterministic_ode_case():
    m = ou(CP, sigma=0.0, y0=1.0)
    p = simulate_path(m, ObservationScheme(2, 1.0, 4), 1)
    assert p.observations[0] == pytest.approx(math.exp(-1), abs=1e-15)
    assert p.integrator == "exact-gaussian"
    em = simulate_path(m, ObservationScheme(2, 1.0, 1000), 1, integrator="euler-maruyama")
    assert em.observations[0] == pytest.approx(math.exp(-1), abs=1e-3)


def test_same_seed_identical():
    m = tanh_drift(CP)
    s = ObservationScheme(5, 0.1, 8)
    a = simulate_path(m, s, 123)
    b = simulate_path(m, s, 123)
    assert np.array_equal(a.observations, b.observations)
    assert not np.array_equal(a.observations, simulate_path(m, s, 124).observations)


def test_fine_grid_matches_observations():
    s = ObservationScheme(3, 0.2, 5)
    p = simulate_path(tanh_drift(CP), s, 9, keep_fine_grid=True)
    assert np.array_equal(p.fine_grid.values[s.substeps :: s.substeps], p.observations)
    assert p.fine_grid.dW.shape == (s.N * s.substeps,)
    assert np.all(np.isfinite(p.observations))


def test_ou_one_step_moments():
    m = ou(CP, y0=1.0)
    delta = 0.05
    obs = run_ensemble(m, ObservationScheme(1, delta, 1), 100_000, 5).observations[:, 0]
    mean, var = math.exp(-delta), (1 - math.exp(-2 * delta)) / 2
    se_mean = math.sqrt(var / obs.size)
    assert abs(obs.mean() - mean) < 3 * se_mean
    se_var = var * math.sqrt(2 / (obs.size - 1))
    assert abs(obs.var(ddof=1) - var) < 3 * se_var


def test_ensemble_contract():
    m = ou(CP)
    s = ObservationScheme(2, 0.1, 2)
    one = simulate_ensemble(m, s, 1, 77)
    assert np.array_equal(one[0].observations, simulate_path(m, s, derive_seed(77, 0)).observations)
    a = simulate_ensemble(m, s, 3, 77)
    b = simulate_ensemble(m, s, 3, 77, threads=3)
    c = simulate_ensemble(m, s, 3, 78)
    assert all(np.array_equal(x.observations, y.observations) for x, y in zip(a, b))
    assert not np.array_equal(a[0].observations, c[0].observations)


def test_batched_engine_matches_single_paths_and_threads():
    m = tanh_drift(CP)
    s = ObservationScheme(2, 0.1, 4)
    ens = run_ensemble(m, s, 5, 11)
    for i in range(5):
        assert np.array_equal(ens.observations[i], simulate_path(m, s, derive_seed(11, i)).observations)
    import ergocon.sde as sde

    old = sde._BATCH_BUDGET
    sde._BATCH_BUDGET = 80  # force several batches
    try:
        threaded = run_ensemble(m, s, 5, 11, threads=3)
    finally:
        sde._BATCH_BUDGET = old
    assert np.array_equal(ens.observations, threaded.observations)


def test_stationary_variance():
    m = ou(CP)
    obs = run_ensemble(m, ObservationScheme(20, 1.0, 1), 2000, 3).observations[:, 10:]
    pooled = obs.ravel()
    # lag-1 correlation e^{-1} between kept columns; inflate the SE accordingly
    var_se = 0.5 * math.sqrt(2 / (2000 * 10)) * math.sqrt((1 + math.exp(-2)) / (1 - math.exp(-2)))
    assert abs(pooled.var() - 0.5) < 3 * var_se


def test_stationary_start_distribution():
    m = ou(CP)
    d = invariant_density(m)
    seeds = [derive_seed(1, i) for i in range(20_000)]
    y = stationary_initial_values(d, seeds)
    assert abs(y.mean()) < 3 * math.sqrt(0.5 / y.size)
    assert abs(y.var() - 0.5) < 3 * 0.5 * math.sqrt(2 / y.size)


def test_strong_order_half():
    # successive refinements K, 4K, 16K on one Brownian path
    m = tanh_drift(CP, sigma_amp=0.5)
    K = 8
    schemes = [ObservationScheme(1, 1.0, K * 4**i) for i in range(3)]
    d1, d2 = [], []
    for i in range(400):
        dW = brownian_increments(derive_seed(3, i), 1, 16 * K, schemes[2].dt)
        y = [simulate_path(m, s, 0, increments=coarsen_increments(dW, 4 ** (2 - j))).observations[-1]
             for j, s in enumerate(schemes)]
        d1.append((y[0] - y[1]) ** 2)
        d2.append((y[1] - y[2]) ** 2)
    ratio = math.sqrt(np.mean(d1) / np.mean(d2))
    assert 1.7 <= ratio <= 2.3


def test_divergence_raises():
    bad = DiffusionModel(lambda y: y**3, None, lambda y: np.ones(np.shape(y)), None, None, CP, y0=5.0)
    with pytest.raises(PathDivergenceError, match="path divergence at t="):
        with np.errstate(over="ignore", invalid="ignore"):
            simulate_path(bad, ObservationScheme(20, 1.0, 1), 1)


def test_exact_integrator_rejected_for_nonlinear():
    with pytest.raises(ValueError):
        simulate_path(tanh_drift(CP), ObservationScheme(1, 0.5, 1), 1, integrator="exact-gaussian")


def test_csv_binary_roundtrip(tmp_path):
    p = simulate_path(tanh_drift(CP), ObservationScheme(3, 0.1, 2), 5)
    write_path_csv(p, tmp_path / "p.csv")
    write_path_binary(p, tmp_path / "p.bin")
    t1, y1 = read_path_csv(tmp_path / "p.csv")
    t2, y2 = read_path_binary(tmp_path / "p.bin")
    assert np.array_equal(y1, p.observations) and np.array_equal(y2, p.observations)
    assert np.array_equal(t1, p.scheme.times) and np.array_equal(t2, p.scheme.times)
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:4] == b"ERGC"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:16], "little") == p.scheme.N
    assert len(raw) == 16 + 16 * p.scheme.N
    assert len((tmp_path / "p.csv").read_text().splitlines()) == p.scheme.N + 1


# rng


def test_counter_stream_offsets():
    a = standard_normals(7, 100)
    for off in (0, 1, 3, 4, 63):
        assert np.array_equal(standard_normals(7, 100 - off, offset=off), a[off:])


def test_uniforms_open_interval():
    u = uniforms(3, 100_000)
    assert u.min() > 0 and u.max() < 1


def test_derive_seed_distinct():
    seeds = {derive_seed(5, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(5, 0) != derive_seed(6, 0)


def test_coarsen_preserves_sum():
    dW = brownian_increments(1, 10, 8, 0.01)
    c = coarsen_increments(dW, 4)
    assert c.shape == (10, 2)
    assert np.allclose(c.sum(), dW.sum())
    with pytest.raises(ValueError):
        coarsen_increments(dW, 3)
