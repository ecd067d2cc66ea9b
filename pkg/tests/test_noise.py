"""Clock sampling, forcing geometry, stopping times."""

import io

import numpy as np
import pytest
from scipy import stats

from boussinesq_lab import noise, spectral as sp
from boussinesq_lab.noise import (
    NoiseModel,
    SubordinatorSpec,
    check_mode_set,
    exp_moment_eta,
    first_eta_batch,
    forcing_increment,
    load_path,
    rng_stream,
    sample_subordinator,
    save_path,
    stopping_times,
    subordinated_increments,
)


# ---------------------------------------------------------------------------
# subordinator


def test_spec_validation():
    with pytest.raises(ValueError):
        SubordinatorSpec(a=-1.0)
    with pytest.raises(ValueError):
        SubordinatorSpec(b=0.0)
    with pytest.raises(ValueError):
        SubordinatorSpec(family="cauchy")
    with pytest.raises(ValueError):
        SubordinatorSpec().mgf(4.0)


def test_zero_intensity_clock_is_frozen():
    spec = SubordinatorSpec(a=0.0)
    path = sample_subordinator(spec, 1.0, rng_stream(1, 1))
    assert np.all(path.increments == 0.0)
    assert path.total == 0.0


def test_clock_monotone_and_grid():
    spec = SubordinatorSpec(a=8.0, b=4.0, grid_step=1e-3)
    path = sample_subordinator(spec, 2.0, rng_stream(7, 1))
    assert len(path.increments) == 2000
    assert np.all(np.diff(path.cumulative) >= 0.0)
    assert abs(path.horizon - 2.0) < 1e-12


def test_clock_mean_and_mgf_monte_carlo():
    spec = SubordinatorSpec(a=8.0, b=4.0, grid_step=1e-2)
    n = 600
    rng = rng_stream(42, 1)
    totals = np.array([sample_subordinator(spec, 1.0, rng).total for _ in range(n)])
    mean_se = totals.std(ddof=1) / np.sqrt(n)
    assert abs(totals.mean() - spec.mean_rate) <= 3.0 * mean_se

    vals = np.exp(totals)           # MGF at zeta = 1 over unit time
    mgf_se = vals.std(ddof=1) / np.sqrt(n)
    assert abs(vals.mean() - spec.mgf(1.0)) <= 3.0 * mgf_se


def test_subordinated_increments_variance_and_symmetry():
    spec = SubordinatorSpec(a=8.0, b=4.0, grid_step=1e-3)
    path = sample_subordinator(spec, 10.0, rng_stream(3, 1))
    dw = subordinated_increments(path, 4, rng_stream(3, 2))
    assert dw.shape == (10000, 4)
    alive = path.increments > 0
    z = dw[alive] / np.sqrt(path.increments[alive])[:, None]
    # normalized increments are standard normal in every coordinate
    pooled = z.ravel()
    assert abs(pooled.var() - 1.0) <= 3.0 * np.sqrt(2.0 / pooled.size) + 1e-3
    p = stats.kstest(z[:10000 // 4, 0], "norm").pvalue
    assert p > 0.01


def test_rank_correlation_of_consecutive_increments():
    spec = SubordinatorSpec(grid_step=1e-2)
    path = sample_subordinator(spec, 100.0, rng_stream(11, 1))
    inc = path.increments
    rho = stats.spearmanr(inc[:-1], inc[1:]).statistic
    assert abs(rho) < 0.05


# ---------------------------------------------------------------------------
# path serialization


def test_path_roundtrip_exact():
    spec = SubordinatorSpec(a=2.0, b=5.0, grid_step=1e-2)
    path = sample_subordinator(spec, 0.5, rng_stream(9, 1), seed=9)
    buf = io.StringIO()
    save_path(path, buf)
    buf.seek(0)
    back = load_path(buf)
    assert back.spec == spec
    assert back.seed == 9
    assert np.array_equal(back.times, path.times)
    # the stored columns round-trip exactly; increments are their differences
    assert np.array_equal(back.cumulative, path.cumulative)
    assert np.allclose(back.increments, path.increments, rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# forcing geometry


def test_forcing_increment_unit_vector():
    model = NoiseModel()
    n = 32
    kick = forcing_increment(model, n, np.array([1.0, 0.0, 0.0, 0.0]))
    assert np.max(np.abs(kick.w_hat)) == 0.0
    x1, _ = sp.grid_points(n)
    field = sp.to_physical(kick.theta_hat)
    assert np.max(np.abs(field - np.cos(x1 + 0 * field))) < 1e-12


def test_forcing_dimensions_and_intensity():
    model = NoiseModel(modes=((1, 0), (0, 1)))
    assert model.dim == 4
    assert model.b0 == 4.0
    scaled = NoiseModel(modes=((1, 0),), alphas=(2.0, 3.0))
    assert scaled.b0 == 13.0
    with pytest.raises(ValueError):
        NoiseModel(modes=((1, 0), (1, 0)))
    with pytest.raises(ValueError):
        NoiseModel(modes=((-1, 0),))
    with pytest.raises(ValueError):
        forcing_increment(model, 16, np.zeros(3))


def test_forcing_is_temperature_only_random_direction():
    model = NoiseModel()
    rng = rng_stream(5, 1)
    kick = forcing_increment(model, 16, rng.standard_normal(4))
    assert np.max(np.abs(kick.w_hat)) == 0.0
    assert np.max(np.abs(kick.theta_hat)) > 0.0


def test_mode_set_clauses():
    default = check_mode_set([(1, 0), (0, 1)])
    assert default.symmetric_generator
    assert default.has_nonparallel_pair
    assert not default.has_norm_distinct_pair

    doubled = check_mode_set([(2, 0), (0, 2)])
    assert not doubled.symmetric_generator
    assert doubled.has_nonparallel_pair
    assert doubled.minor_gcd == 4

    single = check_mode_set([(1, 0)])
    assert not single.has_nonparallel_pair
    assert not single.symmetric_generator

    rich = check_mode_set([(1, 0), (1, 1), (0, 2)])
    assert rich.symmetric_generator
    assert rich.has_norm_distinct_pair


# ---------------------------------------------------------------------------
# stopping times


def test_stopping_times_frozen_clock():
    spec = SubordinatorSpec(a=0.0, grid_step=1e-3)
    path = sample_subordinator(spec, 10.5, rng_stream(1, 1))
    etas = stopping_times(path, nu=1.0, kappa=0.7, b0=4.0)
    assert np.array_equal(etas[:11], np.arange(11, dtype=float))


def test_stopping_times_zero_kappa():
    spec = SubordinatorSpec(a=8.0, b=4.0, grid_step=1e-3)
    path = sample_subordinator(spec, 5.0, rng_stream(2, 1))
    etas = stopping_times(path, nu=2.0, kappa=0.0, b0=4.0)
    # crossing exactly at the horizon is not resolvable inside the path,
    # so the last emitted renewal is at 4.5
    assert len(etas) == 10
    assert np.array_equal(etas, 0.5 * np.arange(10))


def test_stopping_times_monotone_and_delayed_by_jumps():
    spec = SubordinatorSpec(a=8.0, b=4.0, grid_step=1e-3)
    path = sample_subordinator(spec, 30.0, rng_stream(3, 1))
    etas = stopping_times(path, nu=1.0, kappa=2e-3, b0=4.0)
    gaps = np.diff(etas)
    assert np.all(gaps > 0)
    # every renewal takes at least the jump-free crossing time 1/nu
    assert np.all(gaps >= 1.0 - 1e-12)
    assert np.any(gaps > 1.0 + 1e-9)


def test_first_eta_batch_matches_exact_walk():
    spec = SubordinatorSpec(a=8.0, b=4.0, grid_step=1e-3)
    nu, kappa, b0 = 1.0, 2e-3, 4.0
    etas, censored = first_eta_batch(spec, nu, kappa, b0, n_paths=1, seed=77, horizon=20.0)
    assert censored == 0
    rng = rng_stream(77, noise.ROLE_CLOCK)
    inc = rng.gamma(spec.a * spec.grid_step, 1.0 / spec.b, size=(1, 20000))
    path = noise.SubordinatorPath(spec, 1e-3 * np.arange(20001), inc[0])
    walked = stopping_times(path, nu, kappa, b0, max_count=1)
    assert abs(etas[0] - walked[1]) < 1e-10


def test_exp_moment_zero_kappa_is_closed_form():
    spec = SubordinatorSpec()
    out = exp_moment_eta(spec, nu=1.0, kappa=0.0, b0=4.0, n_paths=100, seed=5)
    assert abs(out["estimate"] - np.exp(10.0)) < 1e-9 * np.exp(10.0)
    assert out["censored"] == 0


def test_exp_moment_light_kappa_finite_and_uncensored():
    spec = SubordinatorSpec()
    out = exp_moment_eta(spec, nu=1.0, kappa=1.25e-3, b0=4.0, n_paths=400, seed=6)
    assert out["censored"] == 0
    assert np.exp(10.0) < out["estimate"] < np.exp(13.0)
