import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abm_gvi import autodiff as ad
from abm_gvi.autodiff import DomainError, NumericError
from abm_gvi.population import ConfigError, Population, synthesize
from abm_gvi.simulator import (
    SimConfig,
    ThetaVector,
    Trajectory,
    infection_probability,
    infectious_profile,
    relaxed_bernoulli,
    simulate,
)

TRUTH = np.array([0.9, 0.6, 0.3])


@pytest.fixture(scope="module")
def pop():
    return synthesize(1000, seed=11)


@pytest.fixture(scope="module")
def small():
    return synthesize(100, seed=4)


# --- infectiousness and probabilities --------------------------------------

def test_profile_peak_and_support():
    cfg = SimConfig()
    assert infectious_profile(cfg.peak_time, cfg) == 1.0
    for s in (0.0, -1.0, 14.5, 30.0):
        assert infectious_profile(s, cfg) == 0.0
    assert infectious_profile(14.0, cfg) > 0.0


def test_profile_closed_form():
    assert infectious_profile(4.0, SimConfig()) == pytest.approx(2 * math.exp(-1), abs=1e-6)
    assert infectious_profile(4.0, SimConfig()) == pytest.approx(0.735759, abs=1e-6)
    # I(1) = 0.5 e^0.5 for a peak at two days
    assert infectious_profile(1.0, SimConfig()) == pytest.approx(0.824361, abs=1e-6)


def test_profile_is_bounded_by_one():
    s = np.linspace(-2, 20, 2001)
    assert np.all(infectious_profile(s, SimConfig()) <= 1.0)


def test_infection_probability_examples():
    assert infection_probability(1.0, 0.9, 0.5, 0.0) == 0.0
    assert infection_probability(1.0, 0.0, 0.5, 3.0) == 0.0
    assert infection_probability(1.0, 0.9, 0.5, 2.0) == pytest.approx(0.593430, abs=1e-6)
    assert infection_probability(1.0, 0.9, 0.5, 0.606531) == pytest.approx(0.238857, abs=1e-5)


def test_infection_probability_gradient():
    tape = ad.Tape()
    beta = tape.variable(0.9)
    p = infection_probability(1.0, beta, 0.5, 2.0)
    assert tape.backward(p)[beta] == pytest.approx(0.5 * 2.0 * math.exp(-0.9))


def test_infection_probability_rejects_negative():
    with pytest.raises(DomainError):
        infection_probability(1.0, -0.1, 0.5, 1.0)
    with pytest.raises(DomainError):
        infection_probability(1.0, 0.1, 0.5, -1.0)


def test_relaxed_bernoulli_symmetry_point():
    tape = ad.Tape()
    p = tape.variable(0.5)
    h = relaxed_bernoulli(p, 0.5, 0.1)
    assert h.item() == 0.0
    assert relaxed_bernoulli(0.5, 0.5, 0.1, hard=False).item() == pytest.approx(0.5)


def test_relaxed_bernoulli_slope_at_midpoint():
    tape = ad.Tape()
    p = tape.variable(0.5)
    y = relaxed_bernoulli(p, 0.5, 0.1, hard=False)
    # dlogit/dp = 4 at p = 0.5, so dy/dp = 2.5 * 4
    assert tape.backward(y)[p] == pytest.approx(2.5 * 4.0)
    tape = ad.Tape()
    p = tape.variable(0.5)
    h = relaxed_bernoulli(p, 0.5, 0.1)
    assert tape.backward(h)[p] == pytest.approx(10.0)


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
def test_relaxed_bernoulli_is_exactly_bernoulli(p):
    n = 100_000
    u = np.random.default_rng(int(p * 10)).random(n)
    h = relaxed_bernoulli(np.full(n, p), u, 0.1).values
    se = math.sqrt(p * (1 - p) / n)
    assert abs(h.mean() - p) < 3 * se


def test_relaxed_bernoulli_rejects_bad_temperature():
    with pytest.raises(ConfigError):
        relaxed_bernoulli(0.3, 0.4, 0.0)


# --- theta -----------------------------------------------------------------

def test_theta_round_trip():
    theta = ThetaVector.from_constrained(TRUTH)
    np.testing.assert_allclose(theta.beta, TRUTH, rtol=1e-14)
    assert np.all((theta.beta > 0) & (theta.beta < 2))


def test_theta_rejects_boundary():
    with pytest.raises(DomainError):
        ThetaVector.from_constrained([0.0, 1.0, 1.0])
    with pytest.raises(DomainError):
        ThetaVector.from_constrained([1.0, 2.0, 1.0])


# --- dynamics --------------------------------------------------------------

def test_determinism(pop):
    a = simulate(pop, TRUTH, seed=5)
    b = simulate(pop, TRUTH, seed=5)
    assert a.counts.tobytes() == b.counts.tobytes()
    assert not np.array_equal(a.counts, simulate(pop, TRUTH, seed=6).counts)


def test_seeding_count(pop):
    cfg = SimConfig(seed_fraction=0.013)
    traj = simulate(pop, TRUTH, cfg, seed=1)
    assert traj.n_seeds == math.ceil(0.013 * pop.n_agents)
    assert int((traj.infection_day == 0).sum()) == traj.n_seeds


def test_no_transmission_at_tiny_beta(pop):
    traj = simulate(pop, np.full(3, 1e-12), seed=3)
    assert np.all(traj.counts == 0.0)
    assert np.all(traj.log_series.values == 0.0)


def test_counts_are_integers_and_conserved(pop):
    traj = simulate(pop, np.array([1.8, 1.8, 1.8]), seed=2)
    c = traj.counts
    np.testing.assert_array_equal(c, np.round(c))
    assert c.sum() <= pop.n_agents - traj.n_seeds
    infected = traj.infection_day >= 0
    assert infected.sum() == c.sum() + traj.n_seeds
    for t in range(1, traj.horizon + 1):
        assert int((traj.infection_day == t).sum()) == c[t - 1]


def test_log_series(pop):
    traj = simulate(pop, TRUTH, seed=4)
    np.testing.assert_allclose(traj.log_series.values, np.log(traj.counts + 1))
    assert np.all(traj.log_series.values >= 0)


def _pair(contact_scaling="none"):
    pop = Population(age=[2, 2], susceptibility=[1.0, 1.0], household=[0, 0], venue=[-1, -1])
    cfg = SimConfig(dt={"household": 0.5, "school": 0.33, "company": 0.33},
                    seed_fraction=0.5, horizon=1, contact_scaling=contact_scaling)
    return pop, cfg


def test_single_household_closed_form():
    pop, cfg = _pair()
    p = infection_probability(1.0, 0.9, 0.5, infectious_profile(1.0, cfg))
    n = 4000
    hits = sum(simulate(pop, [0.9, 0.5, 0.5], cfg, seed=s).counts[0] for s in range(n))
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_group_size_scaling_halves_the_hazard():
    pop, cfg = _pair("group_size")
    # one seed; the other agent's hazard is beta * dt * I(1) / 2
    lam = 0.9 * 0.5 * infectious_profile(1.0, cfg) / 2
    hits = np.mean([simulate(pop, [0.9, 0.5, 0.5], cfg, seed=s).counts[0] for s in range(3000)])
    assert abs(hits - (1 - math.exp(-lam))) < 0.03


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2), st.floats(0.05, 0.6))
def test_monotone_in_beta_with_common_noise(seed, which, bump):
    # single paths can reorder (earlier infection shifts the infectiousness
    # peak), so the ordering is checked on the mean over paired seeds
    population = synthesize(300, seed=seed % 7)
    cfg = SimConfig(horizon=15, seed_fraction=0.02)
    low = np.array([0.5, 0.4, 0.3])
    high = low.copy()
    high[which] += bump
    diffs = np.array([
        np.cumsum(simulate(population, high, cfg, seed=seed + r).counts)
        - np.cumsum(simulate(population, low, cfg, seed=seed + r).counts)
        for r in range(30)])
    se = diffs.std(axis=0, ddof=1) / math.sqrt(len(diffs))
    assert np.all(diffs.mean(axis=0) >= -3 * se)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_error_on_non_finite_hazard():
    pop = Population(age=[2, 2], susceptibility=[np.inf, 1.0], household=[0, 0], venue=[-1, -1])
    cfg = SimConfig(seed_fraction=0.5, horizon=2, contact_scaling="none")
    with pytest.raises(NumericError, match="day 1"):
        for s in range(10):
            simulate(pop, TRUTH, cfg, seed=s)


def test_rejects_out_of_range_theta(pop):
    with pytest.raises(DomainError):
        simulate(pop, [0.9, 2.0, 0.3])
    with pytest.raises(ValueError):
        simulate(pop, [0.9, 0.3])


@pytest.mark.parametrize("change", [
    {"temperature": 0.0},
    {"peak_time": 20.0},
    {"seed_fraction": 1.0},
    {"horizon": 0},
    {"dt": {"household": 0.5, "school": -1.0, "company": 0.3}},
    {"surrogate": "magic"},
])
def test_config_errors(pop, change):
    with pytest.raises(ConfigError):
        simulate(pop, TRUTH, dataclasses.replace(SimConfig(), **change))


# --- gradients -------------------------------------------------------------

def _grad(population, u0, cfg, seed):
    tape = ad.Tape()
    u = tape.variable(u0)
    traj = simulate(population, ThetaVector(u), cfg, seed=seed)
    return tape.backward(ad.sum_(traj.log_series))[u]


@pytest.mark.parametrize("surrogate", ["expected", "relaxed"])
def test_gradients_are_finite(pop, surrogate):
    cfg = SimConfig(surrogate=surrogate)
    u0 = ThetaVector.from_constrained(TRUTH).unconstrained.values
    g = _grad(pop, u0, cfg, seed=0)
    assert g.shape == (3,) and np.all(np.isfinite(g))


def test_gradient_sign_matches_finite_differences(small):
    cfg = SimConfig(horizon=20, seed_fraction=0.03)
    u0 = ThetaVector.from_constrained(TRUTH).unconstrained.values
    seeds = range(40)
    grad = np.mean([_grad(small, u0, cfg, s) for s in seeds], axis=0)

    def total(u):
        return np.mean([simulate(small, ThetaVector(u), cfg, seed=s).log_series.values.sum()
                        for s in seeds])

    delta = 0.05
    fd = np.array([(total(u0 + delta * e) - total(u0 - delta * e)) / (2 * delta)
                   for e in np.eye(3)])
    np.testing.assert_array_equal(np.sign(grad), np.sign(fd))


# --- CSV -------------------------------------------------------------------

def test_csv_round_trip(tmp_path, pop):
    traj = simulate(pop, TRUTH, seed=8)
    path = tmp_path / "truth.csv"
    traj.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "day,new_infections,log_new_infections"
    assert len(lines) == traj.horizon + 1
    assert lines[1].count(".") == 2 and len(lines[1].split(",")[2].split(".")[1]) == 6
    np.testing.assert_array_equal(Trajectory.from_csv(path).counts, traj.counts)


def test_csv_errors_name_the_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("day,new_infections,log_new_infections\n1,3.0,1.386294\n2,-1.0,0.0\n")
    with pytest.raises(ValueError, match=":3:"):
        Trajectory.from_csv(path)
    path.write_text("date,count\n")
    with pytest.raises(ValueError, match=":1:"):
        Trajectory.from_csv(path)
