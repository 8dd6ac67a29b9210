import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abm_gvi.population import (
    ConfigError,
    PopulationConfig,
    PopulationParseError,
    load,
    save,
    synthesize,
)


@pytest.fixture(scope="module")
def pop():
    return synthesize(1000, seed=7)


def test_deterministic_files(tmp_path):
    save(synthesize(1000, seed=7), tmp_path / "a.pop")
    save(synthesize(1000, seed=7), tmp_path / "b.pop")
    assert (tmp_path / "a.pop").read_bytes() == (tmp_path / "b.pop").read_bytes()


def test_different_seed_differs():
    assert synthesize(1000, seed=7) != synthesize(1000, seed=8)


def test_child_share(pop):
    n_children = sum(a.age_class == "child" for a in pop.agents)
    assert 180 <= n_children <= 220


@pytest.mark.parametrize("n", [10, 137, 1000, 5003])
def test_age_shares_within_two_points(n):
    cfg = PopulationConfig()
    p = synthesize(n, seed=1)
    counts = np.bincount(p.age, minlength=3) / n
    for share, target in zip(counts, cfg.age_shares.values()):
        assert abs(share - target) <= 0.02 + 1.0 / n  # one agent of rounding at tiny n


def test_household_size_mean():
    sizes = {1: 0.3, 2: 0.35, 3: 0.2, 4: 0.15}
    expected = sum(k * v for k, v in sizes.items())
    assert expected == pytest.approx(2.2)
    p = synthesize(10_000, seed=3)
    assert abs(np.bincount(p.household).mean() - expected) < 0.2


def test_agent_invariants(pop):
    for a in pop.agents:
        assert a.susceptibility >= 0
        assert a.household_id >= 0
        if a.age_class == "child":
            assert a.venue_kind == "school"
        elif a.age_class == "adult":
            assert a.venue_kind == "company"
        else:
            assert a.venue_kind is None and a.venue_id is None


def test_venues_filled_to_capacity():
    cfg = PopulationConfig(n_agents=3000, school_capacity=50, company_capacity=40)
    p = synthesize(config=cfg, seed=2)
    for kind, cap in (("school", 50), ("company", 40)):
        sizes = [len(m) for m in p.groups(kind).values()]
        assert all(s == cap for s in sizes[:-1])
        assert 1 <= sizes[-1] <= cap


@settings(max_examples=15, deadline=None)
@given(st.integers(10, 3000), st.integers(0, 2**31))
def test_partition_property(n, seed):
    p = synthesize(n, seed=seed)
    assert sum(len(m) for m in p.groups("household").values()) == n
    assert sum(len(m) for m in p.groups("school").values()) == int((p.age == 0).sum())
    assert sum(len(m) for m in p.groups("company").values()) == int((p.age == 1).sum())
    for kind in ("household", "school", "company"):
        for members in p.groups(kind).values():
            assert members and members == sorted(members)


def test_susceptibility_by_age_class():
    cfg = PopulationConfig(susceptibility={"child": 0.5, "adult": 1.0, "retired": 1.5})
    p = synthesize(500, seed=0, config=cfg)
    np.testing.assert_array_equal(p.susceptibility, np.array([0.5, 1.0, 1.5])[p.age])


@pytest.mark.parametrize("change", [
    {"n_agents": 5},
    {"age_shares": {"child": 1.5, "adult": 0.0, "retired": -0.5}},
    {"age_shares": {"child": 0.3, "adult": 0.6, "retired": 0.2}},
    {"household_sizes": {1: 0.5, 2: 0.4}},
    {"school_capacity": 0},
    {"company_capacity": -3},
])
def test_config_errors(change):
    cfg = dataclasses.replace(PopulationConfig(), **change)
    with pytest.raises(ConfigError):
        synthesize(config=cfg)


def test_round_trip(tmp_path, pop):
    path = tmp_path / "pop.txt"
    save(pop, path)
    assert load(path) == pop


def test_empty_file(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("")
    with pytest.raises(PopulationParseError, match="empty"):
        load(path)


def test_missing_group_reference(tmp_path, pop):
    path = tmp_path / "pop.txt"
    save(pop, path)
    lines = path.read_text().splitlines()
    n_households = pop.n_groups["household"]
    fields = lines[-1].split(",")
    fields[3] = str(n_households + 5)
    lines[-1] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(PopulationParseError, match=rf":{len(lines)}: household"):
        load(path)


def test_malformed_record(tmp_path, pop):
    path = tmp_path / "pop.txt"
    save(pop, path)
    lines = path.read_text().splitlines()
    lines[10] = "9,adult,notanumber,1,company,0"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(PopulationParseError, match=":11:"):
        load(path)


def test_population_is_immutable(pop):
    with pytest.raises(ValueError):
        pop.household[0] = 3
