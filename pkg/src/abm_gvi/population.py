"""Synthetic population of agents grouped into households, schools and companies."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

AGE_CLASSES = ("child", "adult", "retired")
LOCATION_KINDS = ("household", "school", "company")
# venue kind attended by each age class
VENUE_OF = {"child": "school", "adult": "company", "retired": None}

FILE_MAGIC = "# abm-gvi population v1"
RECORD_HEADER = "id,age_class,susceptibility,household_id,venue_kind,venue_id"


_PLURAL = {"child": "children", "adult": "adults", "retired": "retired",
           "household": "households", "school": "schools", "company": "companies"}


class ConfigError(ValueError):
    pass


class PopulationParseError(ValueError):
    pass


@dataclass(frozen=True)
class PopulationConfig:
    n_agents: int = 10_000
    age_shares: dict[str, float] = field(
        default_factory=lambda: {"child": 0.2, "adult": 0.6, "retired": 0.2})
    household_sizes: dict[int, float] = field(
        default_factory=lambda: {1: 0.3, 2: 0.35, 3: 0.2, 4: 0.15})
    school_capacity: int = 500
    company_capacity: int = 100
    susceptibility: dict[str, float] = field(
        default_factory=lambda: {"child": 1.0, "adult": 1.0, "retired": 1.0})

    def validate(self) -> None:
        if self.n_agents < 10:
            raise ConfigError("population.n_agents: must be at least 10")
        if set(self.age_shares) != set(AGE_CLASSES):
            raise ConfigError(f"population.age_shares: keys must be {list(AGE_CLASSES)}")
        for name, share in self.age_shares.items():
            if not 0 <= share <= 1:
                raise ConfigError(f"population.age_shares.{name}: {share} not in [0, 1]")
        if abs(sum(self.age_shares.values()) - 1.0) > 1e-9:
            raise ConfigError("population.age_shares: shares must sum to 1")
        if not self.household_sizes:
            raise ConfigError("population.household_sizes: empty distribution")
        for size, prob in self.household_sizes.items():
            if int(size) < 1:
                raise ConfigError(f"population.household_sizes: size {size} must be positive")
            if prob < 0:
                raise ConfigError(f"population.household_sizes.{size}: negative probability")
        if abs(sum(self.household_sizes.values()) - 1.0) > 1e-9:
            raise ConfigError("population.household_sizes: probabilities must sum to 1")
        if self.school_capacity <= 0:
            raise ConfigError("population.school_capacity: must be positive")
        if self.company_capacity <= 0:
            raise ConfigError("population.company_capacity: must be positive")
        if set(self.susceptibility) != set(AGE_CLASSES):
            raise ConfigError(f"population.susceptibility: keys must be {list(AGE_CLASSES)}")
        for name, psi in self.susceptibility.items():
            if not psi >= 0:
                raise ConfigError(f"population.susceptibility.{name}: must be >= 0")

    def digest(self) -> str:
        payload = asdict(self)
        payload["household_sizes"] = {str(k): v for k, v in sorted(self.household_sizes.items())}
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Agent:
    id: int
    age_class: str
    susceptibility: float
    household_id: int
    venue_kind: str | None
    venue_id: int | None


def _frozen(a) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


class Population:
    """Immutable agent table stored column-wise.

    ``age`` holds indices into :data:`AGE_CLASSES`; ``venue`` is the school id
    for children, the company id for adults and -1 for retired agents.
    """

    def __init__(self, age, susceptibility, household, venue, seed: int = 0,
                 config_hash: str = ""):
        self.age = _frozen(np.asarray(age, dtype=np.int8))
        self.susceptibility = _frozen(np.asarray(susceptibility, dtype=np.float64))
        self.household = _frozen(np.asarray(household, dtype=np.int64))
        self.venue = _frozen(np.asarray(venue, dtype=np.int64))
        self.seed = int(seed)
        self.config_hash = config_hash
        self._check()
        self.n_groups = {
            "household": int(self.household.max()) + 1,
            "school": int(self.venue[self.age == 0].max(initial=-1)) + 1,
            "company": int(self.venue[self.age == 1].max(initial=-1)) + 1,
        }

    def _check(self) -> None:
        n = len(self.age)
        if not (len(self.susceptibility) == len(self.household) == len(self.venue) == n):
            raise ValueError("population columns differ in length")
        if np.any(self.susceptibility < 0):
            raise ValueError("negative susceptibility")
        if np.any((self.age == 2) != (self.venue < 0)):
            raise ValueError("only retired agents may lack a venue")
        for kind, ids in (("household", self.household),
                          ("school", self.venue[self.age == 0]),
                          ("company", self.venue[self.age == 1])):
            if ids.size and np.any(np.bincount(ids) == 0):
                raise ValueError(f"empty {kind} group")

    @property
    def n_agents(self) -> int:
        return len(self.age)

    def __len__(self) -> int:
        return self.n_agents

    def agent(self, i: int) -> Agent:
        age = AGE_CLASSES[self.age[i]]
        kind = VENUE_OF[age]
        return Agent(int(i), age, float(self.susceptibility[i]), int(self.household[i]),
                     kind, None if kind is None else int(self.venue[i]))

    @property
    def agents(self) -> list[Agent]:
        return [self.agent(i) for i in range(self.n_agents)]

    def members(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        """Agent ids belonging to groups of ``kind`` and their group ids."""
        if kind == "household":
            ids = np.arange(self.n_agents)
            return ids, self.household
        age_index = {"school": 0, "company": 1}[kind]
        ids = np.flatnonzero(self.age == age_index)
        return ids, self.venue[ids]

    def groups(self, kind: str) -> dict[int, list[int]]:
        ids, group = self.members(kind)
        out: dict[int, list[int]] = {g: [] for g in range(self.n_groups[kind])}
        for agent_id, g in zip(ids.tolist(), group.tolist()):
            out[g].append(agent_id)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Population):
            return NotImplemented
        return (self.seed == other.seed and self.config_hash == other.config_hash
                and np.array_equal(self.age, other.age)
                and np.array_equal(self.susceptibility, other.susceptibility)
                and np.array_equal(self.household, other.household)
                and np.array_equal(self.venue, other.venue))

    def summary(self) -> dict[str, int]:
        counts = np.bincount(self.age, minlength=3)
        out = {"agents": self.n_agents}
        out.update({_PLURAL[name]: int(c)
                    for name, c in zip(AGE_CLASSES, counts)})
        out.update({_PLURAL[kind]: n
                    for kind, n in self.n_groups.items()})
        return out


def _exact_counts(n: int, shares: dict[str, float]) -> np.ndarray:
    # largest-remainder rounding keeps every class within one agent of its target
    raw = np.array([shares[name] * n for name in AGE_CLASSES])
    counts = np.floor(raw).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def synthesize(n_agents: int | None = None, seed: int = 0,
               config: PopulationConfig | None = None) -> Population:
    """Deterministically build a population from ``(n_agents, seed, config)``."""
    config = config or PopulationConfig()
    if n_agents is not None and n_agents != config.n_agents:
        config = PopulationConfig(**{**asdict(config), "n_agents": n_agents})
    config.validate()
    n = config.n_agents
    rng = np.random.default_rng(seed)

    counts = _exact_counts(n, config.age_shares)
    age = rng.permutation(np.repeat(np.arange(3, dtype=np.int8), counts))

    sizes = np.array(sorted(config.household_sizes), dtype=int)
    probs = np.array([config.household_sizes[s] for s in sizes])
    household = np.empty(n, dtype=np.int64)
    start, hid = 0, 0
    while start < n:
        size = int(rng.choice(sizes, p=probs))
        household[start:start + size] = hid
        start += size
        hid += 1

    venue = np.full(n, -1, dtype=np.int64)
    for age_index, capacity in ((0, config.school_capacity), (1, config.company_capacity)):
        ids = np.flatnonzero(age == age_index)
        venue[ids] = np.arange(len(ids)) // capacity

    psi = np.array([config.susceptibility[name] for name in AGE_CLASSES])[age]
    return Population(age, psi, household, venue, seed=seed, config_hash=config.digest())


def save(population: Population, path) -> None:
    lines = [
        FILE_MAGIC,
        f"n_agents={population.n_agents}",
        f"seed={population.seed}",
        f"config_hash={population.config_hash}",
        *(f"n_{_PLURAL[kind]}={population.n_groups[kind]}" for kind in LOCATION_KINDS),
        RECORD_HEADER,
    ]
    for i in range(population.n_agents):
        a = population.agent(i)
        venue_id = "" if a.venue_id is None else str(a.venue_id)
        lines.append(f"{a.id},{a.age_class},{a.susceptibility!r},{a.household_id},"
                     f"{a.venue_kind or 'none'},{venue_id}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load(path) -> Population:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise PopulationParseError(f"{path}: empty file")
    if lines[0] != FILE_MAGIC:
        raise PopulationParseError(f"{path}:1: missing header {FILE_MAGIC!r}")

    expected_keys = ["n_agents", "seed", "config_hash",
                     *(f"n_{_PLURAL[kind]}" for kind in LOCATION_KINDS)]
    header: dict[str, str] = {}
    for lineno, key in enumerate(expected_keys, start=2):
        if lineno > len(lines):
            raise PopulationParseError(f"{path}:{lineno}: truncated header")
        name, sep, value = lines[lineno - 1].partition("=")
        if not sep or name != key:
            raise PopulationParseError(f"{path}:{lineno}: expected '{key}=...'")
        header[key] = value
    try:
        n = int(header["n_agents"])
        seed = int(header["seed"])
        n_groups = {kind: int(header[f"n_{_PLURAL[kind]}"]) for kind in LOCATION_KINDS}
    except ValueError as err:
        raise PopulationParseError(f"{path}: bad header value ({err})") from None

    first = len(expected_keys) + 2
    if len(lines) < first or lines[first - 1] != RECORD_HEADER:
        raise PopulationParseError(f"{path}:{first}: expected column header {RECORD_HEADER!r}")
    records = lines[first:]
    if len(records) != n:
        raise PopulationParseError(f"{path}: header declares {n} agents, found {len(records)}")

    age = np.empty(n, dtype=np.int8)
    psi = np.empty(n)
    household = np.empty(n, dtype=np.int64)
    venue = np.empty(n, dtype=np.int64)
    for offset, line in enumerate(records):
        lineno = first + offset + 1
        fields = line.split(",")
        if len(fields) != 6:
            raise PopulationParseError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
        try:
            agent_id = int(fields[0])
            age_index = AGE_CLASSES.index(fields[1])
            psi[offset] = float(fields[2])
            household[offset] = int(fields[3])
            venue_kind = None if fields[4] == "none" else fields[4]
            venue[offset] = int(fields[5]) if venue_kind else -1
        except ValueError as err:
            raise PopulationParseError(f"{path}:{lineno}: {err}") from None
        if agent_id != offset:
            raise PopulationParseError(f"{path}:{lineno}: agent ids must run 0..n-1 in order")
        if venue_kind != VENUE_OF[fields[1]]:
            raise PopulationParseError(
                f"{path}:{lineno}: {fields[1]} must have venue kind {VENUE_OF[fields[1]] or 'none'}")
        if not 0 <= household[offset] < n_groups["household"]:
            raise PopulationParseError(
                f"{path}:{lineno}: household {household[offset]} is not declared")
        if venue_kind and not 0 <= venue[offset] < n_groups[venue_kind]:
            raise PopulationParseError(
                f"{path}:{lineno}: {venue_kind} {venue[offset]} is not declared")
        age[offset] = age_index
    try:
        population = Population(age, psi, household, venue, seed=seed,
                                config_hash=header["config_hash"])
    except ValueError as err:
        raise PopulationParseError(f"{path}: {err}") from None
    if population.n_groups != n_groups:
        raise PopulationParseError(f"{path}: declared group counts {n_groups} do not match records")
    return population
