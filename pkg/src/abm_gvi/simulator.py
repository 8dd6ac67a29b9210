"""Differentiable stochastic epidemic on a household/school/company population.

Each day every susceptible agent accumulates a hazard

    lambda = sum over its locations L of  psi * beta_L * dt_L * Lambda_g(L)

where ``Lambda_g`` is the summed infectiousness of the infected members of the
agent's group of kind L, and is infected with probability ``1 - exp(-lambda)``.
With ``contact_scaling="group_size"`` (the default) ``Lambda_g`` is divided by
the group size, so transmission is frequency-dependent; with
``"none"`` the raw sum is used.
Infection events are exact Bernoulli draws driven by fixed logistic noise, so
the forward pass is binary.  The backward pass is chosen by ``surrogate``:

* ``"expected"`` (default): adjoints follow the expected update
  ``S * p`` / ``S * (1 - p)`` at the realised state, a straight-through
  estimator whose surrogate is the infection probability itself.
* ``"relaxed"``: adjoints flow through ``sigmoid((logit p + noise) / tau)``.

``relaxation="soft"`` replaces the binary draws by that sigmoid in the forward
pass as well, which makes a run an ordinary smooth function of beta (used for
finite-difference checks).  An agent's own infectiousness is left out of its
hazard; it never matters in the forward pass (infected agents are not
susceptible) but would add a spurious self-infection loop to the adjoints.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, NumericError, Tensor
from .population import LOCATION_KINDS, ConfigError, Population

BETA_MAX = 2.0
PROB_EPS = 1e-7


@dataclass(frozen=True)
class SimConfig:
    dt: dict[str, float] = field(
        default_factory=lambda: {"household": 1.0, "school": 0.66, "company": 0.66})
    peak_time: float = 2.0
    infectious_days: float = 14.0
    temperature: float = 0.1
    seed_fraction: float = 0.005
    horizon: int = 30
    seed: int = 0
    relaxation: str = "straight_through"
    contact_scaling: str = "group_size"
    surrogate: str = "expected"

    def validate(self) -> None:
        if set(self.dt) != set(LOCATION_KINDS):
            raise ConfigError(f"simulator.dt: keys must be {list(LOCATION_KINDS)}")
        for kind, value in self.dt.items():
            if not value > 0:
                raise ConfigError(f"simulator.dt.{kind}: must be positive")
        if not 0 < self.peak_time <= self.infectious_days:
            raise ConfigError("simulator.peak_time: need 0 < peak_time <= infectious_days")
        if not self.temperature > 0:
            raise ConfigError("simulator.temperature: must be positive")
        if not 0 < self.seed_fraction < 1:
            raise ConfigError("simulator.seed_fraction: must lie in (0, 1)")
        if self.horizon < 1:
            raise ConfigError("simulator.horizon: must be at least 1")
        if self.relaxation not in ("straight_through", "soft"):
            raise ConfigError("simulator.relaxation: 'straight_through' or 'soft'")
        if self.surrogate not in ("expected", "relaxed"):
            raise ConfigError("simulator.surrogate: 'expected' or 'relaxed'")
        if self.contact_scaling not in ("group_size", "none"):
            raise ConfigError("simulator.contact_scaling: 'group_size' or 'none'")


class ThetaVector:
    """Transmission intensities (household, school, company).

    Stored unconstrained; ``constrained = BETA_MAX * sigmoid(unconstrained)``.
    """

    def __init__(self, unconstrained):
        u = unconstrained if isinstance(unconstrained, Tensor) else Tensor(unconstrained)
        if u.shape != (3,):
            raise ValueError(f"theta must have 3 entries, got shape {u.shape}")
        self.unconstrained = u

    @classmethod
    def from_constrained(cls, beta) -> "ThetaVector":
        b = np.asarray(beta.values if isinstance(beta, Tensor) else beta, dtype=np.float64)
        if b.shape != (3,) or np.any(b <= 0) or np.any(b >= BETA_MAX):
            raise DomainError(f"beta must have 3 entries inside (0, {BETA_MAX}), got {b}")
        r = b / BETA_MAX
        return cls(np.log(r) - np.log1p(-r))

    @property
    def constrained(self) -> Tensor:
        return BETA_MAX * ad.sigmoid(self.unconstrained)

    @property
    def beta(self) -> np.ndarray:
        return self.constrained.values

    def __repr__(self) -> str:
        h, s, c = self.beta
        return f"ThetaVector(household={h:.6g}, school={s:.6g}, company={c:.6g})"


@dataclass
class Trajectory:
    """Daily new infections ``c_t`` (t = 1..T) and ``x_t = log(c_t + 1)``."""

    new_infections: Tensor
    infection_day: np.ndarray | None = None
    n_seeds: int = 0

    def __post_init__(self):
        if not isinstance(self.new_infections, Tensor):
            self.new_infections = Tensor(self.new_infections)
        if np.any(self.new_infections.values < 0):
            raise ValueError("negative infection counts")
        self.log_series = ad.log(self.new_infections + 1.0)

    @property
    def horizon(self) -> int:
        return len(self.new_infections)

    @property
    def counts(self) -> np.ndarray:
        return self.new_infections.values

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("day,new_infections,log_new_infections\n")
            for t, (c, x) in enumerate(zip(self.counts, self.log_series.values), start=1):
                fh.write(f"{t},{c:.6f},{x:.6f}\n")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["day", "new_infections", "log_new_infections"]:
                raise ValueError(f"{path}:1: bad header {header}")
            counts = []
            for row_no, row in enumerate(reader, start=2):
                try:
                    day, c, _ = row
                    if int(day) != row_no - 1:
                        raise ValueError(f"expected day {row_no - 1}, got {day}")
                    value = float(c)
                except ValueError as err:
                    raise ValueError(f"{path}:{row_no}: {err}") from None
                if not value >= 0:
                    raise ValueError(f"{path}:{row_no}: new_infections must be >= 0")
                counts.append(value)
        if not counts:
            raise ValueError(f"{path}: no data rows")
        return cls(np.array(counts))


def infectious_profile(s, cfg: SimConfig):
    """``(s/a) exp(1 - s/a)`` on ``0 < s <= D``, zero elsewhere; peaks at 1."""
    s = np.asarray(s, dtype=np.float64)
    r = s / cfg.peak_time
    out = np.where((s > 0) & (s <= cfg.infectious_days), r * np.exp(1.0 - r), 0.0)
    return float(out) if out.ndim == 0 else out


def infection_probability(psi, beta, dt, load):
    """``1 - exp(-psi * beta * dt * load)``; tensors keep their adjoints."""
    for name, v in (("psi", psi), ("beta", beta), ("dt", dt), ("load", load)):
        vals = v.values if isinstance(v, Tensor) else np.asarray(v)
        if np.any(vals < 0):
            raise DomainError(f"{name} must be non-negative")
    if not any(isinstance(v, Tensor) for v in (psi, beta, dt, load)):
        return -math.expm1(-psi * beta * dt * load)
    return 1.0 - ad.exp(-(ad.mul(ad.mul(ad.mul(psi, beta), dt), load)))


def logistic_noise(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.log(u) - np.log1p(-u)


def _exact_logits(hazard: np.ndarray) -> np.ndarray:
    # logit(1 - exp(-h)) without clamping; -inf where the hazard is zero
    with np.errstate(divide="ignore"):
        return np.log(-np.expm1(-hazard)) + hazard


def relaxed_bernoulli(p, u, temperature: float, hard: bool = True) -> Tensor:
    """Binary draw with marginal Bernoulli(p), differentiable in ``p``.

    Soft value ``y = sigmoid((logit p + logit u) / temperature)``; with
    ``hard=True`` the forward value is ``y > 0.5`` and the adjoint is dy.
    """
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    p = ad.clamp_max(ad.clamp_min(p, PROB_EPS), 1.0 - PROB_EPS)
    logits = ad.log(p) - ad.log(1.0 - p)
    noise = logistic_noise(u)
    soft = ad.sigmoid((logits + noise) * (1.0 / temperature))
    if not hard:
        return soft
    return ad.straight_through(soft, (soft.values > 0.5).astype(np.float64))


class _Contacts:
    """Precomputed index arrays for one population."""

    def __init__(self, population: Population):
        self.n = population.n_agents
        self.kinds = []
        for kind in LOCATION_KINDS:
            ids, groups = population.members(kind)
            if ids.size == 0:
                continue
            sizes = np.bincount(groups, minlength=population.n_groups[kind])
            self.kinds.append((kind, ids, groups, population.n_groups[kind],
                               population.susceptibility[ids], sizes[groups]))


def _as_beta(theta) -> Tensor:
    if isinstance(theta, ThetaVector):
        beta = theta.constrained
    elif isinstance(theta, Tensor):
        beta = theta
    else:
        beta = Tensor(theta)
    if beta.shape != (3,):
        raise ValueError(f"theta must have 3 entries, got shape {beta.shape}")
    if np.any(beta.values <= 0) or np.any(beta.values >= BETA_MAX):
        raise DomainError(f"beta {beta.values} outside (0, {BETA_MAX})")
    return beta


def simulate(population: Population, theta, cfg: SimConfig | None = None,
             seed=None) -> Trajectory:
    """Run ``cfg.horizon`` days and return the daily new-infection series.

    ``theta`` is a :class:`ThetaVector`, or a length-3 tensor/array of
    constrained intensities.  ``seed`` (default ``cfg.seed``) fixes the
    initial infections and every infection draw.
    """
    cfg = cfg or SimConfig()
    cfg.validate()
    beta = _as_beta(theta)
    beta_of = dict(zip(LOCATION_KINDS, (beta[0], beta[1], beta[2])))
    contacts = _Contacts(population)
    n, horizon = contacts.n, cfg.horizon
    rng = np.random.default_rng(cfg.seed if seed is None else seed)

    n_seeds = math.ceil(cfg.seed_fraction * n)
    seeded = rng.permutation(n)[:n_seeds]
    noise = logistic_noise(np.clip(rng.random((horizon, n)), 1e-16, 1 - 1e-16))

    profile = infectious_profile(np.arange(horizon + 1), cfg)
    window = int(math.floor(cfg.infectious_days))
    hard = cfg.relaxation != "soft"

    infection_day = np.full(n, -1, dtype=np.int64)
    infection_day[seeded] = 0
    seed_new = np.zeros(n)
    seed_new[seeded] = 1.0
    history: list = [seed_new]  # history[d] = new infections on day d
    susceptible = Tensor(1.0 - seed_new)
    daily = []

    for t in range(1, horizon + 1):
        load = None
        for d in range(max(0, t - window), t):
            w = profile[t - d]
            if w == 0.0:
                continue
            term = history[d] * w
            load = term if load is None else load + term
        if load is None:
            load = Tensor(np.zeros(n))

        hazard = None
        for kind, ids, groups, n_groups, psi, size in contacts.kinds:
            member_load = load if kind == "household" else ad.index_select(load, ids)
            group_load = ad.segment_sum(member_load, groups, n_groups)
            if not np.all(np.isfinite(group_load.values)):
                bad = int(np.flatnonzero(~np.isfinite(group_load.values))[0])
                raise NumericError(f"non-finite infectious load on day {t} in {kind} {bad}")
            weight = psi * cfg.dt[kind]
            if cfg.contact_scaling == "group_size":
                weight = weight / size
            # an agent's own load never reaches it while it is susceptible;
            # dropping it keeps the backward pass free of self-infection loops
            others = ad.index_select(group_load, groups) - member_load
            rate = ad.clamp_min(others, 0.0) * weight * beta_of[kind]
            if kind != "household":
                rate = ad.segment_sum(rate, ids, n)
            hazard = rate if hazard is None else hazard + rate
        if not np.all(np.isfinite(hazard.values)):
            bad = int(np.flatnonzero(~np.isfinite(hazard.values))[0])
            raise NumericError(f"non-finite hazard on day {t} for agent {bad} "
                               f"(household {population.household[bad]})")

        fire = (_exact_logits(hazard.values) + noise[t - 1] > 0).astype(np.float64)
        if hard and cfg.surrogate == "expected":
            # binary forward; backward follows the expected update S*p, S*(1-p)
            prob = 1.0 - ad.exp(-hazard)
            alive = susceptible.values
            new = ad.straight_through(susceptible * prob, alive * fire)
            susceptible = ad.straight_through(susceptible * (1.0 - prob), alive * (1.0 - fire))
        else:
            # logit(p) with p = 1 - exp(-hazard) clamped to [eps, 1 - eps]
            p = ad.clamp_min(1.0 - ad.exp(-hazard), PROB_EPS)
            q = ad.clamp_min(ad.exp(-hazard), PROB_EPS)
            soft = ad.sigmoid((ad.log(p) - ad.log(q) + noise[t - 1]) * (1.0 / cfg.temperature))
            draw = ad.straight_through(soft, fire) if hard else soft
            new = susceptible * draw
            susceptible = susceptible * (1.0 - draw)
        history.append(new)
        if hard:
            infection_day[new.values > 0.5] = t
        daily.append(ad.sum_(new))

    return Trajectory(ad.stack(daily), infection_day=infection_day, n_seeds=n_seeds)
