"""Generalised variational inference for the simulator's transmission intensities.

The objective for a flow ``q`` is

    L(q) = E_q[ score(x, beta) ] + D(q || prior)

with ``score`` the w-scaled squared error between observed and simulated log
daily infections, and ``D`` the Monte-Carlo KL divergence.  Gradients reach
the flow parameters through reparameterised samples and through the
simulator's relaxed infection draws.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flow import FlowSample, NeuralSplineFlow
from .population import ConfigError
from .simulator import Trajectory

log = logging.getLogger(__name__)

Simulator = Callable[[object, object], Trajectory]


class SupportViolation(ArithmeticError):
    pass


class TrainingError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ScoringRuleConfig:
    weight: float = 1e-2
    horizon: int | None = None  # score only the first `horizon` days; None = all
    replicates: int = 1

    def validate(self) -> None:
        if not self.weight > 0:
            raise ConfigError("scoring.weight: must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("scoring.horizon: must be at least 1")
        if self.replicates < 1:
            raise ConfigError("scoring.replicates: must be at least 1")


@dataclass(frozen=True)
class KlEstimatorConfig:
    samples: int = 10_000

    def validate(self) -> None:
        if self.samples < 1:
            raise ConfigError("kl.samples: must be at least 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    validation_batch_size: int = 10
    max_epochs: int = 125
    learning_rate: float = 1e-3
    clip_norm: float = 10.0
    early_stop_window: int = 10
    early_stop_tol: float = 0.01
    simulation_budget: int = 2500
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.batch_size < 1 or self.validation_batch_size < 1:
            raise ConfigError("train.batch_size: must be at least 1")
        if self.max_epochs < 1:
            raise ConfigError("train.max_epochs: must be at least 1")
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate: must be non-negative")
        if not self.clip_norm > 0:
            raise ConfigError("train.clip_norm: must be positive")
        if self.early_stop_window < 1 or not self.early_stop_tol > 0:
            raise ConfigError("train.early_stop_*: window >= 1 and tol > 0 required")
        if self.simulation_budget < self.batch_size:
            raise ConfigError("train.simulation_budget: must cover at least one batch")
        if self.threads < 1:
            raise ConfigError("train.threads: must be at least 1")


def seed_for(*key: int) -> np.random.SeedSequence:
    """Independent noise stream for a tuple of non-negative integers."""
    return np.random.SeedSequence([int(k) for k in key])


# --- scoring rule ---------------------------------------------------------

def score(observed: Trajectory, theta, cfg: ScoringRuleConfig, seeds,
          simulator: Simulator) -> Tensor:
    """Mean over replicates of ``sum_t (x_t - x~_t)^2 / w``.

    ``simulator(theta, seed)`` returns a :class:`Trajectory`; one run per
    entry of ``seeds``.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one simulator seed")
    T = observed.horizon if cfg.horizon is None else cfg.horizon
    if T > observed.horizon:
        raise ValueError(f"scoring horizon {T} exceeds the observed {observed.horizon} days")
    x = observed.log_series.values[:T]
    total = None
    for s in seeds:
        sim = simulator(theta, s)
        if sim.horizon != observed.horizon:
            raise ValueError(f"simulated horizon {sim.horizon} != observed {observed.horizon}")
        resid = sim.log_series[:T] - x
        term = ad.sum_(resid * resid)
        total = term if total is None else total + term
    return total * (1.0 / (cfg.weight * len(seeds)))


# --- divergence ----------------------------------------------------------------

@dataclass
class KlEstimate:
    value: Tensor
    stderr: float


class Normal:
    """Diagonal Gaussian with the flow's sampling interface (test harness)."""

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(std, dtype=np.float64))

    def log_prob(self, x) -> np.ndarray:
        x = np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
        x = x.reshape(-1, len(self.mean))
        r = (x - self.mean) / self.std
        return (-0.5 * r * r - np.log(self.std) - 0.5 * math.log(2 * math.pi)).sum(axis=1)

    def sample(self, n: int, seed=None, params=None) -> FlowSample:
        eps = np.random.default_rng(seed).standard_normal((n, len(self.mean)))
        x = self.mean + self.std * eps
        return FlowSample(Tensor(x), Tensor(self.log_prob(x)), Tensor(x), eps)


class Divergence(Protocol):
    def __call__(self, q, prior, seed, params=None) -> KlEstimate: ...


def kl_estimate(q, prior, samples: int, seed=None, params=None) -> KlEstimate:
    """``(1/R) sum_r [log q(theta_r) - log prior(theta_r)]`` with theta_r ~ q."""
    if samples < 1:
        raise ValueError("need at least one sample")
    draw = q.sample(samples, seed, params=params)
    log_prior = prior.log_prob(draw.beta)
    if not np.all(np.isfinite(log_prior)):
        bad = int(np.flatnonzero(~np.isfinite(log_prior))[0])
        raise SupportViolation(f"sample {draw.beta.values[bad]} lies outside the prior support")
    diff = draw.log_q - log_prior
    stderr = float(np.std(diff.values, ddof=1) / math.sqrt(samples)) if samples > 1 else math.inf
    return KlEstimate(ad.mean(diff), stderr)


@dataclass(frozen=True)
class KLDivergence:
    samples: int = 10_000

    def __call__(self, q, prior, seed, params=None) -> KlEstimate:
        return kl_estimate(q, prior, self.samples, seed, params)


# --- objective -------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: Tensor
    score_term: Tensor
    kl_term: Tensor
    kl_stderr: float
    simulations: int
    theta: np.ndarray


def _score_on_own_tape(observed, beta, cfg, seeds, simulator):
    tape = ad.Tape()
    b = tape.variable(beta)
    s = score(observed, b, cfg, seeds, simulator)
    if s.tape is None:  # simulator ignored theta
        return float(s.values), np.zeros_like(b.values)
    return float(s.values), tape.backward(s)[b]


def gvi_loss(flow: NeuralSplineFlow, observed: Trajectory, simulator: Simulator, prior,
             scoring: ScoringRuleConfig, divergence: Divergence, key: tuple[int, ...],
             batch_size: int, params=None, include_score: bool = True,
             threads: int = 1) -> LossBreakdown:
    """Monte-Carlo GVI objective for one batch of flow samples.

    Every random stream is derived from ``key``, so equal keys give equal
    noise (common random numbers).  Each simulation is differentiated on its
    own tape and spliced into the main one, which lets replicates run on
    separate threads.
    """
    draw = flow.sample(batch_size, seed_for(*key, 0), params=params)
    seeds = [[seed_for(*key, 1, b, m) for m in range(scoring.replicates)]
             for b in range(batch_size)]
    score_term = Tensor(0.0)
    sims = 0
    if include_score:
        betas = draw.beta.values
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(
                    lambda b: _score_on_own_tape(observed, betas[b], scoring, seeds[b], simulator),
                    range(batch_size)))
        else:
            results = [_score_on_own_tape(observed, betas[b], scoring, seeds[b], simulator)
                       for b in range(batch_size)]
        terms = []
        for b, (value, grad) in enumerate(results):
            row = draw.beta[b]
            terms.append(ad.custom([row], value, lambda g, grad=grad: (g * grad,), kind="score"))
        score_term = ad.sum_(ad.stack(terms)) * (1.0 / batch_size)
        sims = batch_size * scoring.replicates
    kl = divergence(flow, prior, seed_for(*key, 2), params)
    total = score_term + kl.value
    return LossBreakdown(total, score_term, kl.value, kl.stderr, sims, draw.beta.values)


# --- optimiser -------------------------------------------------------------

class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            params[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# --- training --------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    score_term: float
    kl_term: float
    total_loss: float
    val_loss: float
    sims_used: int


LOG_HEADER = "epoch,score_term,kl_term,total_loss,val_loss,sims_used"


@dataclass
class TrainResult:
    best: NeuralSplineFlow
    final: NeuralSplineFlow
    log: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1

    @property
    def sims_used(self) -> int:
        return sum(r.sims_used for r in self.log)

    def write_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(LOG_HEADER + "\n")
            for r in self.log:
                fh.write(f"{r.epoch},{r.score_term:.6f},{r.kl_term:.6f},{r.total_loss:.6f},"
                         f"{r.val_loss:.6f},{r.sims_used}\n")


def _plateaued(values: list[float], window: int, tol: float) -> bool:
    if len(values) < 2 * window:
        return False
    prev = float(np.mean(values[-2 * window:-window]))
    cur = float(np.mean(values[-window:]))
    return abs(cur - prev) <= tol * abs(prev)


def train(flow: NeuralSplineFlow, observed: Trajectory, simulator: Simulator, prior,
          cfg: TrainConfig | None = None, scoring: ScoringRuleConfig | None = None,
          kl: KlEstimatorConfig | None = None, include_score: bool = True,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fit ``flow`` in place by clipped Adam on the GVI objective.

    Stops on a plateau of the windowed validation loss, after
    ``cfg.max_epochs``, or when the next epoch would exceed the simulation
    budget.  Returns the best-validation and final flows plus the epoch log.
    """
    cfg = cfg or TrainConfig()
    scoring = scoring or ScoringRuleConfig()
    kl = kl or KlEstimatorConfig()
    for c in (cfg, scoring, kl):
        c.validate()
    divergence = KLDivergence(kl.samples)
    per_epoch = (cfg.batch_size + cfg.validation_batch_size) * scoring.replicates
    if not include_score:
        per_epoch = 0

    opt = Adam(cfg.learning_rate)
    result = TrainResult(best=flow.copy(), final=flow)
    best_val = math.inf
    val_history: list[float] = []
    used = 0
    result.stop_reason = "max_epochs"
    for epoch in range(cfg.max_epochs):
        if used + per_epoch > cfg.simulation_budget:
            result.stop_reason = "budget"
            break
        tape = ad.Tape()
        params = flow.bind(tape)
        loss = gvi_loss(flow, observed, simulator, prior, scoring, divergence,
                        (cfg.seed, epoch, 0), cfg.batch_size, params=params,
                        include_score=include_score, threads=cfg.threads)
        if not np.isfinite(loss.total.values):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        adj = tape.backward(loss.total)
        grads = {k: adj[v] for k, v in params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite gradient at epoch {epoch}")
        clip_global_norm(grads, cfg.clip_norm)
        opt.step(flow.params, grads)

        val = gvi_loss(flow, observed, simulator, prior, scoring, divergence,
                       (cfg.seed, epoch, 1), cfg.validation_batch_size,
                       include_score=include_score, threads=cfg.threads)
        val_loss = float(val.total.values)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        used += loss.simulations + val.simulations
        record = EpochRecord(epoch, float(loss.score_term.values), float(loss.kl_term.values),
                             float(loss.total.values), val_loss,
                             loss.simulations + val.simulations)
        result.log.append(record)
        log.info("epoch %d score %.3f kl %.4f val %.3f", epoch, record.score_term,
                 record.kl_term, val_loss)
        if on_epoch is not None:
            on_epoch(record)
        if val_loss < best_val:
            best_val = val_loss
            result.best = flow.copy()
            result.best_epoch = epoch
        val_history.append(val_loss)
        if _plateaued(val_history, cfg.early_stop_window, cfg.early_stop_tol):
            result.stop_reason = "converged"
            break
    result.final = flow
    return result
