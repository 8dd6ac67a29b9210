"""Command-line pipeline: synthesise, simulate, calibrate, sample, predict.

Every command reads one TOML run config (see ``configs/reference.toml``) and
writes plain CSV/JSON/npz files.  Exit status is 0 on success, 2 for bad input
or configuration and 3 for numerical failures; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import gvi
from .autodiff import NumericError
from .flow import ArchitectureMismatch, FlowArchitecture, NeuralSplineFlow, UniformPrior
from .population import ConfigError, Population, PopulationConfig, load, save, synthesize
from .simulator import BETA_MAX, SimConfig, Trajectory, simulate

OUTPUT_DIR_ENV = "ABM_GVI_OUTPUT_DIR"
SUMMARY_SAMPLES = 10_000
TRUTH = (0.9, 0.6, 0.3)

log = logging.getLogger("abm_gvi")


@dataclass(frozen=True)
class RunConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    population_seed: int = 0
    simulator: SimConfig = field(default_factory=SimConfig)
    flow: FlowArchitecture = field(default_factory=FlowArchitecture)
    scoring: gvi.ScoringRuleConfig = field(default_factory=gvi.ScoringRuleConfig)
    kl: gvi.KlEstimatorConfig = field(default_factory=gvi.KlEstimatorConfig)
    train: gvi.TrainConfig = field(default_factory=gvi.TrainConfig)
    seed: int = 0
    output_dir: str = "runs"

    def validate(self) -> None:
        for section in (self.population, self.simulator, self.flow, self.scoring, self.kl,
                        self.train):
            section.validate()

    def to_dict(self) -> dict[str, Any]:
        out = {"seed": self.seed, "output_dir": self.output_dir}
        pop = dataclasses.asdict(self.population)
        pop["household_sizes"] = {str(k): v for k, v in pop["household_sizes"].items()}
        pop["seed"] = self.population_seed
        out["population"] = pop
        for name in ("simulator", "flow", "scoring", "kl", "train"):
            out[name] = dataclasses.asdict(getattr(self, name))
        out["flow"]["hidden"] = list(out["flow"]["hidden"])
        return out


_SECTIONS = {
    "population": PopulationConfig,
    "simulator": SimConfig,
    "flow": FlowArchitecture,
    "scoring": gvi.ScoringRuleConfig,
    "kl": gvi.KlEstimatorConfig,
    "train": gvi.TrainConfig,
}


def _section(name: str, cls, table: Any):
    if not isinstance(table, dict):
        raise ConfigError(f"{name}: expected a table")
    table = dict(table)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in table:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
    if name == "population" and "household_sizes" in table:
        try:
            table["household_sizes"] = {int(k): float(v)
                                        for k, v in table["household_sizes"].items()}
        except (TypeError, ValueError, AttributeError):
            raise ConfigError("population.household_sizes: keys must be integers") from None
    if name == "flow" and "hidden" in table:
        table["hidden"] = tuple(table["hidden"])
    if name == "scoring" and table.get("horizon") == 0:
        table["horizon"] = None  # TOML has no null; 0 means the full series
    for key, value in table.items():
        default = known[key].default
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{name}.{key}: expected a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key}: expected a number")
            if isinstance(default, int) and not isinstance(value, int):
                raise ConfigError(f"{name}.{key}: expected an integer")
    try:
        return cls(**table)
    except TypeError as err:
        raise ConfigError(f"{name}: {err}") from None


def parse_config(data: dict[str, Any]) -> RunConfig:
    """Build a validated :class:`RunConfig`; unknown keys are errors."""
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in ("seed", "output_dir"):
            kwargs[key] = value
        elif key in _SECTIONS:
            table = dict(value) if isinstance(value, dict) else value
            if key == "population" and isinstance(table, dict) and "seed" in table:
                kwargs["population_seed"] = table.pop("seed")
            kwargs[key] = _section(key, _SECTIONS[key], table)
        else:
            raise ConfigError(f"{key}: unknown key")
    if not isinstance(kwargs.get("seed", 0), int) or not isinstance(
            kwargs.get("population_seed", 0), int):
        raise ConfigError("seed: expected an integer")
    if not isinstance(kwargs.get("output_dir", ""), str):
        raise ConfigError("output_dir: expected a string")
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return parse_config(data)


# --- pipeline pieces shared by the commands and the tests ------------------------

def build_population(cfg: RunConfig, path=None) -> Population:
    if path is not None:
        return load(path)
    return synthesize(seed=cfg.population_seed, config=cfg.population)


def make_simulator(population: Population, sim_cfg: SimConfig):
    return lambda theta, seed: simulate(population, theta, sim_cfg, seed=seed)


def posterior_summary(flow: NeuralSplineFlow, seed: int, n: int = SUMMARY_SAMPLES) -> dict:
    beta = flow.sample(n, gvi.seed_for(seed, 7)).beta.values
    corr = np.corrcoef(beta.T)
    return {
        "mean": beta.mean(axis=0).tolist(),
        "std": beta.std(axis=0, ddof=1).tolist(),
        "corr_household_company": float(corr[0, 2]),
        "corr": corr.tolist(),
        "samples": n,
    }


def predictive(sampler, population: Population, sim_cfg: SimConfig, n: int,
               seed: int) -> np.ndarray:
    """``(n, T)`` daily counts simulated at ``n`` draws from ``sampler``."""
    beta = sampler.sample(n, gvi.seed_for(seed, 0)).beta.values
    # keep prior draws off the closed boundary
    beta = np.clip(beta, 1e-9, BETA_MAX - 1e-9)
    return np.stack([simulate(population, beta[r], sim_cfg, seed=gvi.seed_for(seed, 1, r)).counts
                     for r in range(n)])


# --- commands -------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6f}"


def cmd_synth_pop(args, cfg: RunConfig) -> None:
    pop = build_population(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save(pop, out)
    print(", ".join(f"{v} {k}" for k, v in pop.summary().items()) + f" -> {out}",
          file=sys.stderr)


def cmd_gen_truth(args, cfg: RunConfig) -> None:
    pop = build_population(cfg, args.population)
    traj = simulate(pop, np.array(args.theta, dtype=np.float64), cfg.simulator, seed=cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out)
    print(f"{traj.horizon} days, {int(traj.counts.sum())} infections -> {out}", file=sys.stderr)


def _output_dir(args, cfg: RunConfig) -> Path:
    if getattr(args, "out_dir", None):
        return Path(args.out_dir)
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def cmd_calibrate(args, cfg: RunConfig) -> None:
    observed = Trajectory.from_csv(args.data)
    if observed.horizon != cfg.simulator.horizon:
        raise ConfigError(f"{args.data}: {observed.horizon} days but simulator.horizon is "
                          f"{cfg.simulator.horizon}")
    pop = build_population(cfg, args.population)
    out = _output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    flow = NeuralSplineFlow(cfg.flow, seed=cfg.seed)
    result = gvi.train(flow, observed, make_simulator(pop, cfg.simulator), UniformPrior(),
                       train_cfg, cfg.scoring, cfg.kl,
                       on_epoch=lambda r: log.info(
                           "epoch %3d  score %10.3f  kl %8.4f  val %10.3f",
                           r.epoch, r.score_term, r.kl_term, r.val_loss))
    result.write_log(out / "training_log.csv")
    meta = {"best_epoch": result.best_epoch, "epochs": len(result.log),
            "stop_reason": result.stop_reason}
    result.best.save(out / "best.npz", meta)
    result.final.save(out / "final.npz", meta)
    summary = {
        "posterior": posterior_summary(result.best, cfg.seed),
        "final_posterior": posterior_summary(result.final, cfg.seed),
        "sims_used": result.sims_used,
        "simulation_budget": cfg.train.simulation_budget,
        **meta,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    means = ", ".join(f"{m:.3f}" for m in summary["posterior"]["mean"])
    print(f"posterior mean ({means}); {result.sims_used} simulations; {result.stop_reason}",
          file=sys.stderr)


def _load_flow(path, cfg: RunConfig | None):
    flow, _ = NeuralSplineFlow.load(path, expected=cfg.flow if cfg is not None else None)
    return flow


def cmd_sample(args, cfg: RunConfig) -> None:
    if args.n < 1:
        raise ConfigError("--n: must be at least 1")
    flow = _load_flow(args.checkpoint, cfg if args.config else None)
    draw = flow.sample(args.n, gvi.seed_for(cfg.seed, 3))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        fh.write("beta_household,beta_school,beta_company,log_q\n")
        for row, lq in zip(draw.beta.values, draw.log_q.values):
            fh.write(",".join(_fmt(v) for v in (*row, lq)) + "\n")


def cmd_predictive(args, cfg: RunConfig) -> None:
    if args.n < 1:
        raise ConfigError("--n: must be at least 1")
    if args.source == "flow":
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required with --source flow")
        sampler = _load_flow(args.checkpoint, cfg)
    else:
        sampler = UniformPrior()
    pop = build_population(cfg, args.population)
    counts = predictive(sampler, pop, cfg.simulator, args.n, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        fh.write("replicate,day,new_infections,log_new_infections\n")
        for r, series in enumerate(counts):
            for t, c in enumerate(series, start=1):
                fh.write(f"{r},{t},{_fmt(c)},{_fmt(np.log(c + 1.0))}\n")


# --- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abm-gvi", description="Calibrate an agent-based epidemic model by GVI.")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="simulations run concurrently per batch")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run config (defaults when omitted)")
        p.set_defaults(func=func)
        return p

    p = add("synth-pop", cmd_synth_pop, "write a synthetic population file")
    p.add_argument("--out", required=True)

    p = add("gen-truth", cmd_gen_truth, "simulate a ground-truth series")
    p.add_argument("--theta", type=float, nargs=3, default=list(TRUTH),
                   metavar=("HOUSEHOLD", "SCHOOL", "COMPANY"))
    p.add_argument("--population", help="population file (synthesised from config if absent)")
    p.add_argument("--out", required=True)

    p = add("calibrate", cmd_calibrate, "train the flow posterior on a series")
    p.add_argument("--data", required=True)
    p.add_argument("--population")
    p.add_argument("--out-dir", help=f"output directory (else ${OUTPUT_DIR_ENV}, then config)")

    p = add("sample", cmd_sample, "draw posterior samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=SUMMARY_SAMPLES)
    p.add_argument("--out", required=True)

    p = add("predictive", cmd_predictive, "simulate trajectories at prior or posterior draws")
    p.add_argument("--checkpoint")
    p.add_argument("--source", choices=("flow", "prior"), default="flow")
    p.add_argument("--population")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads: must be at least 1")
            overrides["train"] = dataclasses.replace(cfg.train, threads=args.threads)
        cfg = dataclasses.replace(cfg, **overrides)
        args.func(args, cfg)
    except (NumericError, gvi.TrainingError, gvi.SupportViolation) as err:
        print(f"abm-gvi: numeric failure: {err}", file=sys.stderr)
        return 3
    except (ConfigError, ArchitectureMismatch, ValueError, OSError) as err:
        print(f"abm-gvi: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
