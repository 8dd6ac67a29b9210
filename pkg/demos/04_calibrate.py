"""A small calibration end to end.

500 agents, 15 days, a narrow flow and a 600-simulation budget.  Runs in a
minute or two on a laptop.  The reference run is the ``calibrate`` command
with configs/reference.toml.
"""
import numpy as np

from abm_gvi import (FlowArchitecture, KlEstimatorConfig, NeuralSplineFlow, ScoringRuleConfig,
                     SimConfig, TrainConfig, UniformPrior, simulate, synthesize, train)

truth = np.array([0.9, 0.6, 0.3])
pop = synthesize(500, seed=0)
cfg = SimConfig(horizon=15, seed_fraction=0.02)
observed = simulate(pop, truth, cfg, seed=2024)
print("observed:", observed.counts.astype(int).tolist())

def simulator(theta, seed):
    return simulate(pop, theta, cfg, seed=seed)

flow = NeuralSplineFlow(FlowArchitecture(hidden=(32, 32)), seed=0)
result = train(flow, observed, simulator, UniformPrior(),
               TrainConfig(batch_size=5, validation_batch_size=5, max_epochs=60,
                           learning_rate=3e-3, simulation_budget=600),
               ScoringRuleConfig(), KlEstimatorConfig(2000),
               on_epoch=lambda r: print(f"epoch {r.epoch:3d}  loss {r.total_loss:9.2f}  "
                                        f"val {r.val_loss:9.2f}  kl {r.kl_term:6.2f}")
               if r.epoch % 10 == 0 else None)
print("stop:", result.stop_reason, "| simulations:", result.sims_used,
      "| best epoch:", result.best_epoch)

draws = result.best.sample(5000, seed=9).beta.values
print("posterior mean:", np.round(draws.mean(axis=0), 3), "truth:", truth)
print("posterior sd:  ", np.round(draws.std(axis=0), 3))
print("corr(household, company): {:.2f}".format(np.corrcoef(draws.T)[0, 2]))
