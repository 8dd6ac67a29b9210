"""A synthetic town and one epidemic in it.

Builds a population, runs the simulator at the reference intensities and
shows how the pathwise gradient of the total case count looks.
"""
import numpy as np

from abm_gvi import autodiff as ad
from abm_gvi import PopulationConfig, SimConfig, simulate, synthesize

pop = synthesize(config=PopulationConfig(n_agents=2000), seed=0)
print("population:", pop.summary())

cfg = SimConfig(horizon=30)
theta = np.array([0.9, 0.6, 0.3])       # household, school, company
traj = simulate(pop, theta, cfg, seed=1)
print("seeded:", traj.n_seeds)
print("daily new infections:", traj.counts.astype(int).tolist())
print("attack rate: {:.1%}".format((traj.counts.sum() + traj.n_seeds) / pop.n_agents))

# Same noise, larger household intensity.
hot = simulate(pop, theta + np.array([0.3, 0, 0]), cfg, seed=1)
print("household +0.3, total cases: {} -> {}".format(int(traj.counts.sum()),
                                                     int(hot.counts.sum())))

# Pathwise gradient of sum(log(c_t + 1)) with respect to the intensities.
tape = ad.Tape()
beta = tape.variable(theta)
run = simulate(pop, beta, cfg, seed=1)
grad = tape.backward(ad.sum_(run.log_series))[beta]
print("d sum(log c) / d beta =", np.round(grad, 2))
