"""The spline flow posterior family on (0, 2)^3.

An untrained flow is the identity on the base normal, squashed to
(0, 2).  A few Adam steps pull it towards a target box.
"""
import numpy as np

from abm_gvi import autodiff as ad
from abm_gvi import FlowArchitecture, NeuralSplineFlow, UniformPrior
from abm_gvi.gvi import Adam

flow = NeuralSplineFlow(FlowArchitecture(hidden=(32, 32)), seed=0)
draws = flow.sample(5000, seed=1)
print("untrained medians:", np.round(np.median(draws.beta.values, axis=0), 3))

# Density integrates to one over the box (midpoint rule).
m = 30
c = (np.arange(m) + 0.5) * (2.0 / m)
grid = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)
print("mass:", round(float(np.exp(flow.log_prob(grid).values).sum() * (2.0 / m) ** 3), 4))

# Maximum likelihood on points near (0.9, 0.6, 0.3).
rng = np.random.default_rng(2)
target = np.clip(rng.normal([0.9, 0.6, 0.3], 0.05, size=(512, 3)), 0.01, 1.99)
opt = Adam(lr=0.01)
for step in range(200):
    tape = ad.Tape()
    params = flow.bind(tape)
    nll = -ad.mean(flow.log_prob(target, params=params))
    adj = tape.backward(nll)
    opt.step(flow.params, {k: adj[t] for k, t in params.items()})
    if step % 50 == 0:
        print(f"step {step:3d}  nll {nll.item():8.3f}")
after = flow.sample(5000, seed=3).beta.values
print("fitted mean:", np.round(after.mean(axis=0), 3), "sd:", np.round(after.std(axis=0), 3))
print("prior log density:", UniformPrior().log_prob(np.array([[1.0, 1.0, 1.0]])))
