"""Generalised variational inference for a differentiable agent-based epidemic.

Modules:

* :mod:`abm_gvi.autodiff`   tape-based reverse-mode differentiation on numpy arrays
* :mod:`abm_gvi.population` synthetic households, schools and companies
* :mod:`abm_gvi.simulator`  stochastic epidemic with differentiable infection draws
* :mod:`abm_gvi.flow`       neural spline flow posterior on (0, 2)^3
* :mod:`abm_gvi.gvi`        scoring rule, KL estimator and the training loop
* :mod:`abm_gvi.cli`        the ``abm-gvi`` command
"""

from .flow import FlowArchitecture, NeuralSplineFlow, UniformPrior
from .gvi import (KlEstimatorConfig, ScoringRuleConfig, TrainConfig, gvi_loss, kl_estimate,
                  score, train)
from .population import Population, PopulationConfig, load, save, synthesize
from .simulator import SimConfig, ThetaVector, Trajectory, simulate

__version__ = "0.1.0"

__all__ = [
    "FlowArchitecture", "KlEstimatorConfig", "NeuralSplineFlow", "Population",
    "PopulationConfig", "ScoringRuleConfig", "SimConfig", "ThetaVector", "TrainConfig",
    "Trajectory", "UniformPrior", "gvi_loss", "kl_estimate", "load", "save", "score",
    "simulate", "synthesize", "train",
]
