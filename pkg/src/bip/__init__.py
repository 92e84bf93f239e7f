"""Bayesian inverse problems with heavy-tailed neural-network priors."""

from .network import Grid, GridField, NetworkSpec, WeightVector, forward, sample_weights
from .stable import CAUCHY, GAUSSIAN, StableDist

__all__ = ["CAUCHY", "GAUSSIAN", "Grid", "GridField", "NetworkSpec", "StableDist",
           "WeightVector", "forward", "sample_weights"]
__version__ = "0.1.0"
