"""Model-based entropy-regularized imitation learning at desk scale."""

from .mdp import RegularizationConfig, TabularMdp, TransitionBuffer, gridworld
from .oracle import solve
from .trainers import Schedule, Variant, train

__all__ = ["RegularizationConfig", "TabularMdp", "TransitionBuffer", "gridworld", "solve",
           "Schedule", "Variant", "train"]
