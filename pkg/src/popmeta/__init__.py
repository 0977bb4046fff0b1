"""popmeta: population-based few-shot modelling of simulated structures.

Simulates a population of two-degree-of-freedom oscillators whose stiffness
varies with temperature, trains small neural networks on a handful of
population members with a meta-learning procedure that backpropagates
through the task-specific update, and evaluates few-shot adaptation on
unseen members against a Gaussian-process baseline.
"""

__version__ = "0.1.0"

from .nn import BACKEND  # noqa: F401
