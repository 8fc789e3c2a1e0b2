"""Data-driven subsynchronous-oscillation suppression workbench.

Simulates a grid-following-converter plant prone to weak-grid oscillation,
identifies its lifted linear model from trajectory data, ranks control
signals by modal participation, and damps the oscillation with a
receding-horizon quadratic program, benchmarked against a conventional
phase-compensation controller.
"""

__version__ = "0.1.0"

from . import baselines, dictionary, harness, koopman, metrics, mpc, plant, predictor, scenario  # noqa: F401
