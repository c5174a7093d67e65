"""Probability-flow distillation on toy targets: schedules, score fields,
PF-ODE solvers, SDS/SDI/PFD particle optimization and diagnostics."""

__version__ = "0.1.0"
