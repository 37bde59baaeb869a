"""Amortized active learning for nonparametric regression.

A neural query policy is trained on simulated Gaussian-process functions and
then deployed, alongside GP-entropy and random baselines, on benchmark
regression problems.
"""

__version__ = "0.1.0"
