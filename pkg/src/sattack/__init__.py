"""Socially-attended adversarial attacks on pedestrian trajectory predictors."""

from .core import (AttackConfig, AttackReport, Agent, DistanceMatrix, Scene, apply_perturbation,
                   check_collision, distance_matrix, metric_ade_fde, metric_cr, metric_pavg,
                   project_perturbation)

__version__ = "0.1.0"
