"""Predictor protocol shared by the attack engine and the experiments."""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from .. import autodiff as ad
from ..core import InsufficientHistoryError, Scene, ShapeError


@runtime_checkable
class Predictor(Protocol):
    name: str
    differentiable: bool
    t_pred: int

    def predict_batch(self, obs: np.ndarray) -> np.ndarray:
        """(B, n, T_obs, 2) observations -> (B, n, T_pred, 2) predictions."""


class DifferentiablePredictor(Predictor, Protocol):
    def forward(self, obs: ad.Tensor) -> ad.Tensor:
        """Tape-recorded version of :meth:`predict_batch`."""


def check_obs(obs, min_history: int = 2) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 4 or obs.shape[-1] != 2:
        raise ShapeError(f"observations must be (B, n, T_obs, 2), got {obs.shape}")
    if obs.shape[2] < min_history:
        raise InsufficientHistoryError(f"need at least {min_history} observed points, got {obs.shape[2]}")
    return obs


def predict_scene(predictor: Predictor, scene: Scene) -> np.ndarray:
    return predictor.predict_batch(scene.observations()[None])[0]
