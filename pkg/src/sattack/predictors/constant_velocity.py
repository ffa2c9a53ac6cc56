from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .base import check_obs


class ConstantVelocity:
    """Extrapolates each agent's last observed displacement."""

    name = "cv"
    differentiable = True

    def __init__(self, t_pred: int = 12):
        self.t_pred = t_pred
        self._steps = np.arange(1, t_pred + 1, dtype=np.float64)[:, None]

    def predict_batch(self, obs):
        obs = check_obs(obs)
        last = obs[:, :, -1:, :]
        v = last - obs[:, :, -2:-1, :]
        return last + self._steps * v

    def forward(self, obs: ad.Tensor) -> ad.Tensor:
        check_obs(obs.data)
        last = obs[:, :, -1:, :]
        v = last - obs[:, :, -2:-1, :]
        return last + v * self._steps
