"""Rule-based social-forces predictor (goal attraction + exponential repulsion).

Not differentiable; used as a transfer target and, through
:func:`simulate`, as the ground-truth dynamics of the synthetic corpora.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..core import ConfigError
from .base import check_obs

DEFAULTS_FILE = Path(__file__).with_name("social_forces_defaults.json")


@dataclass(frozen=True)
class SocialForcesParams:
    tau: float = 0.5          # s
    a: float = 2.0            # m/s^2
    b: float = 0.3            # m
    radius: float = 0.6       # m, contact distance r in A*exp((r - d)/B)
    dt: float = 0.4           # s, one frame at 2.5 fps
    v0: Optional[float] = None  # m/s; None -> per-agent last observed speed
    max_speed_factor: float = 1.5

    def __post_init__(self):
        for k in ("tau", "b", "radius", "dt", "max_speed_factor"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"social forces {k} must be positive")
        if self.a < 0:
            raise ConfigError("repulsion strength must be non-negative")
        if self.v0 is not None and self.v0 <= 0:
            raise ConfigError("v0 must be positive")

    @classmethod
    def defaults(cls) -> "SocialForcesParams":
        with open(DEFAULTS_FILE) as fh:
            return cls(**json.load(fh))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def repulsion(pos: np.ndarray, params: SocialForcesParams) -> np.ndarray:
    """Summed repulsive acceleration on every agent; pos is (..., n, 2)."""
    n = pos.shape[-2]
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.einsum("...ii->...i", dist)[...] = np.inf
    safe = np.where(dist > 1e-9, dist, 1e-9)
    mag = params.a * np.exp((params.radius - safe) / params.b)
    mag = np.where(np.isfinite(dist), mag, 0.0)
    force = (mag / safe)[..., None] * diff
    if n == 1:
        return np.zeros_like(pos)
    return force.sum(axis=-2)


def simulate(pos, vel, goals, speeds, steps: int, params: SocialForcesParams) -> np.ndarray:
    """Integrate with symplectic Euler; pos/vel/goals (..., n, 2) in m and m/s.

    Returns positions after each of ``steps`` updates, shape (..., n, steps, 2).
    """
    pos = np.array(pos, dtype=np.float64)
    vel = np.array(vel, dtype=np.float64)
    goals = np.asarray(goals, dtype=np.float64)
    speeds = np.asarray(speeds, dtype=np.float64)
    vmax = params.max_speed_factor * np.maximum(speeds, 0.1)
    out = []
    for _ in range(steps):
        to_goal = goals - pos
        dist = np.sqrt(np.sum(to_goal * to_goal, axis=-1))
        e = np.where(dist[..., None] > 1e-9, to_goal / np.maximum(dist, 1e-9)[..., None], 0.0)
        # arrive: slow down when the goal is closer than one step at cruise speed
        desired = np.minimum(speeds, dist / params.dt)
        force = (desired[..., None] * e - vel) / params.tau + repulsion(pos, params)
        vel = vel + params.dt * force
        sp = np.sqrt(np.sum(vel * vel, axis=-1))
        cap = np.where(sp > vmax, vmax / np.maximum(sp, 1e-12), 1.0)
        vel = vel * cap[..., None]
        pos = pos + params.dt * vel
        out.append(pos)
    return np.stack(out, axis=-2)


class SocialForces:
    name = "social-forces"
    differentiable = False

    def __init__(self, params: Optional[SocialForcesParams] = None, t_pred: int = 12):
        self.params = params if params is not None else SocialForcesParams.defaults()
        self.t_pred = t_pred

    def predict_batch(self, obs):
        obs = check_obs(obs)
        p = self.params
        last = obs[:, :, -1, :]
        step = last - obs[:, :, -2, :]
        vel = step / p.dt
        speed = np.sqrt(np.sum(vel * vel, axis=-1))
        if p.v0 is not None:
            speed = np.full_like(speed, p.v0)
        goals = last + step * self.t_pred
        return simulate(last, vel, goals, speed, self.t_pred, p)
