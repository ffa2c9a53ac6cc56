"""Domain types, geometry, collision detection and evaluation metrics.

Arrays follow one layout throughout the package:

* a trajectory is ``(T, 2)`` in meters,
* a scene's observations are ``(n, T_obs, 2)``,
* a prediction set is ``(n, T_pred, 2)``,
* a perturbation is ``(T_obs, 2)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import ShapeError

__all__ = [
    "SAttackError", "ShapeError", "NoNeighborsError", "EmptyDatasetError",
    "NoGroundTruthError", "InsufficientHistoryError", "InvalidWeightsError",
    "NotDifferentiableError", "ConfigError", "NonFiniteError",
    "Agent", "Scene", "DistanceMatrix", "AttackConfig", "AttackReport",
    "as_trajectory", "distance_matrix", "check_collision", "project_perturbation",
    "apply_perturbation", "row_norms", "metric_pavg", "metric_cr",
    "metric_ade_fde", "min_neighbor_pair_distance",
]


class SAttackError(Exception):
    """Base class for package errors."""


class NoNeighborsError(SAttackError):
    pass


class EmptyDatasetError(SAttackError):
    pass


class NoGroundTruthError(SAttackError):
    pass


class InsufficientHistoryError(SAttackError):
    pass


class InvalidWeightsError(SAttackError):
    pass


class NotDifferentiableError(SAttackError):
    pass


class ConfigError(SAttackError, ValueError):
    pass


class NonFiniteError(SAttackError, FloatingPointError):
    pass


def as_trajectory(points, name: str = "trajectory") -> np.ndarray:
    """Validate and freeze a ``(T, 2)`` array of finite coordinates."""
    arr = np.array(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
        raise ShapeError(f"{name} must have shape (T>=1, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite coordinates")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Agent:
    agent_id: str
    observation: np.ndarray
    future: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "agent_id", str(self.agent_id))
        object.__setattr__(self, "observation", as_trajectory(self.observation, "observation"))
        if self.future is not None:
            object.__setattr__(self, "future", as_trajectory(self.future, "future"))


@dataclass(frozen=True)
class Scene:
    scene_id: str
    agents: tuple[Agent, ...]
    candidate_index: int = 0

    def __post_init__(self):
        agents = tuple(self.agents)
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "scene_id", str(self.scene_id))
        if not agents:
            raise ShapeError("scene needs at least one agent")
        if len({a.observation.shape[0] for a in agents}) != 1:
            raise ShapeError("observations differ in length")
        lengths = {a.future.shape[0] for a in agents if a.future is not None}
        if len(lengths) > 1:
            raise ShapeError("futures differ in length")
        if len({a.agent_id for a in agents}) != len(agents):
            raise ValueError(f"duplicate agent ids in scene {self.scene_id}")
        if not 0 <= self.candidate_index < len(agents):
            raise IndexError(f"candidate_index {self.candidate_index} out of range")

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def t_obs(self) -> int:
        return self.agents[0].observation.shape[0]

    @property
    def t_pred(self) -> Optional[int]:
        for a in self.agents:
            if a.future is not None:
                return a.future.shape[0]
        return None

    @property
    def has_futures(self) -> bool:
        return all(a.future is not None for a in self.agents)

    def observations(self) -> np.ndarray:
        return np.stack([a.observation for a in self.agents])

    def futures(self) -> np.ndarray:
        if not self.has_futures:
            raise NoGroundTruthError(f"scene {self.scene_id} lacks ground-truth futures")
        return np.stack([a.future for a in self.agents])

    def with_candidate(self, index: int) -> "Scene":
        return dataclasses.replace(self, candidate_index=index)

    def translated(self, offset) -> "Scene":
        off = np.asarray(offset, dtype=np.float64)
        agents = tuple(
            Agent(a.agent_id, a.observation + off, None if a.future is None else a.future + off)
            for a in self.agents
        )
        return dataclasses.replace(self, agents=agents)


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray            # (n-1, T_pred)
    neighbor_order: tuple[int, ...]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.2
    gamma: float = 0.2
    lambda_r: float = 0.1
    lambda_w: float = 0.5
    max_iters: int = 100
    step_size_r: float = 0.02
    step_size_w: float = 0.03
    mode: str = "soft"
    freeze_neighbors: bool = False
    alternating: bool = False

    MODES = ("none", "hard", "soft", "random")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ConfigError(f"mode must be one of {self.MODES}, got {self.mode!r}")
        # epsilon == 0 is allowed: it pins R to the origin
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be non-negative")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError("max_iters must be an integer >= 1")
        if not (self.step_size_r > 0 and self.step_size_w > 0):
            raise ConfigError("step sizes must be positive")
        if self.lambda_r < 0 or self.lambda_w < 0:
            raise ConfigError("lambda_r and lambda_w must be non-negative")

    def digest(self) -> str:
        import hashlib
        import json

        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AttackReport:
    scene_id: str
    candidate_index: int
    collided: bool
    collision_cell: Optional[tuple[int, int]]   # (agent index of neighbor, prediction timestep)
    iterations_used: int
    p_avg: float
    perturbation: np.ndarray = field(repr=False)
    predictions_before: np.ndarray = field(repr=False)
    predictions_after: np.ndarray = field(repr=False)
    agent_id: str = ""
    mode: str = "soft"
    collided_before: bool = False


# geometry -------------------------------------------------------------------

def row_norms(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    # scale by the row maximum so tiny or huge entries neither underflow nor overflow
    m = np.max(np.abs(r), axis=-1, keepdims=True) if r.shape[-1] else np.zeros(r.shape[:-1] + (1,))
    safe = np.where(m > 0, m, 1.0)
    with np.errstate(over="ignore"):
        return m[..., 0] * np.sqrt(np.sum((r / safe) ** 2, axis=-1))


def distance_matrix(predictions, candidate_index: int) -> DistanceMatrix:
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[-1] != 2 or preds.shape[0] == 0:
        raise ShapeError(f"predictions must be (n, T_pred, 2), got {preds.shape}")
    n = preds.shape[0]
    if not 0 <= candidate_index < n:
        raise IndexError("candidate_index out of range")
    if n < 2:
        raise NoNeighborsError("distance matrix needs at least one neighbor")
    order = tuple(i for i in range(n) if i != candidate_index)
    values = row_norms(preds[list(order)] - preds[candidate_index][None])
    return DistanceMatrix(values, order)


def check_collision(d: DistanceMatrix, gamma: float) -> Optional[tuple[int, int]]:
    """(row, timestep) of the closest cell if it is strictly below ``gamma``.

    ``np.argmin`` on the row-major flattening already gives the lowest row,
    then lowest timestep among tied minima.
    """
    vals = np.asarray(d.values)
    if vals.size == 0:
        return None
    flat = int(np.argmin(vals))
    j, t = divmod(flat, vals.shape[1])
    if vals[j, t] < gamma:
        return j, t
    return None


def project_perturbation(r, epsilon: float) -> np.ndarray:
    """Rescale every row whose norm exceeds ``epsilon`` back onto the ball."""
    r = np.asarray(r, dtype=np.float64)
    norms = row_norms(r)
    out = r.copy()
    over = norms > epsilon
    if np.any(over):
        out[over] = r[over] * (epsilon / norms[over])[..., None]
        # guard the rare case where rounding lands one ulp outside
        still = row_norms(out) > epsilon
        while np.any(still):
            out[still] = np.nextafter(out[still] * (1.0 - 2.0 ** -50), 0.0)
            still = row_norms(out) > epsilon
    return out


def apply_perturbation(scene: Scene, r) -> Scene:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (scene.t_obs, 2):
        raise ShapeError(f"perturbation must be ({scene.t_obs}, 2), got {r.shape}")
    c = scene.candidate_index
    agents = list(scene.agents)
    a = agents[c]
    agents[c] = Agent(a.agent_id, a.observation + r, a.future)
    return dataclasses.replace(scene, agents=tuple(agents))


# metrics --------------------------------------------------------------------

def metric_pavg(r) -> float:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 1:
        raise ShapeError("perturbation must be (T_obs>=1, 2)")
    return float(np.mean(row_norms(r)))


def _collides(item, gamma: float) -> bool:
    if isinstance(item, AttackReport):
        return item.collided
    if isinstance(item, bool):
        return item
    preds, cand = item
    if np.asarray(preds).shape[0] < 2:
        return False
    return check_collision(distance_matrix(preds, cand), gamma) is not None


def metric_cr(items: Iterable, gamma: float = 0.2) -> float:
    """Collision rate in percent.

    ``items`` may hold AttackReports, plain booleans, or
    ``(predictions, candidate_index)`` pairs.
    """
    items = list(items)
    if not items:
        raise EmptyDatasetError("collision rate of an empty collection")
    hits = 0
    for it in items:
        hits += _collides(it, gamma)
    return 100.0 * hits / len(items)


def metric_ade_fde(predictions, scene: Scene, candidate_only: bool = False) -> tuple[float, float]:
    truth = scene.futures()
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.shape != truth.shape:
        raise ShapeError(f"predictions {preds.shape} vs ground truth {truth.shape}")
    err = row_norms(preds - truth)
    if candidate_only:
        err = err[scene.candidate_index: scene.candidate_index + 1]
    return float(err.mean()), float(err[:, -1].mean())


def min_neighbor_pair_distance(predictions, candidate_index: int) -> float:
    """Smallest predicted distance between two non-candidate agents (inf if < 2 neighbors)."""
    preds = np.asarray(predictions, dtype=np.float64)
    others = [i for i in range(preds.shape[0]) if i != candidate_index]
    best = np.inf
    for a in range(len(others)):
        for b in range(a + 1, len(others)):
            d = row_norms(preds[others[a]] - preds[others[b]]).min()
            best = min(best, float(d))
    return best


def stack_predictions(preds: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(p, dtype=np.float64) for p in preds])
