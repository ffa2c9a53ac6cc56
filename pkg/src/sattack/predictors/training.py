"""Supervised training of pool-lite with Adam on mean squared displacement."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .. import autodiff as ad
from ..core import EmptyDatasetError, NonFiniteError, Scene
from .pool_lite import PoolLiteParams, pool_lite_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        c = self.cfg
        self.t += 1
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, c.grad_clip / total) if total > 0 else 1.0
        out = {}
        for k, p in params.items():
            g = grads[k] * scale
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / (1 - c.beta1 ** self.t)
            vhat = self.v[k] / (1 - c.beta2 ** self.t)
            out[k] = p - c.lr * mhat / (np.sqrt(vhat) + c.adam_eps)
        return out


def group_by_agents(n_agents: Sequence[int], order: Sequence[int], batch_size: int) -> list[list[int]]:
    """Split ``order`` into batches whose members share the same agent count.

    Batches appear in order of their first member, so the schedule is a
    pure function of ``order``.
    """
    groups: dict[int, list[int]] = {}
    for i in order:
        groups.setdefault(n_agents[i], []).append(i)
    batches = []
    for members in groups.values():
        for s in range(0, len(members), batch_size):
            batches.append(members[s:s + batch_size])
    rank = {i: k for k, i in enumerate(order)}
    batches.sort(key=lambda bt: rank[bt[0]])
    return batches


def mse_loss(params: dict, obs, fut, hidden: int, t_pred: int):
    """Build a tape for one batch; returns (tape, loss, leaf tensors)."""
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    pred = pool_lite_forward(ad.Tensor(obs), leaves, hidden, t_pred)
    diff = pred - fut
    loss = ad.mean(ad.sum(diff * diff, axis=-1))
    return tape, loss, leaves


def batch_arrays(scenes: Sequence[Scene], idx: Sequence[int]):
    obs = np.stack([scenes[i].observations() for i in idx])
    fut = np.stack([scenes[i].futures() for i in idx])
    return obs, fut


def sgd_step(params: PoolLiteParams, weights: dict, opt: Adam, obs, fut) -> tuple[dict, float]:
    tape, loss, leaves = mse_loss(weights, obs, fut, params.hidden, params.t_pred)
    if not np.isfinite(loss.data):
        raise NonFiniteError("training loss became non-finite")
    grads = tape.backward(loss)
    return opt.step(weights, {k: grads[t] for k, t in leaves.items()}), float(loss.data)


def train_pool_lite(
    scenes: Sequence[Scene],
    cfg: TrainConfig = TrainConfig(),
    init: Optional[PoolLiteParams] = None,
    hidden: int = 32,
    callback: Optional[Callable[[int, float], None]] = None,
) -> tuple[PoolLiteParams, list[float]]:
    """Fit pool-lite to ground-truth futures.

    Returns the trained parameters and the mean training loss of each epoch.
    """
    scenes = list(scenes)
    if not scenes:
        raise EmptyDatasetError("no training scenes")
    for s in scenes:
        s.futures()
    t_pred = scenes[0].t_pred
    params = init if init is not None else PoolLiteParams.init(hidden, t_pred, cfg.seed)
    if cfg.epochs == 0:
        return params, []
    rng = np.random.default_rng(cfg.seed)
    weights = {k: np.array(v) for k, v in params.weights.items()}
    opt = Adam(weights, cfg)
    n_agents = [s.n for s in scenes]
    curve = []
    for epoch in range(cfg.epochs):
        order = [int(i) for i in rng.permutation(len(scenes))]
        losses, counts = 0.0, 0
        for bt in group_by_agents(n_agents, order, cfg.batch_size):
            obs, fut = batch_arrays(scenes, bt)
            weights, loss = sgd_step(params, weights, opt, obs, fut)
            losses += loss * len(bt)
            counts += len(bt)
        curve.append(losses / counts)
        log.info("epoch %d loss %.5f", epoch, curve[-1])
        if callback is not None:
            callback(epoch, curve[-1])
    return params.replace(weights, epochs=cfg.epochs, lr=cfg.lr), curve
