"""Collision-seeking attack: attention-weighted losses and projected descent.

The engine runs many attack instances at once. An instance is a scene with
one agent chosen as candidate; observations are reordered candidate-first so
row ``j`` of the distance matrix is the ``j``-th remaining agent. Instances
in one batch share the agent count; each keeps its own perturbation,
attention weights and stopping state.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .core import (AttackConfig, AttackReport, DistanceMatrix, EmptyDatasetError, InvalidWeightsError,
                   NoNeighborsError, NonFiniteError, NotDifferentiableError, Scene, metric_ade_fde,
                   metric_cr, project_perturbation, row_norms)

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


# simplex projection ----------------------------------------------------------

def project_simplex_rows(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row of ``v`` onto the probability simplex.

    Sort-and-threshold: find the largest k with u_k > (sum_{i<=k} u_i - 1)/k
    on the descending sort u, then clip at that threshold.
    """
    v = np.asarray(v, dtype=np.float64)
    m = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    ks = np.arange(1, m + 1)
    cond = u - css / ks > 0
    rho = m - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    w = np.maximum(v - theta, 0.0)
    # renormalise away rounding so the sum is 1 to ~1 ulp
    return w / w.sum(axis=-1, keepdims=True)


def project_simplex(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("simplex projection of non-finite weights")
    return project_simplex_rows(w.reshape(1, -1)).reshape(w.shape)


def check_simplex(w: np.ndarray) -> None:
    w = np.asarray(w)
    flat = w.reshape(w.shape[0], -1) if w.ndim == 3 else w.reshape(1, -1)
    if np.any(flat < -1e-12) or np.any(np.abs(flat.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise InvalidWeightsError("attention weights must be non-negative and sum to 1")


# losses ----------------------------------------------------------------------
#
# Batched forms take D as (B, k, T_pred), R as (B, T_obs, 2), W as (B, k, T_pred)
# and return a (B,) tensor of per-instance losses.

def _frob(x) -> ad.Tensor:
    return ad.frobenius(x, keep=1)


def batch_loss_no_attention(d) -> ad.Tensor:
    return _frob(d)


def hard_weights(d: np.ndarray) -> np.ndarray:
    """One-hot at each instance's smallest entry (first row, then first column on ties)."""
    d = np.asarray(d)
    b = d.shape[0]
    flat = d.reshape(b, -1)
    w = np.zeros_like(flat)
    w[np.arange(b), np.argmin(flat, axis=1)] = 1.0
    return w.reshape(d.shape)


def batch_loss_hard(d, r, lambda_r: float, w: np.ndarray) -> ad.Tensor:
    return ad.sum(d * w, axis=(1, 2)) + _frob(r) * lambda_r


def batch_loss_soft(d, r, w, lambda_r: float, lambda_w: float) -> ad.Tensor:
    return ad.sum(ad.tanh(d) * w, axis=(1, 2)) + _frob(r) * lambda_r - _frob(w) * lambda_w


def _values(d):
    if isinstance(d, DistanceMatrix):
        return d.values
    return d


def _single(x):
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(_values(x), dtype=np.float64))
    return ad.expand_dims(x, 0)


def loss_no_attention(d) -> ad.Tensor:
    """Frobenius norm of the distance matrix, as a scalar tensor."""
    return ad.reshape(batch_loss_no_attention(_single(d)), ())


def loss_hard_attention(d, r, lambda_r: float = 0.1) -> tuple[ad.Tensor, np.ndarray]:
    """Distance at the currently closest cell plus ``lambda_r * ||R||_F``.

    The one-hot weights are returned alongside and treated as constants.
    """
    d1 = _single(d)
    w = hard_weights(d1.data)
    loss = batch_loss_hard(d1, _single(r), lambda_r, w)
    return ad.reshape(loss, ()), w[0]


def loss_soft_attention(d, w, r, lambda_r: float = 0.1, lambda_w: float = 0.5) -> ad.Tensor:
    w_data = w.data if isinstance(w, ad.Tensor) else np.asarray(w, dtype=np.float64)
    check_simplex(w_data[None])
    loss = batch_loss_soft(_single(d), _single(r), _single(w), lambda_r, lambda_w)
    return ad.reshape(loss, ())


# engine ----------------------------------------------------------------------

@dataclass
class BatchResult:
    perturbation: np.ndarray      # (B, T_obs, 2)
    collided: np.ndarray          # (B,) bool
    collided_before: np.ndarray   # (B,) bool
    cell: np.ndarray              # (B, 2) int, -1 when no collision
    iterations: np.ndarray        # (B,) int
    preds_before: np.ndarray      # (B, n, T_pred, 2), candidate first
    preds_after: np.ndarray
    weights: Optional[np.ndarray] = None


def _distances(preds: np.ndarray) -> np.ndarray:
    return row_norms(preds[:, 1:] - preds[:, :1])


def _first_min_cell(d: np.ndarray) -> np.ndarray:
    b, _, t = d.shape
    flat = np.argmin(d.reshape(b, -1), axis=1)
    return np.stack([flat // t, flat % t], axis=1)


def random_rows(rng: np.random.Generator, t_obs: int, epsilon: float) -> np.ndarray:
    theta = rng.uniform(0.0, 2 * np.pi, size=t_obs)
    return epsilon * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def attack_batch(obs: np.ndarray, predictor, cfg: AttackConfig,
                 random_perturbations: Optional[np.ndarray] = None,
                 monitor=None) -> BatchResult:
    """Attack a batch of candidate-first observations ``(B, n, T_obs, 2)``.

    ``monitor(iteration, R, W)`` is called after every projection; tests
    use it to check the feasibility invariants.
    """
    obs = np.asarray(obs, dtype=np.float64)
    b, n, t_obs, _ = obs.shape
    if n < 2:
        raise NoNeighborsError("attack needs at least one neighbor")
    preds_before = predictor.predict_batch(obs)
    d0 = _distances(preds_before)
    collided_before = d0.reshape(b, -1).min(axis=1) < cfg.gamma

    r = np.zeros((b, t_obs, 2))
    collided = np.zeros(b, dtype=bool)
    cell = np.full((b, 2), -1, dtype=np.int64)
    iters = np.zeros(b, dtype=np.int64)
    preds_after = preds_before.copy()

    if cfg.mode == "random":
        if random_perturbations is None:
            raise ValueError("random mode needs pre-drawn perturbations")
        r = project_perturbation(random_perturbations, cfg.epsilon)
        preds_after = predictor.predict_batch(_perturbed(obs, r))
        d = _distances(preds_after)
        collided = d.reshape(b, -1).min(axis=1) < cfg.gamma
        cell[collided] = _first_min_cell(d[collided]) if collided.any() else cell[collided]
        return BatchResult(r, collided, collided_before, cell, iters, preds_before, preds_after)

    if not predictor.differentiable:
        raise NotDifferentiableError(f"{predictor.name} is not differentiable")

    k, t_pred = n - 1, preds_before.shape[2]
    w = np.full((b, k, t_pred), 1.0 / (k * t_pred))
    frozen = preds_before[:, 1:] if cfg.freeze_neighbors else None
    active = np.arange(b)

    for it in range(cfg.max_iters + 1):
        tape = ad.Tape()
        rt = tape.leaf(r[active])
        pred = predictor.forward(ad.concatenate(
            [obs[active, :1] + ad.expand_dims(rt, 1), obs[active, 1:]], axis=1))
        p = pred.data
        if not np.all(np.isfinite(p)):
            raise NonFiniteError("predictor produced non-finite output during the attack")
        preds_after[active] = p
        d_live = _distances(p)
        hit = d_live.reshape(len(active), -1).min(axis=1) < cfg.gamma
        if hit.any():
            idx = active[hit]
            collided[idx] = True
            cell[idx] = _first_min_cell(d_live[hit])
            iters[idx] = it
        keep = ~hit
        if it == cfg.max_iters or not keep.any():
            iters[active[keep]] = it
            break
        sel = np.flatnonzero(keep)
        idx = active[keep]

        cand = pred[sel, :1]
        if frozen is not None:
            d = ad.norm_rows(frozen[idx] - cand)
        else:
            d = ad.norm_rows(pred[sel, 1:] - cand)
        rk = rt[sel]
        if cfg.mode == "none":
            loss = batch_loss_no_attention(d)
        elif cfg.mode == "hard":
            loss = batch_loss_hard(d, rk, cfg.lambda_r, hard_weights(d.data))
        else:
            wt = tape.leaf(w[idx])
            loss = batch_loss_soft(d, rk, wt, cfg.lambda_r, cfg.lambda_w)
        total = ad.sum(loss)
        if not np.isfinite(total.data):
            raise NonFiniteError("attack loss became non-finite")
        grads = tape.backward(total)

        if cfg.mode == "soft":
            w[idx] = project_simplex_rows((w[idx] - cfg.step_size_w * grads[wt]).reshape(len(idx), -1)
                                          ).reshape(len(idx), k, t_pred)
            if cfg.alternating:
                loss2 = batch_loss_soft(d, rk, w[idx], cfg.lambda_r, cfg.lambda_w)
                grads = tape.backward(ad.sum(loss2))
        g = grads[rt][sel]
        gnorm = np.sqrt(np.sum(g * g, axis=(1, 2)))
        scale = np.where(gnorm > 0, cfg.step_size_r / np.where(gnorm > 0, gnorm, 1.0), 0.0)
        r[idx] = project_perturbation(r[idx] - scale[:, None, None] * g, cfg.epsilon)
        if monitor is not None:
            monitor(it, r[idx].copy(), w[idx].copy() if cfg.mode == "soft" else hard_weights(d.data))
        active = idx

    return BatchResult(r, collided, collided_before, cell, iters, preds_before, preds_after,
                       w if cfg.mode == "soft" else None)


def _perturbed(obs: np.ndarray, r: np.ndarray) -> np.ndarray:
    out = obs.copy()
    out[:, 0] += r
    return out


# instances -------------------------------------------------------------------

def candidate_order(n: int, candidate: int) -> list[int]:
    return [candidate] + [i for i in range(n) if i != candidate]


def instance_obs(scene: Scene, candidate: int) -> tuple[np.ndarray, list[int]]:
    perm = candidate_order(scene.n, candidate)
    return scene.observations()[perm], perm


def _unpermute(x: np.ndarray, perm: list[int]) -> np.ndarray:
    out = np.empty_like(x)
    out[perm] = x
    return out


def _reports(scenes, instances, res: BatchResult, mode: str) -> list[AttackReport]:
    out = []
    for i, (si, cand) in enumerate(instances):
        scene = scenes[si]
        perm = candidate_order(scene.n, cand)
        cell = None
        if res.collided[i]:
            cell = (perm[int(res.cell[i, 0]) + 1], int(res.cell[i, 1]))
        rr = res.perturbation[i]
        out.append(AttackReport(
            scene_id=scene.scene_id, candidate_index=cand, collided=bool(res.collided[i]),
            collision_cell=cell, iterations_used=int(res.iterations[i]),
            p_avg=float(np.mean(row_norms(rr))), perturbation=rr.copy(),
            predictions_before=_unpermute(res.preds_before[i], perm),
            predictions_after=_unpermute(res.preds_after[i], perm),
            agent_id=scene.agents[cand].agent_id, mode=mode,
            collided_before=bool(res.collided_before[i]),
        ))
    return out


def run_attack(scene: Scene, predictor, cfg: AttackConfig = AttackConfig(), seed: int = 0,
               monitor=None) -> AttackReport:
    """Attack ``scene`` with its ``candidate_index`` agent as candidate."""
    if cfg.mode != "random" and not predictor.differentiable:
        raise NotDifferentiableError(f"{predictor.name} is not differentiable")
    if scene.n < 2:
        raise NoNeighborsError(f"scene {scene.scene_id} has no neighbors")
    obs, _ = instance_obs(scene, scene.candidate_index)
    rand = None
    if cfg.mode == "random":
        rand = random_rows(np.random.default_rng([seed, 0]), scene.t_obs, cfg.epsilon)[None]
    res = attack_batch(obs[None], predictor, cfg, rand, monitor)
    return _reports([scene], [(0, scene.candidate_index)], res, cfg.mode)[0]


def expand_instances(scenes: Sequence[Scene]) -> list[tuple[int, int]]:
    """Every agent of every scene with at least one neighbor becomes a candidate."""
    out = []
    for si, s in enumerate(scenes):
        if s.n < 2:
            log.warning("skipping scene %s: no neighbors", s.scene_id)
            continue
        out.extend((si, c) for c in range(s.n))
    return out


def chunk_instances(scenes, instances, chunk_size: int) -> list[list[int]]:
    """Positions into ``instances`` grouped by agent count, in fixed-size chunks.

    The chunking depends only on the instance list, never on the worker count.
    """
    groups: dict[int, list[int]] = {}
    for pos, (si, _) in enumerate(instances):
        groups.setdefault(scenes[si].n, []).append(pos)
    chunks = []
    for n in sorted(groups):
        members = groups[n]
        chunks.extend(members[s:s + chunk_size] for s in range(0, len(members), chunk_size))
    return chunks


def _run_chunk(args):
    items, predictor, cfg, seed = args
    obs = np.stack([instance_obs(scene, cand)[0] for scene, cand, _ in items])
    rand = None
    if cfg.mode == "random":
        # one stream per global instance position: independent of chunking
        rand = np.stack([random_rows(np.random.default_rng([seed, pos]), obs.shape[2], cfg.epsilon)
                         for _, _, pos in items])
    res = attack_batch(obs, predictor, cfg, rand)
    scenes = [scene for scene, _, _ in items]
    return _reports(scenes, [(i, cand) for i, (_, cand, _) in enumerate(items)], res, cfg.mode)


def attack_instances(scenes: Sequence[Scene], instances: Sequence[tuple[int, int]], predictor,
                     cfg: AttackConfig, seed: int = 0, jobs: int = 1,
                     chunk_size: int = 64) -> list[AttackReport]:
    """Attack (scene index, candidate) instances; results follow ``instances`` order."""
    scenes = list(scenes)
    chunks = chunk_instances(scenes, instances, chunk_size)
    tasks = [([(scenes[instances[p][0]], instances[p][1], p) for p in positions], predictor, cfg, seed)
             for positions in chunks]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_chunk, tasks))
    else:
        results = [_run_chunk(t) for t in tasks]
    reports: list[Optional[AttackReport]] = [None] * len(instances)
    for positions, reps in zip(chunks, results):
        for p, rep in zip(positions, reps):
            reports[p] = rep
    return reports  # type: ignore[return-value]


def summarize(reports: Sequence[AttackReport], scenes: Optional[Sequence[Scene]] = None,
              gamma: float = 0.2) -> dict:
    """CR before/after, P-avg over collided and over all instances, ADE/FDE if ground truth exists."""
    if not reports:
        return {"instances": 0}
    collided = [r for r in reports if r.collided]
    summary = {
        "instances": len(reports),
        "collided": len(collided),
        "cr": metric_cr(reports),
        "cr_original": metric_cr([r.collided_before for r in reports]),
        "p_avg_collided": float(np.mean([r.p_avg for r in collided])) if collided else None,
        "p_avg_all": float(np.mean([r.p_avg for r in reports])),
    }
    if scenes is not None:
        by_id = {s.scene_id: s for s in scenes}
        seen, ades, fdes = set(), [], []
        for r in reports:
            s = by_id.get(r.scene_id)
            if s is None or r.scene_id in seen or not s.has_futures:
                continue
            seen.add(r.scene_id)
            a, f = metric_ade_fde(r.predictions_before, s)
            ades.append(a)
            fdes.append(f)
        if ades:
            summary["ade"] = float(np.mean(ades))
            summary["fde"] = float(np.mean(fdes))
    return summary


def attack_dataset(scenes: Sequence[Scene], predictor, cfg: AttackConfig = AttackConfig(),
                   seed: int = 0, jobs: int = 1, chunk_size: int = 64) -> tuple[list[AttackReport], dict]:
    scenes = list(scenes)
    if not scenes:
        raise EmptyDatasetError("attack_dataset needs at least one scene")
    if cfg.mode != "random" and not predictor.differentiable:
        raise NotDifferentiableError(f"{predictor.name} is not differentiable")
    instances = expand_instances(scenes)
    if not instances:
        raise NoNeighborsError("no scene has more than one agent")
    reports = attack_instances(scenes, instances, predictor, cfg, seed, jobs, chunk_size)
    return reports, summarize(reports, scenes, cfg.gamma)
