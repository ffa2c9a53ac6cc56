"""Studies built on the attack engine: transfer, adversarial fine-tuning,
per-timestep sensitivity, the frozen-neighbor ablation and the
neighbor-neighbor collision scan."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attack import (attack_batch, attack_dataset, attack_instances, candidate_order,
                     expand_instances, random_rows)
from .core import (AttackConfig, AttackReport, EmptyDatasetError, NotDifferentiableError, SAttackError,
                   Scene, check_collision, distance_matrix, metric_ade_fde, metric_cr,
                   min_neighbor_pair_distance, row_norms)
from .predictors.pool_lite import PoolLite, PoolLiteParams
from .predictors.training import Adam, TrainConfig, group_by_agents, sgd_step, train_pool_lite

log = logging.getLogger(__name__)


class ArchiveMismatchError(SAttackError):
    pass


# shared testbed ------------------------------------------------------------------

@dataclass(frozen=True)
class TestbedConfig:
    """Synthetic corpora and the pool-lite model the studies run on."""

    __test__ = False   # not a pytest class

    train_count: int = 800
    test_count: int = 500
    heldout_count: int = 200
    noise_sigma: float = 0.01
    template: str = "mixed"
    epochs: int = 100
    lr: float = 3e-3
    hidden: int = 32
    seed: int = 0


@dataclass(frozen=True)
class Testbed:
    __test__ = False

    params: PoolLiteParams
    train: list
    test: list
    heldout: list
    loss_curve: list


def build_testbed(cfg: TestbedConfig = TestbedConfig()) -> Testbed:
    """Generate train/test/held-out scenes from disjoint seeds and train pool-lite."""
    from .data_io import generate_synthetic

    train = generate_synthetic(cfg.template, cfg.noise_sigma, cfg.train_count, 3 * cfg.seed + 10, prefix="train")
    test = generate_synthetic(cfg.template, cfg.noise_sigma, cfg.test_count, 3 * cfg.seed + 11, prefix="test")
    held = generate_synthetic(cfg.template, cfg.noise_sigma, cfg.heldout_count, 3 * cfg.seed + 12,
                              prefix="heldout")
    params, curve = train_pool_lite(train, TrainConfig(epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed),
                                    hidden=cfg.hidden)
    return Testbed(params, train, test, held, curve)


# batched prediction of (possibly perturbed) instances -------------------------

def predict_instances(scenes: Sequence[Scene], instances: Sequence[tuple[int, int]], predictor,
                      perturbations: Optional[Sequence[np.ndarray]] = None,
                      chunk_size: int = 256) -> list[np.ndarray]:
    """Predictions in original agent order, candidate observation shifted by its perturbation."""
    out: list[Optional[np.ndarray]] = [None] * len(instances)
    groups: dict[int, list[int]] = {}
    for pos, (si, _) in enumerate(instances):
        groups.setdefault(scenes[si].n, []).append(pos)
    for n in sorted(groups):
        members = groups[n]
        for s in range(0, len(members), chunk_size):
            chunk = members[s:s + chunk_size]
            obs = np.stack([scenes[instances[p][0]].observations() for p in chunk])
            if perturbations is not None:
                for k, p in enumerate(chunk):
                    obs[k, instances[p][1]] += perturbations[p]
            preds = predictor.predict_batch(obs)
            for k, p in enumerate(chunk):
                out[p] = preds[k]
    return out  # type: ignore[return-value]


def _collided(preds: np.ndarray, cand: int, gamma: float) -> bool:
    return check_collision(distance_matrix(preds, cand), gamma) is not None


# transfer ---------------------------------------------------------------------

def transfer_eval(archive: Sequence[dict], target, scenes: Sequence[Scene],
                  gamma: float = 0.2) -> tuple[float, list[bool]]:
    """Collision rate of ``target`` on archived perturbations (no optimisation).

    Evaluated over exactly the archived (scene, candidate) instances.
    """
    if not archive:
        raise EmptyDatasetError("empty perturbation archive")
    index = {s.scene_id: i for i, s in enumerate(scenes)}
    instances, perts = [], []
    for rec in archive:
        si = index.get(rec["scene_id"])
        if si is None:
            raise ArchiveMismatchError(f"archive scene {rec['scene_id']!r} not in dataset")
        cand = int(rec["candidate_index"])
        scene = scenes[si]
        if "agent_id" in rec and rec["agent_id"] and scene.agents[cand].agent_id != rec["agent_id"]:
            raise ArchiveMismatchError(f"agent mismatch in scene {rec['scene_id']!r}")
        r = np.asarray(rec["R"], dtype=np.float64)
        if r.shape != (scene.t_obs, 2):
            raise ArchiveMismatchError(f"perturbation shape {r.shape} does not fit scene {scene.scene_id}")
        instances.append((si, cand))
        perts.append(r)
    preds = predict_instances(scenes, instances, target, perts)
    flags = [_collided(p, c, gamma) for p, (_, c) in zip(preds, instances)]
    return metric_cr(flags), flags


# evaluation -------------------------------------------------------------------

def evaluate_model(predictor, scenes: Sequence[Scene], attack_cfg: Optional[AttackConfig] = None,
                   seed: int = 0, jobs: int = 1, gamma: Optional[float] = None) -> dict:
    """ADE/FDE over all agents, original CR, and (if ``attack_cfg``) attacked CR."""
    scenes = list(scenes)
    if not scenes:
        raise EmptyDatasetError("no scenes to evaluate")
    preds = predictor.predict_batch(np.stack([s.observations() for s in scenes])) \
        if len({(s.n, s.t_obs) for s in scenes}) == 1 else \
        [predictor.predict_batch(s.observations()[None])[0] for s in scenes]
    out = {}
    if all(s.has_futures for s in scenes):
        err = np.array([metric_ade_fde(p, s) for p, s in zip(preds, scenes)])
        out["ade"], out["fde"] = float(err[:, 0].mean()), float(err[:, 1].mean())
    instances = expand_instances(scenes)
    if instances:
        if gamma is None:
            gamma = attack_cfg.gamma if attack_cfg is not None else 0.2
        out["cr_original"] = metric_cr([_collided(preds[si], c, gamma) for si, c in instances])
    if attack_cfg is not None and instances:
        reports = attack_instances(scenes, instances, predictor, attack_cfg, seed, jobs)
        out["cr_attacked"] = metric_cr(reports)
        hit = [r.p_avg for r in reports if r.collided]
        out["p_avg_attacked"] = float(np.mean(hit)) if hit else None
    return out


# adversarial fine-tuning --------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 40
    lr: float = 2e-3
    batch_size: int = 64
    attack_iters: int = 20
    augmentation: str = "sattack"   # or "random"
    seed: int = 0

    def __post_init__(self):
        if self.augmentation not in ("sattack", "random"):
            raise ValueError("augmentation must be 'sattack' or 'random'")


def _adversarial_batch(scenes, idx, cands, model, attack_cfg, ft: FinetuneConfig, rng):
    perms = [candidate_order(scenes[i].n, c) for i, c in zip(idx, cands)]
    obs = np.stack([scenes[i].observations()[p] for i, p in zip(idx, perms)])
    fut = np.stack([scenes[i].futures()[p] for i, p in zip(idx, perms)])
    if ft.augmentation == "random":
        r = np.stack([random_rows(rng, obs.shape[2], attack_cfg.epsilon) * rng.uniform(0, 1)
                      for _ in idx])
    else:
        cfg = dataclasses.replace(attack_cfg, mode="soft", max_iters=ft.attack_iters,
                                  freeze_neighbors=False)
        r = attack_batch(obs, model, cfg).perturbation
    adv = obs.copy()
    adv[:, 0] += r
    # 1:1 mix of clean and perturbed inputs, both with clean targets
    return np.concatenate([obs, adv]), np.concatenate([fut, fut])


def adversarial_finetune(params: PoolLiteParams, train_scenes: Sequence[Scene],
                         attack_cfg: AttackConfig = AttackConfig(epsilon=0.03),
                         ft: FinetuneConfig = FinetuneConfig(),
                         eval_scenes: Optional[Sequence[Scene]] = None,
                         eval_seed: int = 0, jobs: int = 1) -> tuple[PoolLiteParams, dict]:
    """Continue training on clean + attacked copies of each batch.

    Returns new parameters (the input snapshot is untouched) and, when
    ``eval_scenes`` is given, a before/after table of ADE, FDE, original
    and attacked collision rate.
    """
    train_scenes = list(train_scenes)
    if not train_scenes:
        raise EmptyDatasetError("no fine-tuning scenes")
    metrics = {}
    if eval_scenes is not None:
        metrics["before"] = evaluate_model(PoolLite(params), eval_scenes, attack_cfg, eval_seed, jobs)
    weights = {k: np.array(v) for k, v in params.weights.items()}
    opt = Adam(weights, TrainConfig(lr=ft.lr, seed=ft.seed))
    rng = np.random.default_rng(ft.seed)
    n_agents = [s.n for s in train_scenes]
    curve = []
    for epoch in range(ft.epochs):
        order = [int(i) for i in rng.permutation(len(train_scenes))]
        total, count = 0.0, 0
        for bt in group_by_agents(n_agents, order, ft.batch_size):
            if train_scenes[bt[0]].n < 2:
                continue
            cands = [int(rng.integers(train_scenes[i].n)) for i in bt]
            model = PoolLite(params.replace(weights))
            obs, fut = _adversarial_batch(train_scenes, bt, cands, model, attack_cfg, ft, rng)
            weights, loss = sgd_step(params, weights, opt, obs, fut)
            total += loss * len(bt)
            count += len(bt)
        curve.append(total / max(count, 1))
        log.info("finetune epoch %d loss %.5f", epoch, curve[-1])
    new = params.replace(weights, finetune_epochs=ft.epochs, augmentation=ft.augmentation,
                         finetune_epsilon=attack_cfg.epsilon) if ft.epochs else params
    metrics["loss_curve"] = curve
    if eval_scenes is not None:
        metrics["after"] = metrics["before"] if ft.epochs == 0 else \
            evaluate_model(PoolLite(new), eval_scenes, attack_cfg, eval_seed, jobs)
    return new, metrics


def finetune_table(rows: dict[str, dict]) -> str:
    """Plain-text table: model | ADE/FDE | original CR (gain) | attacked CR (gain)."""
    base = next(iter(rows.values()))
    lines = [f"{'model':<28}{'ADE/FDE [m]':>16}{'CR orig [%]':>13}{'gain [%]':>10}"
             f"{'CR att [%]':>12}{'gain [%]':>10}"]
    for name, m in rows.items():
        g0 = _gain(base["cr_original"], m["cr_original"])
        g1 = _gain(base["cr_attacked"], m["cr_attacked"])
        lines.append(f"{name:<28}{m['ade']:>8.3f}/{m['fde']:<7.3f}{m['cr_original']:>13.1f}{g0:>10.1f}"
                     f"{m['cr_attacked']:>12.1f}{g1:>10.1f}")
    return "\n".join(lines) + "\n"


def _gain(before: float, after: float) -> float:
    return 0.0 if before == 0 else 100.0 * (before - after) / before


# sensitivity --------------------------------------------------------------------

def timestep_sensitivity(predictor, scenes: Sequence[Scene], magnitude: float = 0.2, trials: int = 20,
                         seed: int = 0, archive: Optional[Sequence[dict]] = None) -> dict:
    """Mean change of all predictions when one observed point of the candidate moves.

    For every (scene, candidate) instance and observation timestep ``t``,
    ``trials`` offsets of norm ``magnitude`` in uniformly random directions
    are added at ``t`` only. Returns the per-timestep mean displacement of
    all predicted points and, if an attack archive is given, the mean
    perturbation norm per timestep of its records.
    """
    scenes = list(scenes)
    if not scenes:
        raise EmptyDatasetError("sensitivity needs at least one scene")
    t_obs = scenes[0].t_obs
    sums = np.zeros(t_obs)
    count = 0
    for si, scene in enumerate(scenes):
        obs = scene.observations()
        clean = predictor.predict_batch(obs[None])[0]
        for cand in range(scene.n):
            rng = np.random.default_rng([seed, si, cand])
            theta = rng.uniform(0, 2 * np.pi, size=(t_obs, trials))
            batch = np.repeat(obs[None], t_obs * trials, axis=0)
            for t in range(t_obs):
                rows = slice(t * trials, (t + 1) * trials)
                batch[rows, cand, t, 0] += magnitude * np.cos(theta[t])
                batch[rows, cand, t, 1] += magnitude * np.sin(theta[t])
            preds = predictor.predict_batch(batch)
            change = row_norms(preds - clean[None]).mean(axis=(1, 2))
            sums += change.reshape(t_obs, trials).mean(axis=1)
            count += 1
    result = {"timestep": list(range(1, t_obs + 1)), "sensitivity": (sums / count).tolist()}
    if archive:
        rows = np.stack([np.asarray(rec["R"]) for rec in archive])
        result["perturbation_norm"] = row_norms(rows).mean(axis=0).tolist()
    return result


# frozen neighbors -----------------------------------------------------------------

def frozen_neighbor_study(predictor, scenes: Sequence[Scene], cfg: AttackConfig = AttackConfig(),
                          seed: int = 0, jobs: int = 1) -> dict:
    scenes = list(scenes)
    if not scenes:
        raise EmptyDatasetError("frozen-neighbor study needs at least one scene")
    live, live_summary = attack_dataset(scenes, predictor, dataclasses.replace(cfg, freeze_neighbors=False),
                                        seed, jobs)
    frozen, frozen_summary = attack_dataset(scenes, predictor, dataclasses.replace(cfg, freeze_neighbors=True),
                                            seed, jobs)
    paired = [
        {"scene_id": a.scene_id, "candidate_index": a.candidate_index,
         "live": a.collided, "frozen": b.collided}
        for a, b in zip(live, frozen)
    ]
    return {"cr_live": live_summary["cr"], "cr_frozen": frozen_summary["cr"], "paired": paired,
            "live_reports": live, "frozen_reports": frozen}


# neighbor-neighbor collisions -------------------------------------------------------

def neighbor_collision_scan(reports: Sequence[AttackReport], gamma: float = 0.2) -> int:
    """Instances where two neighbors collide after the attack but not before it."""
    count = 0
    for r in reports:
        before = min_neighbor_pair_distance(r.predictions_before, r.candidate_index)
        after = min_neighbor_pair_distance(r.predictions_after, r.candidate_index)
        count += after < gamma <= before
    return count


def write_jsonl(rows: Sequence[dict], path) -> None:
    with open(Path(path), "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
