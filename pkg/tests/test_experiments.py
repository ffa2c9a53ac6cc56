import numpy as np
import pytest

from sattack import data_io
from sattack.attack import attack_dataset
from sattack.core import AttackConfig, AttackReport, EmptyDatasetError
from sattack.experiments import (ArchiveMismatchError, FinetuneConfig, adversarial_finetune, evaluate_model,
                                 finetune_table, frozen_neighbor_study, neighbor_collision_scan,
                                 timestep_sensitivity, transfer_eval)
from sattack.predictors import ConstantVelocity, PoolLite, PoolLiteParams, SocialForces, TrainConfig, train_pool_lite


@pytest.fixture(scope="module")
def scenes():
    return data_io.generate_synthetic("mixed", 0.01, 12, 21)


@pytest.fixture(scope="module")
def params(scenes):
    p, _ = train_pool_lite(scenes, TrainConfig(epochs=3, batch_size=8), hidden=8)
    return p


def _archive(reports):
    return [data_io.archive_record(r, "x", r.agent_id) for r in reports]


# transfer ---------------------------------------------------------------------------

def test_self_transfer_reproduces_flags(scenes, params):
    m = PoolLite(params)
    reps, summary = attack_dataset(scenes, m, AttackConfig(max_iters=20))
    cr, flags = transfer_eval(_archive(reps), m, scenes)
    assert flags == [r.collided for r in reps]
    assert cr == summary["cr"]


def test_zero_archive_gives_original_cr(scenes):
    reps, summary = attack_dataset(scenes, ConstantVelocity(), AttackConfig(max_iters=5))
    zero = _archive(reps)
    for rec in zero:
        rec["R"] = np.zeros_like(np.asarray(rec["R"]))
    target = SocialForces()
    cr, _ = transfer_eval(zero, target, scenes)
    m = evaluate_model(target, scenes)
    assert cr == m["cr_original"]


def test_transfer_rejects_unknown_scene(scenes):
    rec = {"scene_id": "nope", "candidate_index": 0, "R": np.zeros((9, 2))}
    with pytest.raises(ArchiveMismatchError):
        transfer_eval([rec], ConstantVelocity(), scenes)
    with pytest.raises(EmptyDatasetError):
        transfer_eval([], ConstantVelocity(), scenes)


# fine-tuning ------------------------------------------------------------------------

def test_zero_epochs_keeps_metrics(scenes, params):
    new, metrics = adversarial_finetune(params, scenes, AttackConfig(epsilon=0.03, max_iters=5),
                                        FinetuneConfig(epochs=0), eval_scenes=scenes[:4])
    assert new.digest() == params.digest()
    assert metrics["before"] == metrics["after"]


@pytest.mark.parametrize("aug", ["sattack", "random"])
def test_finetune_changes_copy_only(scenes, params, aug):
    digest = params.digest()
    new, metrics = adversarial_finetune(params, scenes, AttackConfig(epsilon=0.03),
                                        FinetuneConfig(epochs=1, attack_iters=3, augmentation=aug, batch_size=8))
    assert params.digest() == digest
    assert new.digest() != digest
    assert new.meta["augmentation"] == aug
    assert len(metrics["loss_curve"]) == 1


def test_finetune_is_deterministic(scenes, params):
    ft = FinetuneConfig(epochs=1, attack_iters=3, batch_size=8, seed=3)
    a, _ = adversarial_finetune(params, scenes, AttackConfig(epsilon=0.03), ft)
    b, _ = adversarial_finetune(params, scenes, AttackConfig(epsilon=0.03), ft)
    assert a.digest() == b.digest()


def test_finetune_table_layout():
    row = {"ade": 0.5, "fde": 1.0, "cr_original": 4.0, "cr_attacked": 40.0}
    text = finetune_table({"base": row, "tuned": {**row, "cr_attacked": 20.0}})
    assert "50.0" in text.splitlines()[2]


# sensitivity ------------------------------------------------------------------------

def test_zero_magnitude_gives_zero_curve(scenes, params):
    res = timestep_sensitivity(PoolLite(params), scenes[:3], magnitude=0.0, trials=2)
    assert res["sensitivity"] == [0.0] * 9


def test_cv_sensitivity_only_last_two(scenes):
    s = timestep_sensitivity(ConstantVelocity(), scenes[:4], trials=5)["sensitivity"]
    assert all(v == 0.0 for v in s[:-2])
    assert min(s[-2:]) > 0


def test_sensitivity_companion_curve(scenes):
    reps, _ = attack_dataset(scenes[:3], ConstantVelocity(), AttackConfig(max_iters=10))
    res = timestep_sensitivity(ConstantVelocity(), scenes[:3], trials=2, archive=_archive(reps))
    assert len(res["perturbation_norm"]) == 9
    assert max(res["perturbation_norm"]) <= 0.2 + 1e-12


def test_sensitivity_empty():
    with pytest.raises(EmptyDatasetError):
        timestep_sensitivity(ConstantVelocity(), [])


# frozen neighbors and neighbor collisions --------------------------------------------

def test_frozen_study_with_cv_is_noop(scenes):
    res = frozen_neighbor_study(ConstantVelocity(), scenes, AttackConfig(max_iters=20))
    assert res["cr_live"] == res["cr_frozen"]
    assert all(p["live"] == p["frozen"] for p in res["paired"])
    with pytest.raises(EmptyDatasetError):
        frozen_neighbor_study(ConstantVelocity(), [])


def _report(before, after, cand=0):
    return AttackReport("s", cand, False, None, 1, 0.0, np.zeros((9, 2)), before, after)


def test_neighbor_scan_examples():
    two = np.zeros((2, 3, 2))
    assert neighbor_collision_scan([_report(two, two)]) == 0
    three = np.zeros((3, 3, 2))
    three[1] += [1.0, 0.0]
    three[2] += [2.0, 0.0]
    assert neighbor_collision_scan([_report(three, three)]) == 0
    after = three.copy()
    after[2, -1] = after[1, -1] + [0.1, 0.0]
    assert neighbor_collision_scan([_report(three, after)]) == 1
    # already colliding before the attack does not count
    assert neighbor_collision_scan([_report(after, after)]) == 0
