import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sattack import autodiff as ad
from sattack.core import InsufficientHistoryError, Scene, Agent, ShapeError
from sattack.predictors import (ConstantVelocity, PoolLite, PoolLiteParams, SocialForces, SocialForcesParams,
                                TrainConfig, load_model, train_pool_lite)
from sattack.predictors.pool_lite import CheckpointError
from sattack.predictors.training import group_by_agents

from gradcheck import numeric_grad, rel_error


def _obs(b=2, n=3, t=9, seed=0):
    rng = np.random.default_rng(seed)
    start = rng.uniform(-3, 3, size=(b, n, 1, 2))
    vel = rng.uniform(-0.5, 0.5, size=(b, n, 1, 2))
    return start + vel * np.arange(t)[None, None, :, None] + rng.normal(0, 0.02, size=(b, n, t, 2))


def _head_on():
    k = np.arange(9)
    a = np.stack([-3 - 0.4 * (8 - k), 0.0 * k], axis=1)
    return np.stack([a, a * [-1, 1]])[None]


# constant velocity ---------------------------------------------------------------

def test_cv_extrapolates_last_step():
    obs = np.zeros((1, 1, 9, 2))
    obs[0, 0, :, 0] = np.arange(9) * 0.4
    pred = ConstantVelocity().predict_batch(obs)
    np.testing.assert_allclose(pred[0, 0, :, 0], 3.2 + 0.4 * np.arange(1, 13))
    np.testing.assert_array_equal(pred[0, 0, :, 1], 0.0)


def test_cv_gradient_only_on_last_two_points():
    tape = ad.Tape()
    obs = tape.leaf(_obs(1, 2))
    g = tape.backward(ad.sum(ConstantVelocity().forward(obs)))[obs]
    assert np.all(g[:, :, :-2] == 0.0)
    # d/d last = sum_k (1 + k), d/d previous = -sum_k k
    np.testing.assert_allclose(g[0, 0, -1], 90.0)
    np.testing.assert_allclose(g[0, 0, -2], -78.0)


def test_history_too_short():
    with pytest.raises(InsufficientHistoryError):
        ConstantVelocity().predict_batch(np.zeros((1, 2, 1, 2)))
    with pytest.raises(ShapeError):
        ConstantVelocity().predict_batch(np.zeros((2, 9, 2)))


# pool-lite -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def params():
    return PoolLiteParams.init(hidden=8, seed=3)


def test_pool_lite_shapes_and_determinism(params):
    m = PoolLite(params)
    obs = _obs()
    a, b = m.predict_batch(obs), m.predict_batch(obs)
    assert a.shape == (2, 3, 12, 2)
    assert a.tobytes() == b.tobytes()


def test_zero_head_predicts_stationary(params):
    w = dict(params.weights)
    w["dec_w2"] = np.zeros_like(w["dec_w2"])
    w["dec_b2"] = np.zeros_like(w["dec_b2"])
    obs = _obs()
    pred = PoolLite(params.replace(w)).predict_batch(obs)
    np.testing.assert_array_equal(pred, np.repeat(obs[:, :, -1:], 12, axis=2))


def test_single_agent_scene(params):
    pred = PoolLite(params).predict_batch(_obs(1, 1))
    assert pred.shape == (1, 1, 12, 2) and np.all(np.isfinite(pred))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-20, 20), st.floats(-20, 20))
def test_pool_lite_translation_equivariant(seed, dx, dy):
    p = PoolLiteParams.init(hidden=8, seed=1)
    obs = _obs(1, 3, seed=seed)
    shift = np.array([dx, dy])
    a = PoolLite(p).predict_batch(obs) + shift
    b = PoolLite(p).predict_batch(obs + shift)
    np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_pool_lite_permutation_equivariant(seed):
    p = PoolLiteParams.init(hidden=8, seed=1)
    obs = _obs(1, 4, seed=seed)
    perm = np.random.default_rng(seed).permutation(4)
    a = PoolLite(p).predict_batch(obs)[:, perm]
    b = PoolLite(p).predict_batch(obs[:, perm])
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_pool_lite_gradient_matches_finite_differences(params, seed):
    obs = _obs(1, 3, seed=seed)
    m = PoolLite(params)
    tape = ad.Tape()
    leaf = tape.leaf(obs)
    g = tape.backward(ad.sum(ad.tanh(m.forward(leaf))))[leaf]
    num = numeric_grad(lambda x: float(np.sum(np.tanh(m.predict_batch(x)))), obs)
    assert rel_error(g, num) < 1e-4


def test_checkpoint_round_trip_and_hash_mismatch(params, tmp_path):
    path = tmp_path / "p.npz"
    params.save(path)
    back = PoolLiteParams.load(path)
    assert back.digest() == params.digest()
    assert back.architecture_hash() == params.architecture_hash()
    assert load_model(f"pool-lite:{path}").params.digest() == params.digest()

    import json
    with np.load(path) as z:
        meta = json.loads(str(z["__meta__"]))
        weights = {k: z[k] for k in z.files if k != "__meta__"}
    meta["architecture_hash"] = "0" * 16
    bad = tmp_path / "bad.npz"
    np.savez(bad, __meta__=np.array(json.dumps(meta)), **weights)
    with pytest.raises(CheckpointError):
        PoolLiteParams.load(bad)
    with pytest.raises(CheckpointError):
        PoolLiteParams.load(tmp_path / "missing.npz")


def test_params_are_read_only(params):
    with pytest.raises(ValueError):
        params.weights["dec_w2"][0, 0] = 1.0


def test_unknown_model_spec():
    with pytest.raises(ValueError):
        load_model("lstm")


# social forces ----------------------------------------------------------------------

def test_social_forces_defaults_file():
    p = SocialForcesParams.defaults()
    assert (p.tau, p.dt, p.v0) == (0.5, 0.4, None)


def test_head_on_keeps_distance_above_gamma_and_cv():
    obs = _head_on()
    sf = SocialForces().predict_batch(obs)[0]
    cv = ConstantVelocity().predict_batch(obs)[0]
    d_sf = np.linalg.norm(sf[0] - sf[1], axis=-1).min()
    d_cv = np.linalg.norm(cv[0] - cv[1], axis=-1).min()
    assert d_sf > 0.2
    assert d_sf > d_cv


def test_lone_walker_continues_straight():
    obs = _head_on()[:, :1]
    sf = SocialForces().predict_batch(obs)[0, 0]
    np.testing.assert_allclose(sf[:, 1], 0.0, atol=1e-12)
    assert np.all(np.diff(sf[:, 0]) > 0)


# training -----------------------------------------------------------------------------

def _line_scenes(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        pts = rng.uniform(-2, 2, size=(2, 1, 2)) + rng.uniform(-0.4, 0.4, size=(2, 1, 2)) * np.arange(21)[:, None]
        out.append(Scene(f"l{i}", tuple(Agent(str(a), pts[a, :9], pts[a, 9:]) for a in range(2))))
    return out


def test_training_reduces_loss():
    params, curve = train_pool_lite(_line_scenes(64), TrainConfig(epochs=8, lr=1e-2, batch_size=16), hidden=8)
    assert curve[-1] < 0.5 * curve[0]
    assert params.meta["epochs"] == 8


def test_zero_epochs_returns_init():
    init = PoolLiteParams.init(hidden=8, seed=5)
    params, curve = train_pool_lite(_line_scenes(4), TrainConfig(epochs=0), init=init)
    assert curve == [] and params is init


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=2, batch_size=8, seed=4)
    a, _ = train_pool_lite(_line_scenes(16), cfg, hidden=8)
    b, _ = train_pool_lite(_line_scenes(16), cfg, hidden=8)
    assert a.digest() == b.digest()


def test_group_by_agents_keeps_counts_homogeneous():
    n = [2, 3, 2, 3, 3, 2]
    batches = group_by_agents(n, [5, 0, 1, 4, 2, 3], 2)
    assert sorted(i for bt in batches for i in bt) == list(range(6))
    assert all(len({n[i] for i in bt}) == 1 for bt in batches)
    assert batches[0][0] == 5
