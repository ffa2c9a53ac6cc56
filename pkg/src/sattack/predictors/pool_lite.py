"""Pool-lite: a small recurrent predictor with max-pooled neighbor features.

Per agent, a GRU cell encodes the observed displacement sequence. Decoding
is autoregressive: at every step each agent embeds the relative position
and relative velocity of every other agent with a 2-layer perceptron,
max-pools the embeddings, and a 2-layer head maps (hidden, pooled) to the
next displacement. The emitted displacement is fed back through the same
GRU cell, so every agent re-pools against everyone's latest predicted
position.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..core import ShapeError, SAttackError
from .base import check_obs

ARCH_NAME = "pool-lite-v1"
CHECKPOINT_VERSION = 1
# displacement per frame -> m/s at 2.5 fps, keeps network inputs O(1)
VEL_SCALE = 2.5
POS_SCALE = 0.5


class CheckpointError(SAttackError):
    pass


def param_shapes(hidden: int) -> dict[str, tuple[int, ...]]:
    h = hidden
    return {
        "enc_wx": (2, 3 * h), "enc_bx": (3 * h,),
        "enc_wh": (h, 3 * h), "enc_bh": (3 * h,),
        "emb_w1": (4, h), "emb_b1": (h,),
        "emb_w2": (h, h), "emb_b2": (h,),
        "dec_w1": (2 * h, h), "dec_b1": (h,),
        "dec_w2": (h, 2), "dec_b2": (2,),
    }


_FAN_IN = {
    "enc_wx": "enc_wx", "enc_bx": "enc_wx", "enc_wh": "enc_wh", "enc_bh": "enc_wh",
    "emb_w1": "emb_w1", "emb_b1": "emb_w1", "emb_w2": "emb_w2", "emb_b2": "emb_w2",
    "dec_w1": "dec_w1", "dec_b1": "dec_w1", "dec_w2": "dec_w2", "dec_b2": "dec_w2",
}


@dataclass(frozen=True)
class PoolLiteParams:
    weights: dict[str, np.ndarray]
    hidden: int = 32
    t_pred: int = 12
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.hidden)
        if set(self.weights) != set(expected):
            raise ShapeError(f"parameter names {sorted(self.weights)} != {sorted(expected)}")
        frozen = {}
        for k, shape in expected.items():
            w = np.array(self.weights[k], dtype=np.float64)
            if w.shape != shape:
                raise ShapeError(f"{k}: expected {shape}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{k} has non-finite entries")
            w.flags.writeable = False
            frozen[k] = w
        object.__setattr__(self, "weights", frozen)

    @classmethod
    def init(cls, hidden: int = 32, t_pred: int = 12, seed: int = 0) -> "PoolLiteParams":
        rng = np.random.default_rng(seed)
        shapes = param_shapes(hidden)
        weights = {}
        for k, shape in shapes.items():
            bound = 1.0 / np.sqrt(shapes[_FAN_IN[k]][0])
            weights[k] = rng.uniform(-bound, bound, size=shape)
        return cls(weights, hidden, t_pred, seed)

    def replace(self, weights: dict[str, np.ndarray], **meta) -> "PoolLiteParams":
        return PoolLiteParams(weights, self.hidden, self.t_pred, self.seed, {**self.meta, **meta})

    def architecture_hash(self) -> str:
        desc = {"arch": ARCH_NAME, "hidden": self.hidden, "t_pred": self.t_pred,
                "shapes": {k: list(v) for k, v in sorted(param_shapes(self.hidden).items())}}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(self.weights[k].tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        path = Path(path)
        meta = {
            "version": CHECKPOINT_VERSION, "arch": ARCH_NAME,
            "architecture_hash": self.architecture_hash(),
            "hidden": self.hidden, "t_pred": self.t_pred, "seed": self.seed,
            "meta": self.meta,
        }
        arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
        arrays.update((k, self.weights[k]) for k in sorted(self.weights))
        # np.savez stamps entries with the wall clock; fixed stamps keep files byte-identical
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())

    @classmethod
    def load(cls, path) -> "PoolLiteParams":
        try:
            with np.load(Path(path), allow_pickle=False) as z:
                meta = json.loads(str(z["__meta__"]))
                weights = {k: z[k] for k in z.files if k != "__meta__"}
        except (OSError, KeyError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        params = cls(weights, int(meta["hidden"]), int(meta["t_pred"]), int(meta["seed"]),
                     meta.get("meta", {}))
        if params.architecture_hash() != meta.get("architecture_hash"):
            raise CheckpointError("architecture hash mismatch")
        return params


def _gru(x, h, w, hidden):
    gx = x @ w["enc_wx"] + w["enc_bx"]
    gh = h @ w["enc_wh"] + w["enc_bh"]
    r = ad.sigmoid(gx[..., :hidden] + gh[..., :hidden])
    z = ad.sigmoid(gx[..., hidden:2 * hidden] + gh[..., hidden:2 * hidden])
    c = ad.tanh(gx[..., 2 * hidden:] + r * gh[..., 2 * hidden:])
    return c + z * (h - c)


def _pairwise(x, n):
    # (B, n, 2) -> (B, n, n, 2) with entry [i, j] = x_j - x_i
    return ad.reshape(x, (-1, 1, n, 2)) - ad.reshape(x, (-1, n, 1, 2))


def pool_lite_forward(obs: ad.Tensor, w: dict, hidden: int, t_pred: int) -> ad.Tensor:
    """obs (B, n, T_obs, 2) -> predictions (B, n, T_pred, 2).

    ``w`` maps parameter names to Tensors or arrays.
    """
    b, n, t_obs, _ = obs.shape
    disp = (obs[:, :, 1:, :] - obs[:, :, :-1, :]) * VEL_SCALE
    h = ad.Tensor(np.zeros((b, n, hidden)))
    for k in range(t_obs - 1):
        h = _gru(disp[:, :, k, :], h, w, hidden)

    offdiag = (1.0 - np.eye(n))[None, :, :, None]
    pos = obs[:, :, -1, :]
    vel = disp[:, :, -1, :]
    out = []
    for _ in range(t_pred):
        feat = ad.concatenate([_pairwise(pos, n) * POS_SCALE, _pairwise(vel, n)], axis=-1)
        e = ad.relu(feat @ w["emb_w1"] + w["emb_b1"])
        e = ad.relu(e @ w["emb_w2"] + w["emb_b2"]) * offdiag
        pooled = ad.max(e, axis=2)
        d = ad.relu(ad.concatenate([h, pooled], axis=-1) @ w["dec_w1"] + w["dec_b1"])
        vel = d @ w["dec_w2"] + w["dec_b2"]
        pos = pos + vel * (1.0 / VEL_SCALE)
        out.append(pos)
        h = _gru(vel, h, w, hidden)
    return ad.stack(out, axis=2)


class PoolLite:
    name = "pool-lite"
    differentiable = True

    def __init__(self, params: PoolLiteParams):
        self.params = params
        self.t_pred = params.t_pred

    def forward(self, obs: ad.Tensor) -> ad.Tensor:
        check_obs(obs.data)
        return pool_lite_forward(obs, self.params.weights, self.params.hidden, self.t_pred)

    def predict_batch(self, obs):
        obs = check_obs(obs)
        return self.forward(ad.Tensor(obs)).data
