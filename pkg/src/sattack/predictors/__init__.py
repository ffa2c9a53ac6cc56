from .base import DifferentiablePredictor, Predictor, predict_scene
from .constant_velocity import ConstantVelocity
from .pool_lite import CheckpointError, PoolLite, PoolLiteParams
from .social_forces import SocialForces, SocialForcesParams, simulate
from .training import TrainConfig, train_pool_lite


def load_model(spec: str, t_pred: int = 12):
    """Build a predictor from a CLI-style spec: ``cv``, ``sf`` or ``pool-lite:<ckpt>``."""
    if spec == "cv":
        return ConstantVelocity(t_pred)
    if spec in ("sf", "social-forces"):
        return SocialForces(t_pred=t_pred)
    if spec.startswith("pool-lite:"):
        return PoolLite(PoolLiteParams.load(spec.split(":", 1)[1]))
    raise ValueError(f"unknown model {spec!r}; expected cv, sf or pool-lite:<checkpoint>")


__all__ = [
    "Predictor", "DifferentiablePredictor", "predict_scene", "ConstantVelocity",
    "PoolLite", "PoolLiteParams", "CheckpointError", "SocialForces",
    "SocialForcesParams", "simulate", "TrainConfig", "train_pool_lite", "load_model",
]
