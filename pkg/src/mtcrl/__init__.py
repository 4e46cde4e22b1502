"""Maximum-total-correlation soft actor-critic on small control tasks, with a numpy autodiff core."""
from .envs import PerturbationConfig, make_env
from .models import ModelSet
from .trainer import TrainConfig, Trainer, run

__version__ = "0.1.0"

__all__ = ["ModelSet", "PerturbationConfig", "TrainConfig", "Trainer", "make_env", "run", "__version__"]
