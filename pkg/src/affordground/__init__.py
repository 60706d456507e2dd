"""Language-guided affordance grounding on point clouds, built on a small
numpy autodiff engine with synthetic shape data."""

from .checkpoint import Checkpoint
from .config import RunConfig, desk_config, tiny_config
from .model import AffordanceModel
from .train import evaluate, train

__version__ = "0.1.0"

__all__ = ["AffordanceModel", "Checkpoint", "RunConfig", "desk_config", "evaluate", "tiny_config", "train"]
