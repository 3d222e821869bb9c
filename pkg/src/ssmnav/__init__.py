"""Selective state space sequence models for graph navigation agents.

The package splits into a small autodiff substrate (`autodiff`, `params`),
sequence blocks built on one selective-scan primitive (`ssm`, `rss`, `cs3`,
`attention`), the navigation stack (`env`, `topomap`, `agent`), and the
harnesses around them (`training`, `profiler`, `cli`).  The names below are
the working surface; everything else is reachable through its module.
"""

from .agent import (
    ModelConfig, NavAgent, NavModel, load_checkpoint, model_config_for,
    new_model, save_checkpoint,
)
from .autodiff import Tensor, no_grad, tensor
from .env import Episode, World, WorldConfig, generate_world, make_episodes
from .params import ParamStore
from .profiler import Scenario, paper_scale_config, params_manifest, profile
from .ssm import DiscreteStep, discretize, scan
from .training import (
    TrainConfig, ablate, corpus_length_table, evaluate, rollout, train,
)

__version__ = "0.1.0"

__all__ = [
    "DiscreteStep", "Episode", "ModelConfig", "NavAgent", "NavModel",
    "ParamStore", "Scenario", "Tensor", "TrainConfig", "World", "WorldConfig",
    "ablate", "corpus_length_table", "discretize", "evaluate",
    "generate_world", "load_checkpoint", "make_episodes", "model_config_for",
    "new_model", "no_grad", "paper_scale_config", "params_manifest",
    "profile", "rollout", "save_checkpoint", "scan", "tensor", "train",
    "__version__",
]
