"""Reference-conditioned rectified-flow transformer with group-shared attention,
LoRA adapters and flow-matching preference optimisation, on a numpy autodiff core."""

from .config import RunConfig, load_config, parse_config
from .data import generate_dataset, toy_identity_score, toy_style_score
from .dpo import DpoConfig, loss_dpo, train_stage2
from .flow import SamplerConfig, euler_sample, loss_flow_matching, loss_stage1, sample_timestep
from .model import DiT, ModelConfig, gsa_attention
from .tensor import ContractError, ShapeError, Tensor
from .train import train_stage1

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DiT",
    "DpoConfig",
    "ModelConfig",
    "RunConfig",
    "SamplerConfig",
    "ShapeError",
    "Tensor",
    "euler_sample",
    "generate_dataset",
    "gsa_attention",
    "load_config",
    "loss_dpo",
    "loss_flow_matching",
    "loss_stage1",
    "parse_config",
    "sample_timestep",
    "toy_identity_score",
    "toy_style_score",
    "train_stage1",
    "train_stage2",
]
