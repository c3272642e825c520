"""One-step conditional point-set generation with guided mean flows."""

__version__ = "0.1.0"

from .backbone import ConditionBundle, MeanVelocityNet, ModelConfig
from .config import RunConfig, load_config, parse_config
from .dsa import DsaConfig
from .estimator import MeanFlowPointGenerator
from .flow import GuidanceConfig
from .metrics import chamfer_l1, emd_hungarian, f_score
from .sampler import sample_fm_euler, sample_k_step, sample_one_step

__all__ = [
    "ConditionBundle",
    "DsaConfig",
    "GuidanceConfig",
    "MeanFlowPointGenerator",
    "MeanVelocityNet",
    "ModelConfig",
    "RunConfig",
    "chamfer_l1",
    "emd_hungarian",
    "f_score",
    "load_config",
    "parse_config",
    "sample_fm_euler",
    "sample_k_step",
    "sample_one_step",
]
