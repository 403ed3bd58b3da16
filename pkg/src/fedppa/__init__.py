"""Federated learning simulator for clients with heterogeneous architectures.

Strategies: FedAvg (per-architecture averaging), MaxCommon (averaging over
maximal shared layer prefixes), FedPPA (MaxCommon plus progressive per-layer
alignment) and FedPPA+ (FedPPA with label-entropy aggregation weights).
"""
from .alignment import AlignmentConfig, progressive_align
from .config import parse_config
from .data import PartitionConfig, entropy_weights, load_bundled_mnist, load_idx, partition_dirichlet, synth_dataset
from .errors import ConfigError, ConsistencyError, DimensionError, FedError, FormatError, InputError, NumericError
from .nn import LayerSpec, ModelArchitecture, ParameterSet, SgdConfig, init_params
from .orchestrator import STRATEGIES, DataConfig, RunConfig, build_federation, run_experiment, run_round
from .zoo import build_family, extract_max_common_layers

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig",
    "ConfigError",
    "ConsistencyError",
    "DataConfig",
    "DimensionError",
    "FedError",
    "FormatError",
    "InputError",
    "LayerSpec",
    "ModelArchitecture",
    "NumericError",
    "ParameterSet",
    "PartitionConfig",
    "RunConfig",
    "STRATEGIES",
    "SgdConfig",
    "build_family",
    "build_federation",
    "entropy_weights",
    "extract_max_common_layers",
    "init_params",
    "load_bundled_mnist",
    "load_idx",
    "parse_config",
    "partition_dirichlet",
    "progressive_align",
    "run_experiment",
    "run_round",
    "synth_dataset",
]
