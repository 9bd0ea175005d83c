"""peftlab: pluggable parameter-efficient fine-tuning methods, composition
blocks, and a full adapter lifecycle on a self-contained numpy encoder."""

from .composition import (Average, BatchSplit, CompositionError, Fuse, Leaf,
                          Parallel, Split, Stack, parse_setup,
                          validate_composition)
from .configs import (AdapterConfig, BottleneckConfig, CompacterConfig,
                      ConfigError, ConfigUnion, IA3Config, LoraConfig,
                      PrefixTuningConfig, PromptTuningConfig, config_label,
                      count_params, parse_config, validate_config)
from .methods import StateError
from .model import (DESK_DIMS, DIM_PRESETS, ROBERTA_BASE_DIMS, CapacityError,
                    InputError, ModelDims, TransformerEncoder)
from .registry import AdapterModel, RegistryError
from .tasks import TaskSpec, make_task
from .tensor import ContractError, ShapeError, Tape, Tensor, backward, grad_check
from .training import Adam, CellRecord, GridSpec, best_metric, run_grid, train_model

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "AdapterModel", "Adam", "Average", "BatchSplit",
    "BottleneckConfig", "CapacityError", "CellRecord", "CompacterConfig",
    "CompositionError", "ConfigError", "ConfigUnion", "ContractError",
    "DESK_DIMS", "DIM_PRESETS", "Fuse", "GridSpec", "IA3Config", "InputError",
    "Leaf", "LoraConfig", "ModelDims", "Parallel", "PrefixTuningConfig",
    "PromptTuningConfig", "ROBERTA_BASE_DIMS", "RegistryError", "ShapeError",
    "Split", "Stack", "StateError", "Tape", "TaskSpec", "Tensor",
    "TransformerEncoder", "backward", "best_metric", "config_label",
    "count_params", "grad_check", "make_task", "parse_config", "parse_setup",
    "run_grid", "train_model", "validate_composition", "validate_config",
]
