"""Stage-wise weight sharing for transformers.

Train an auxiliary ViT whose layers are tied within contiguous stages,
extract the per-stage layer sets as a learngene pack, and expand the pack
to initialize models of other depths that then fine-tune untied.
"""

from .data import Dataset, load_idx, make_synthetic, split
from .expand import DescendantSpec, InitOrder, init_descendant, simple_lg_expand, stage_partition
from .sharing import LearngenePack, StagePlan, balanced_plan, build_aux, custom_plan, extract_learngene
from .tensor import Tensor, backward, grad_check
from .train import LogitCache, TrainConfig, cache_teacher_logits, evaluate, train_model
from .vit import ModelConfig, ModelParams, build_model, count_params, forward_logits

__all__ = [
    "Dataset", "load_idx", "make_synthetic", "split",
    "DescendantSpec", "InitOrder", "init_descendant", "simple_lg_expand", "stage_partition",
    "LearngenePack", "StagePlan", "balanced_plan", "build_aux", "custom_plan", "extract_learngene",
    "Tensor", "backward", "grad_check",
    "LogitCache", "TrainConfig", "cache_teacher_logits", "evaluate", "train_model",
    "ModelConfig", "ModelParams", "build_model", "count_params", "forward_logits",
]

__version__ = "0.1.0"
