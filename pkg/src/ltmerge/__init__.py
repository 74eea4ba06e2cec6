"""Token-merging masks for small vision transformers, updated by descent on an IB bound."""

from .flops import merge_flops_efficient, merge_flops_regular, model_flops
from .ib import ClusterState, gradcheck, ibb_bound, ibb_grad
from .mask import init_mask, merge_tokens, normalize_mask, update_mask
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .transformer import LTMNet, ModelSpec

__version__ = "0.1.0"

__all__ = [
    "ClusterState", "LTMNet", "ModelSpec", "TrainConfig", "evaluate", "gradcheck", "ibb_bound",
    "ibb_grad", "init_mask", "load_checkpoint", "merge_flops_efficient", "merge_flops_regular",
    "merge_tokens", "model_flops", "normalize_mask", "save_checkpoint", "train", "update_mask",
]
