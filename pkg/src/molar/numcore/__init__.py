from molar.numcore.gradcheck import GradcheckReport, finite_diff_gradcheck, relative_error
from molar.numcore.nn import (AttentionBlock, GRUCell, LayerNorm, Module, attention_block,
                              causal_mask, gru_cell)
from molar.numcore.optim import AdamState, LrSchedule, adam_update, clip_grad_norm, lr_schedule
from molar.numcore.tensor import Parameter, Tensor, as_tensor

__all__ = [
    "AdamState", "AttentionBlock", "GRUCell", "GradcheckReport", "LayerNorm", "LrSchedule",
    "Module", "Parameter", "Tensor", "adam_update", "as_tensor", "attention_block",
    "causal_mask", "clip_grad_norm", "finite_diff_gradcheck", "gru_cell", "lr_schedule",
    "relative_error",
]
