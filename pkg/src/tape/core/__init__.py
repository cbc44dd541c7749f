"""Reverse-mode autodiff engine, dense ops and the Adam optimizer."""

from . import ops
from .adam import AdamState, adam_step
from .attention import init_attention, multi_head_attention
from .gradcheck import gradcheck, numerical_grad, relative_error
from .params import ParameterStore, ParamView
from .tensor import Tape, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "AdamState",
    "ParamView",
    "ParameterStore",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "gradcheck",
    "init_attention",
    "is_grad_enabled",
    "multi_head_attention",
    "no_grad",
    "numerical_grad",
    "ops",
    "relative_error",
]
