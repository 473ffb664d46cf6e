# app/autodiff/__init__.py
from .tensor_ops import Arity, Layout, Objective, ParamVector, Segment, eval_loss, grad, hvp, value_and_grads

__all__ = [
    "Arity",
    "Layout",
    "Objective",
    "ParamVector",
    "Segment",
    "eval_loss",
    "grad",
    "hvp",
    "value_and_grads",
]
