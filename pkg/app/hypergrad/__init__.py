# app/hypergrad/__init__.py
from .implicit import HypergradReport, clip_by_norm, conjugate_gradient, ij_vector, lower_gradients, upper_gradients

__all__ = [
    "HypergradReport",
    "clip_by_norm",
    "conjugate_gradient",
    "ij_vector",
    "lower_gradients",
    "upper_gradients",
]
