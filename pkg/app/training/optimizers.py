# app/training/optimizers.py
from dataclasses import dataclass
from typing import Dict, Optional, Tuple
import logging

import torch

from app.autodiff.tensor_ops import ParamVector
from app.core.models import OptimizerKind, OptimizerSettings

logger = logging.getLogger(__name__)


@dataclass
class MomentumState:
    buffer: Optional[torch.Tensor] = None

    def buffer_for(self, p: ParamVector) -> torch.Tensor:
        if self.buffer is None:
            return torch.zeros_like(p.values)
        return self.buffer

    def clone(self) -> "MomentumState":
        return MomentumState(None if self.buffer is None else self.buffer.clone())


def sgd_momentum_step(
    p: ParamVector, g: ParamVector, state: MomentumState, lr: float, momentum: float, weight_decay: float,
) -> Tuple[ParamVector, MomentumState]:
    """m ← momentum·m + (g + wd·p); p ← p − lr·m."""
    p.require_same_layout(g)
    direction = g.values + weight_decay * p.values
    m = momentum * state.buffer_for(p) + direction
    return p.with_values(p.values - lr * m), MomentumState(m)


def _is_bias_or_norm(shape: Tuple[int, ...]) -> bool:
    return len(shape) == 1


def local_learning_rates(
    p: ParamVector, g: ParamVector, weight_decay: float, trust_coefficient: float,
    exclude_bias_and_norm: bool = False,
) -> Dict[str, float]:
    """Per-segment LARS trust ratio; 1 when either norm vanishes."""
    p.require_same_layout(g)
    rates = {}
    for seg, p_seg in p.items():
        if exclude_bias_and_norm and _is_bias_or_norm(seg.shape):
            rates[seg.name] = 1.0
            continue
        g_seg = g.values[seg.offset:seg.stop]
        p_norm = float(torch.linalg.vector_norm(p_seg))
        d_norm = float(torch.linalg.vector_norm(g_seg + weight_decay * p_seg))
        rates[seg.name] = trust_coefficient * p_norm / d_norm if p_norm > 0 and d_norm > 0 else 1.0
    return rates


def lars_step(
    p: ParamVector, g: ParamVector, state: MomentumState, base_lr: float, momentum: float,
    weight_decay: float, trust_coefficient: float, exclude_bias_and_norm: bool = False,
) -> Tuple[ParamVector, MomentumState]:
    """
    Layer-wise adaptive rate scaling.

    Each segment's decayed gradient g + wd·p is scaled by its trust ratio
    before entering the momentum buffer. With exclude_bias_and_norm,
    one-dimensional segments skip both weight decay and scaling.
    """
    rates = local_learning_rates(p, g, weight_decay, trust_coefficient, exclude_bias_and_norm)
    pieces = []
    for seg, p_seg in p.items():
        g_seg = g.values[seg.offset:seg.stop]
        if exclude_bias_and_norm and _is_bias_or_norm(seg.shape):
            pieces.append(g_seg)
        else:
            pieces.append((g_seg + weight_decay * p_seg) * rates[seg.name])
    scaled = torch.cat(pieces) if pieces else torch.zeros_like(p.values)
    m = momentum * state.buffer_for(p) + scaled
    return p.with_values(p.values - base_lr * m), MomentumState(m)


def optimizer_step(
    settings: OptimizerSettings, p: ParamVector, g: ParamVector, state: MomentumState, lr: float,
) -> Tuple[ParamVector, MomentumState]:
    if settings.kind is OptimizerKind.LARS:
        return lars_step(
            p, g, state, lr, settings.momentum, settings.weight_decay,
            settings.trust_coefficient, settings.exclude_bias_and_norm,
        )
    return sgd_momentum_step(p, g, state, lr, settings.momentum, settings.weight_decay)
