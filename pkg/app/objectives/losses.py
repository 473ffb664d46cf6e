# app/objectives/losses.py
"""
Loss functions and the Objective builders that bind a ModelSpec to them.

Coupled objectives take (backbone, head) as (params, aux). Use
`Objective.swapped()` to differentiate with respect to the head instead.
"""
from dataclasses import dataclass
from typing import Optional
import logging

import torch
import torch.nn.functional as F

from app.autodiff.tensor_ops import (
    Arity,
    Objective,
    ParamVector,
    eval_loss,
    value_and_grads,
)
from app.core.errors import DegenerateEmbeddingError, LayoutError
from app.core.models import HeadKind, ModelPart, ModelSpec
from app.networks.mlp import RunningStats, forward_backbone, forward_head, part_layout

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViewBatch:
    """Two augmented views of the same B samples."""
    view_a: torch.Tensor
    view_b: torch.Tensor

    def __post_init__(self):
        if self.view_a.shape != self.view_b.shape or self.view_a.dim() != 2 or self.view_a.shape[0] < 1:
            raise LayoutError(
                f"Views must be matching (B, N) tensors, got {tuple(self.view_a.shape)} and {tuple(self.view_b.shape)}"
            )


@dataclass(frozen=True)
class LabeledBatch:
    inputs: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.inputs.dim() != 2 or self.labels.dim() != 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise LayoutError(
                f"Labeled batch needs (B, N) inputs and (B,) labels, got {tuple(self.inputs.shape)} "
                f"and {tuple(self.labels.shape)}"
            )


def nt_xent(embeddings_a: torch.Tensor, embeddings_b: torch.Tensor, temperature: float) -> torch.Tensor:
    """
    Normalized temperature-scaled cross entropy over the 2B views.

    Similarity is cosine similarity divided by the temperature. Row i of
    view a is the positive for row i of view b and vice versa; every other
    row in either view is a negative. Self-pairs are excluded. The loss is
    the mean over all 2B anchors.
    """
    if embeddings_a.shape != embeddings_b.shape or embeddings_a.dim() != 2:
        raise LayoutError(
            f"Embeddings must be matching (B, d) tensors, got {tuple(embeddings_a.shape)} "
            f"and {tuple(embeddings_b.shape)}"
        )
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    batch = embeddings_a.shape[0]
    z = torch.cat([embeddings_a, embeddings_b], dim=0)
    norms = torch.linalg.vector_norm(z, dim=1)
    if bool((norms == 0).any()):
        raise DegenerateEmbeddingError("Zero-norm embedding; cosine similarity is undefined")
    z = z / norms.unsqueeze(1)
    sim = z @ z.T / temperature

    n = 2 * batch
    off_diagonal = ~torch.eye(n, dtype=torch.bool)
    logits = sim[off_diagonal].view(n, n - 1)
    # with the diagonal removed, the positive of anchor i < B sits in column i + B - 1
    targets = torch.cat([torch.arange(batch) + batch - 1, torch.arange(batch)])
    return F.cross_entropy(logits, targets)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.dim() != 2 or labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise LayoutError(f"Logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not match")
    return F.cross_entropy(logits, labels.long())


def l2_coupling(theta_a: ParamVector, theta_b: ParamVector) -> torch.Tensor:
    """½‖θ_a − θ_b‖²."""
    theta_a.require_same_layout(theta_b)
    diff = theta_a.values - theta_b.values
    return 0.5 * torch.dot(diff, diff)


def topk_accuracy(logits: torch.Tensor, labels: torch.Tensor, k: int = 1) -> float:
    k = max(1, min(k, logits.shape[-1]))
    top = logits.topk(k, dim=-1).indices
    hits = (top == labels.long().unsqueeze(-1)).any(dim=-1)
    return float(hits.double().mean())


# ==================== Objective builders ====================

def pretext_loss(
    spec: ModelSpec, theta: ParamVector, phi: ParamVector, batch: ViewBatch, temperature: float,
) -> torch.Tensor:
    z_a = forward_head(phi, forward_backbone(theta, batch.view_a, spec), HeadKind.PRETEXT, spec)
    z_b = forward_head(phi, forward_backbone(theta, batch.view_b, spec), HeadKind.PRETEXT, spec)
    return nt_xent(z_a, z_b, temperature)


def downstream_loss(
    spec: ModelSpec, theta: ParamVector, phi: ParamVector, batch: LabeledBatch,
    running_stats: Optional[RunningStats] = None,
) -> torch.Tensor:
    features = forward_backbone(theta, batch.inputs, spec, running_stats)
    return cross_entropy(forward_head(phi, features, HeadKind.DOWNSTREAM, spec), batch.labels)


def pretext_objective(spec: ModelSpec, temperature: float) -> Objective:
    """L^P(θ, φ_P) as a coupled objective over (backbone, projection head)."""
    return Objective(
        fn=lambda theta, phi, batch: pretext_loss(spec, theta, phi, batch, temperature),
        arity=Arity.COUPLED,
        layout=part_layout(spec, ModelPart.BACKBONE),
        aux_layout=part_layout(spec, ModelPart.PRETEXT_HEAD),
        name="pretext",
    )


def downstream_objective(spec: ModelSpec) -> Objective:
    """L^D(θ, φ_D) as a coupled objective over (backbone, linear head)."""
    return Objective(
        fn=lambda theta, phi, batch: downstream_loss(spec, theta, phi, batch),
        arity=Arity.COUPLED,
        layout=part_layout(spec, ModelPart.BACKBONE),
        aux_layout=part_layout(spec, ModelPart.DOWNSTREAM_HEAD),
        name="downstream",
    )


def head_objective(spec: ModelSpec) -> Objective:
    """Cross-entropy of the linear head on precomputed features (frozen backbone)."""
    def fn(phi: ParamVector, _aux: Optional[ParamVector], batch: LabeledBatch) -> torch.Tensor:
        return cross_entropy(forward_head(phi, batch.inputs, HeadKind.DOWNSTREAM, spec), batch.labels)

    return Objective(fn=fn, layout=part_layout(spec, ModelPart.DOWNSTREAM_HEAD), name="downstream_head")


def lower_level_objective(pretext: Objective, theta_d: ParamVector, lam: float) -> Objective:
    """G(θ_P, φ_P) = L^P(θ_P, φ_P) + λ·½‖θ_D − θ_P‖² with θ_D held fixed."""
    base = pretext.fn
    anchor = theta_d.clone()

    def fn(theta_p: ParamVector, phi_p: Optional[ParamVector], batch) -> torch.Tensor:
        return base(theta_p, phi_p, batch) + lam * l2_coupling(anchor, theta_p)

    return Objective(
        fn=fn, arity=pretext.arity, layout=pretext.layout, aux_layout=pretext.aux_layout,
        name=f"lower[{pretext.name}]",
    )


def lower_objective(
    pretext: Objective, theta_p: ParamVector, phi_p: ParamVector, theta_d: ParamVector,
    lam: float, batch: ViewBatch,
) -> float:
    return eval_loss(pretext, theta_p, batch, aux=phi_p) + lam * float(l2_coupling(theta_d, theta_p))


@dataclass(frozen=True)
class WeightedSumTerms:
    loss: float
    g_theta: ParamVector
    g_phi_p: ParamVector
    g_phi_d: ParamVector


def weighted_sum_objective(
    pretext: Objective, downstream: Objective, theta: ParamVector, phi_p: ParamVector,
    phi_d: ParamVector, w: float, pretext_batch: ViewBatch, downstream_batch: LabeledBatch,
) -> float:
    """w·L^D(θ, φ_D) + (1 − w)·L^P(θ, φ_P)."""
    _check_weight(w)
    return (
        w * eval_loss(downstream, theta, downstream_batch, aux=phi_d)
        + (1 - w) * eval_loss(pretext, theta, pretext_batch, aux=phi_p)
    )


def weighted_sum_gradients(
    pretext: Objective, downstream: Objective, theta: ParamVector, phi_p: ParamVector,
    phi_d: ParamVector, w: float, pretext_batch: ViewBatch, downstream_batch: LabeledBatch,
) -> WeightedSumTerms:
    """Gradients of each term are computed separately and summed after weighting."""
    _check_weight(w)
    loss_d, g_theta_d, g_phi_d = value_and_grads(downstream, theta, downstream_batch, aux=phi_d)
    loss_p, g_theta_p, g_phi_p = value_and_grads(pretext, theta, pretext_batch, aux=phi_p)
    return WeightedSumTerms(
        loss=w * loss_d + (1 - w) * loss_p,
        g_theta=g_theta_d * w + g_theta_p * (1 - w),
        g_phi_p=g_phi_p * (1 - w),
        g_phi_d=g_phi_d * w,
    )


def _check_weight(w: float) -> None:
    if not 0 <= w <= 1:
        raise ValueError(f"weight w must lie in [0, 1], got {w}")
