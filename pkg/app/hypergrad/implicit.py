# app/hypergrad/implicit.py
"""
Lower/upper gradients for the BiSSL bilevel problem.

The upper-level backbone gradient is

    g_θD = [I + H/λ]⁻¹ ∇_θ L^D(θ_P) + ∇_θ L^D(θ_D)

with H the Hessian of L^P at θ_P. The inverse is approximated by a few
conjugate-gradient iterations on the dampened operator
f_H(v) = v + H v / (λ + λ_damp), solved independently per layout segment
(the off-diagonal blocks of H are dropped).
"""
from dataclasses import dataclass
from typing import Any, Callable, List, Tuple
import logging
import math

import torch

from app.autodiff.tensor_ops import ParamVector, Objective, eval_loss, grad, hvp, value_and_grads
from app.core.models import CGConfig, FallbackPolicy
from app.objectives.losses import l2_coupling

logger = logging.getLogger(__name__)

LinearOperator = Callable[[ParamVector], ParamVector]


@dataclass(frozen=True)
class HypergradReport:
    cg_initial_residual: float
    cg_final_residual: float
    fell_back: bool
    ij_vector_norm: float
    cg_iterations: int

    @classmethod
    def skipped(cls) -> "HypergradReport":
        return cls(0.0, 0.0, False, 0.0, 0)


@dataclass(frozen=True)
class _SegmentSolve:
    x: torch.Tensor
    initial: float
    final: float
    iterations: int
    fell_back: bool


# ==================== Lower level ====================

@dataclass(frozen=True)
class LowerTerms:
    pretext_loss: float
    coupling: float
    g_theta: ParamVector
    g_phi: ParamVector

    @property
    def loss(self) -> float:
        return self.pretext_loss + self.coupling


def lower_step_terms(
    pretext: Objective, theta_p: ParamVector, phi_p: ParamVector, theta_d: ParamVector,
    lam: float, batch: Any,
) -> LowerTerms:
    theta_p.require_same_layout(theta_d)
    loss, g_theta, g_phi = value_and_grads(pretext, theta_p, batch, aux=phi_p)
    return LowerTerms(
        pretext_loss=loss,
        coupling=lam * float(l2_coupling(theta_d, theta_p)),
        g_theta=g_theta + (theta_p - theta_d) * lam,
        g_phi=g_phi,
    )


def lower_gradients(
    pretext: Objective, theta_p: ParamVector, phi_p: ParamVector, theta_d: ParamVector,
    lam: float, batch: Any,
) -> Tuple[ParamVector, ParamVector]:
    """(∇_θP G, ∇_φP G) with G = L^P + λ·½‖θ_D − θ_P‖²."""
    terms = lower_step_terms(pretext, theta_p, phi_p, theta_d, lam, batch)
    return terms.g_theta, terms.g_phi


# ==================== Implicit Jacobian ====================

def damped_hvp_operator(
    pretext: Objective, theta_p: ParamVector, phi_p: ParamVector, lam: float, damping: float, batch: Any,
) -> LinearOperator:
    if lam + damping <= 0:
        raise ValueError("lam + damping must be positive")
    scale = 1.0 / (lam + damping)

    def apply(v: ParamVector) -> ParamVector:
        return v + hvp(pretext, theta_p, batch, v, aux=phi_p) * scale

    return apply


def _cg_segment(matvec: Callable[[torch.Tensor], torch.Tensor], b: torch.Tensor, cfg: CGConfig) -> _SegmentSolve:
    x = torch.zeros_like(b)
    r = b.clone()
    p = r.clone()
    rr = float(torch.dot(r, r))
    initial = math.sqrt(rr)
    if initial == 0.0:
        return _SegmentSolve(x, 0.0, 0.0, 0, False)

    threshold = cfg.residual_tol * initial
    iterations = 0
    indefinite = False
    for _ in range(cfg.iterations):
        ap = matvec(p)
        curvature = float(torch.dot(p, ap))
        if curvature <= 0:
            indefinite = True
            break
        alpha = rr / curvature
        x = x + alpha * p
        r = r - alpha * ap
        iterations += 1
        rr_next = float(torch.dot(r, r))
        if math.sqrt(rr_next) <= threshold:
            rr = rr_next
            break
        p = r + (rr_next / rr) * p
        rr = rr_next

    final = math.sqrt(rr)
    fell_back = indefinite or final > initial or not math.isfinite(final)
    if fell_back and cfg.fallback is FallbackPolicy.IDENTITY:
        x = b.clone()
    return _SegmentSolve(x, initial, final, iterations, fell_back)


def conjugate_gradient(apply_a: LinearOperator, v: ParamVector, cfg: CGConfig) -> Tuple[ParamVector, HypergradReport]:
    """
    Approximately solve A x = v, one independent CG run per layout segment.

    Starts from x = 0. A segment whose residual grows, or that meets
    non-positive curvature, is resolved by the fallback policy and flagged.
    """
    layout = v.layout
    pieces: List[torch.Tensor] = []
    initial_sq = final_sq = 0.0
    iterations = 0
    fell_back = False

    for seg, b in v.items():
        def matvec(p_seg: torch.Tensor, seg=seg) -> torch.Tensor:
            padded = torch.zeros(layout.total, dtype=v.values.dtype)
            padded[seg.offset:seg.stop] = p_seg
            return apply_a(ParamVector(padded, layout)).values[seg.offset:seg.stop]

        solve = _cg_segment(matvec, b.detach(), cfg)
        pieces.append(solve.x)
        initial_sq += solve.initial ** 2
        final_sq += solve.final ** 2
        iterations += solve.iterations
        if solve.fell_back:
            fell_back = True
            logger.debug(f"⚠️ CG fallback ({cfg.fallback.value}) in segment '{seg.name}'")

    values = torch.cat(pieces) if pieces else torch.zeros(0, dtype=v.values.dtype)
    x = ParamVector(values, layout)
    report = HypergradReport(
        cg_initial_residual=math.sqrt(initial_sq),
        cg_final_residual=math.sqrt(final_sq),
        fell_back=fell_back,
        ij_vector_norm=x.norm(),
        cg_iterations=iterations,
    )
    return x, report


def solve_ij(
    pretext: Objective, theta_p: ParamVector, phi_p: ParamVector, lam: float, v: ParamVector,
    cfg: CGConfig, batch: Any,
) -> Tuple[ParamVector, HypergradReport]:
    operator = damped_hvp_operator(pretext, theta_p, phi_p, lam, cfg.damping, batch)
    return conjugate_gradient(operator, v, cfg)


def ij_vector(
    pretext: Objective, theta_p: ParamVector, phi_p: ParamVector, lam: float, v: ParamVector,
    cfg: CGConfig, batch: Any,
) -> ParamVector:
    """≈ [I + H/(λ+λ_damp)]⁻¹ v."""
    return solve_ij(pretext, theta_p, phi_p, lam, v, cfg, batch)[0]


# ==================== Upper level ====================

@dataclass(frozen=True)
class UpperTerms:
    loss: float
    g_theta: ParamVector
    g_phi: ParamVector
    report: HypergradReport


def upper_step_terms(
    pretext: Objective, downstream: Objective, theta_p: ParamVector, theta_d: ParamVector,
    phi_p: ParamVector, phi_d: ParamVector, lam: float, cfg: CGConfig,
    pretext_batch: Any, downstream_batch: Any, discard_ij: bool = False,
) -> UpperTerms:
    theta_p.require_same_layout(theta_d)
    if discard_ij:
        # plain fine-tuning gradients at θ_D
        g_theta = grad(downstream, theta_d, downstream_batch, aux=phi_d)
        g_phi = grad(downstream.swapped(), phi_d, downstream_batch, aux=theta_d)
        loss = eval_loss(downstream, theta_d, downstream_batch, aux=phi_d)
        return UpperTerms(loss, g_theta, g_phi, HypergradReport.skipped())

    loss_p, v, g_phi_at_p = value_and_grads(downstream, theta_p, downstream_batch, aux=phi_d)
    loss_d, g_theta_at_d, g_phi_at_d = value_and_grads(downstream, theta_d, downstream_batch, aux=phi_d)
    v_ij, report = solve_ij(pretext, theta_p, phi_p, lam, v, cfg, pretext_batch)
    return UpperTerms(
        loss=loss_p + loss_d,
        g_theta=v_ij + g_theta_at_d,
        g_phi=g_phi_at_p + g_phi_at_d,
        report=report,
    )


def upper_gradients(
    pretext: Objective, downstream: Objective, theta_p: ParamVector, theta_d: ParamVector,
    phi_p: ParamVector, phi_d: ParamVector, lam: float, cfg: CGConfig,
    pretext_batch: Any, downstream_batch: Any, discard_ij: bool = False,
) -> Tuple[ParamVector, ParamVector, HypergradReport]:
    terms = upper_step_terms(
        pretext, downstream, theta_p, theta_d, phi_p, phi_d, lam, cfg,
        pretext_batch, downstream_batch, discard_ij,
    )
    return terms.g_theta, terms.g_phi, terms.report


def clip_by_norm(g: ParamVector, threshold: float) -> ParamVector:
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = g.norm()
    if norm > threshold:
        return g * (threshold / norm)
    return g
