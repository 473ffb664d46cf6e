# app/verify/oracles.py
"""
Dense ground-truth oracles for the bilevel machinery.

Quadratic lower levels L^P(θ) = ½θᵀAθ + bᵀθ and quadratic downstream losses
L^D(θ) = ½(θ − c)ᵀB(θ − c) have closed-form stationary points and implicit
Jacobians, which the iterative code paths are checked against. Dense
routines are capped at MAX_DENSE_DIM dimensions.
"""
from dataclasses import dataclass
from typing import Any, Optional, Tuple
import logging

import numpy as np
import torch

from app.autodiff.tensor_ops import (
    DTYPE,
    Arity,
    Layout,
    Objective,
    ParamVector,
    eval_loss,
    grad,
    hvp,
    to_tensor,
)
from app.core.errors import SingularityError
from app.hypergrad.implicit import lower_gradients
from app.objectives.losses import cross_entropy

logger = logging.getLogger(__name__)

MAX_DENSE_DIM = 200


def _check_dim(dim: int) -> None:
    if dim > MAX_DENSE_DIM:
        raise ValueError(f"Dense oracles are limited to {MAX_DENSE_DIM} dimensions, got {dim}")


def _solve(matrix: torch.Tensor, rhs: torch.Tensor, what: str) -> torch.Tensor:
    try:
        out = torch.linalg.solve(matrix, rhs)
    except RuntimeError as e:
        raise SingularityError(f"{what} is singular") from e
    if not bool(torch.isfinite(out).all()):
        raise SingularityError(f"{what} is singular")
    return out


# ==================== Quadratic problems ====================

def quadratic_objective(A: Any, b: Optional[Any] = None, name: str = "quadratic") -> Objective:
    """½θᵀAθ + bᵀθ as a coupled objective with an empty head."""
    A = to_tensor(A)
    b = torch.zeros(A.shape[0], dtype=DTYPE) if b is None else to_tensor(b).reshape(-1)
    layout = Layout.from_shapes([("theta", (A.shape[0],))])

    def fn(theta: ParamVector, _phi: Optional[ParamVector], _batch: Any) -> torch.Tensor:
        t = theta.values
        return 0.5 * t @ (A @ t) + b @ t

    return Objective(fn=fn, arity=Arity.COUPLED, layout=layout, aux_layout=Layout(), name=name)


def quadratic_downstream_objective(B: Any, c: Any, name: str = "quadratic_downstream") -> Objective:
    """½(θ − c)ᵀB(θ − c) as a coupled objective with an empty head."""
    B = to_tensor(B)
    c = to_tensor(c).reshape(-1)
    layout = Layout.from_shapes([("theta", (B.shape[0],))])

    def fn(theta: ParamVector, _phi: Optional[ParamVector], _batch: Any) -> torch.Tensor:
        d = theta.values - c
        return 0.5 * d @ (B @ d)

    return Objective(fn=fn, arity=Arity.COUPLED, layout=layout, aux_layout=Layout(), name=name)


def random_spd(dim: int, seed: int, eig_range: Tuple[float, float] = (0.1, 10.0)) -> torch.Tensor:
    """A = QᵀDQ with Q random orthogonal and D log-uniform in eig_range."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    lo, hi = eig_range
    eigs = np.exp(rng.uniform(np.log(lo), np.log(hi), size=dim))
    a = q.T @ np.diag(eigs) @ q
    return to_tensor(0.5 * (a + a.T))


def quadratic_lower_solution(A: Any, b: Any, theta_d: Any, lam: float) -> torch.Tensor:
    """(A + λI)⁻¹(λθ_D − b), the stationary point of L^P + λ·½‖θ_D − θ_P‖²."""
    A = to_tensor(A)
    _check_dim(A.shape[0])
    rhs = lam * to_tensor(theta_d).reshape(-1) - to_tensor(b).reshape(-1)
    return _solve(A + lam * torch.eye(A.shape[0], dtype=DTYPE), rhs, "A + lam*I")


def exact_ij_dense(A: Any, lam: float) -> torch.Tensor:
    """[A/λ + I]⁻¹."""
    A = to_tensor(A)
    _check_dim(A.shape[0])
    eye = torch.eye(A.shape[0], dtype=DTYPE)
    return _solve(A / lam + eye, eye, "A/lam + I")


def dense_upper_gradient(A: Any, b: Any, B: Any, c: Any, theta_d: Any, lam: float) -> torch.Tensor:
    """[A/λ + I]⁻¹∇L^D(θ_P*) + ∇L^D(θ_D) with θ_P* the closed-form lower solution."""
    B = to_tensor(B)
    c = to_tensor(c).reshape(-1)
    theta_d = to_tensor(theta_d).reshape(-1)
    theta_p = quadratic_lower_solution(A, b, theta_d, lam)
    return exact_ij_dense(A, lam) @ (B @ (theta_p - c)) + B @ (theta_d - c)


def dense_hessian(obj: Objective, params: ParamVector, batch: Any = None, aux: Optional[ParamVector] = None) -> torch.Tensor:
    """Hessian w.r.t. params, stacked from HVPs against unit vectors."""
    dim = len(params)
    _check_dim(dim)
    columns = []
    for i in range(dim):
        e = torch.zeros(dim, dtype=DTYPE)
        e[i] = 1.0
        columns.append(hvp(obj, params, batch, params.with_values(e), aux=aux).values)
    return torch.stack(columns, dim=1) if columns else torch.zeros((0, 0), dtype=DTYPE)


# ==================== Stationarity ====================

def stationarity_residual(
    pretext: Objective, theta_d: ParamVector, theta_p: ParamVector, phi_p: ParamVector, lam: float, batch: Any,
) -> float:
    """‖∇_θ L^P(θ_P, φ_P) + λ(θ_P − θ_D)‖₂."""
    g_theta, _ = lower_gradients(pretext, theta_p, phi_p, theta_d, lam, batch)
    return g_theta.norm()


@dataclass(frozen=True)
class StationaryPointReport:
    upper_residual: float
    lower_residual: float
    theta_d_star: ParamVector
    passed: bool


def stationary_point_check(
    downstream: Objective,
    pretext: Objective,
    theta_bar: ParamVector,
    lam: float,
    tol: float,
    downstream_batch: Any = None,
    pretext_batch: Any = None,
    phi_d: Optional[ParamVector] = None,
    phi_p: Optional[ParamVector] = None,
) -> StationaryPointReport:
    """
    Build θ_D* from a downstream-stationary θ̄ so that (θ̄, θ_D*) is stationary
    for both levels.

    Lower stationarity ∇L^P(θ̄) + λ(θ̄ − θ_D*) = 0 gives θ_D* = θ̄ + ∇L^P(θ̄)/λ.
    """
    g_p = grad(pretext, theta_bar, pretext_batch, aux=phi_p)
    theta_d_star = theta_bar + g_p * (1.0 / lam)
    upper = grad(downstream, theta_bar, downstream_batch, aux=phi_d).norm()
    lower = (g_p + (theta_bar - theta_d_star) * lam).norm()
    return StationaryPointReport(
        upper_residual=upper,
        lower_residual=lower,
        theta_d_star=theta_d_star,
        passed=upper <= tol and lower <= tol,
    )


# ==================== Convex reference model ====================

def linear_softmax_objective(num_features: int, num_classes: int, l2: float = 0.0) -> Objective:
    """Cross-entropy of a linear classifier, θ = [W (K×N), b (K)], plus ½·l2·‖θ‖²."""
    layout = Layout.from_shapes([("weight", (num_classes, num_features)), ("bias", (num_classes,))])

    def fn(theta: ParamVector, _aux: Optional[ParamVector], batch) -> torch.Tensor:
        logits = batch.inputs @ theta.segment("weight").T + theta.segment("bias")
        return cross_entropy(logits, batch.labels) + 0.5 * l2 * torch.dot(theta.values, theta.values)

    return Objective(fn=fn, layout=layout, name="linear_softmax")


def fit_newton(
    obj: Objective, theta: ParamVector, batch: Any, tol: float = 1e-10, max_iter: int = 50,
) -> ParamVector:
    """Damped Newton iterations until ‖∇‖ ≤ tol; for small strictly convex problems."""
    for _ in range(max_iter):
        g = grad(obj, theta, batch)
        if g.norm() <= tol:
            break
        H = dense_hessian(obj, theta, batch)
        step = theta.with_values(_solve(H, g.values, "Hessian"))
        current = eval_loss(obj, theta, batch)
        scale = 1.0
        candidate = theta - step * scale
        # slack keeps full steps near the optimum, where losses tie up to rounding
        while eval_loss(obj, candidate, batch) > current + 1e-12 * (1.0 + abs(current)) and scale > 1e-8:
            scale *= 0.5
            candidate = theta - step * scale
        theta = candidate
    return theta


def spectral_bounds(A: torch.Tensor) -> Tuple[float, float]:
    eigs = torch.linalg.eigvalsh(A)
    return float(eigs.min()), float(eigs.max())


def relative_gap(actual: torch.Tensor, expected: torch.Tensor) -> float:
    return float(torch.linalg.vector_norm(actual - expected)) / max(float(torch.linalg.vector_norm(expected)), 1e-300)


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(b))
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(torch.dot(a, b)) / (na * nb)
