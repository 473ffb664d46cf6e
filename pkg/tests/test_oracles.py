import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import pytest
import torch
from rich.console import Console

from app.autodiff.tensor_ops import DTYPE, Objective, ParamVector, grad
from app.core.errors import SingularityError
from app.hypergrad.implicit import lower_gradients
from app.objectives.losses import LabeledBatch, downstream_objective, l2_coupling, pretext_objective
from app.verify.oracles import (
    MAX_DENSE_DIM,
    dense_hessian,
    dense_upper_gradient,
    exact_ij_dense,
    fit_newton,
    linear_softmax_objective,
    quadratic_downstream_objective,
    quadratic_lower_solution,
    quadratic_objective,
    random_spd,
    spectral_bounds,
    stationarity_residual,
    stationary_point_check,
)
from app.verify.suite import (
    CHECKS,
    ORACLE_SPEC,
    CheckResult,
    all_passed,
    check_batch_stack,
    check_cg_exactness,
    check_clipping,
    check_hand_unroll,
    check_ij_equivalence,
    check_lambda_limits,
    check_stationary_point,
    check_upper_equivalence,
    mlp_instance,
    render_results,
    run_verify_suite,
)

EMPTY = ParamVector.empty()


# ==================== Closed forms ====================

def test_lower_solution_pure_coupling():
    theta_d = torch.tensor([1.0, -2.0], dtype=DTYPE)
    out = quadratic_lower_solution(torch.zeros((2, 2)), torch.zeros(2), theta_d, 0.7)
    assert torch.allclose(out, theta_d, atol=1e-15)


def test_lower_solution_large_lambda():
    theta_d = torch.tensor([1.0, -2.0], dtype=DTYPE)
    out = quadratic_lower_solution(random_spd(2, 0), torch.zeros(2), theta_d, 1e9)
    assert torch.allclose(out, theta_d, atol=1e-6)


def test_lower_solution_scalar():
    out = quadratic_lower_solution([[2.0]], [1.0], [0.0], 1.0)
    assert float(out[0]) == pytest.approx(-1.0 / 3.0, abs=1e-15)


def test_lower_solution_singular():
    with pytest.raises(SingularityError):
        quadratic_lower_solution([[-1.0]], [0.0], [0.0], 1.0)


def test_exact_ij_examples():
    assert torch.equal(exact_ij_dense(torch.zeros((3, 3)), 0.5), torch.eye(3, dtype=DTYPE))
    assert torch.allclose(exact_ij_dense([[1.0]], 1.0), torch.tensor([[0.5]], dtype=DTYPE))
    with pytest.raises(SingularityError):
        exact_ij_dense([[-1.0]], 1.0)


def test_dense_upper_gradient_examples():
    B = random_spd(3, 1)
    zero = dense_upper_gradient(random_spd(3, 0), torch.zeros(3), torch.zeros((3, 3)), torch.ones(3), torch.ones(3), 1.0)
    assert torch.equal(zero, torch.zeros(3, dtype=DTYPE))
    # large λ: IJ is the identity and θ_P* sits at θ_D, so both terms are ∇L^D(θ_D)
    theta_d = torch.tensor([0.5, -1.0, 2.0], dtype=DTYPE)
    c = torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE)
    big = dense_upper_gradient(random_spd(3, 0), torch.zeros(3), B, c, theta_d, 1e9)
    assert torch.allclose(big, 2 * B @ (theta_d - c), atol=1e-6)


def test_dense_oracles_limit_dimension():
    with pytest.raises(ValueError):
        exact_ij_dense(torch.eye(MAX_DENSE_DIM + 1), 1.0)
    with pytest.raises(ValueError):
        dense_hessian(quadratic_objective(torch.eye(MAX_DENSE_DIM + 1)), ParamVector.single(torch.zeros(MAX_DENSE_DIM + 1)), aux=EMPTY)


def test_dense_hessian_of_quadratic():
    A = random_spd(5, 2)
    H = dense_hessian(quadratic_objective(A), ParamVector.single(torch.ones(5)), aux=EMPTY)
    assert torch.allclose(H, A, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_large_coupling_makes_indefinite_lower_hessian_positive_definite(seed):
    gen = torch.Generator().manual_seed(seed)
    Q, _ = torch.linalg.qr(torch.randn((5, 5), generator=gen, dtype=DTYPE))
    A = Q @ torch.diag(torch.tensor([-3.0, -1.0, 0.5, 2.0, 4.0], dtype=DTYPE)) @ Q.T
    lam = 10.0 * float(torch.linalg.matrix_norm(A, ord=2))
    pretext = quadratic_objective(A)
    theta_d = ParamVector.single(torch.randn(5, generator=gen, dtype=DTYPE))
    lower = Objective(
        fn=lambda theta, phi, batch: pretext.fn(theta, phi, batch) + lam * l2_coupling(theta_d, theta),
        arity=pretext.arity, layout=pretext.layout, aux_layout=pretext.aux_layout, name="lower",
    )
    H = dense_hessian(lower, ParamVector.single(torch.zeros(5, dtype=DTYPE)), aux=EMPTY)
    assert torch.allclose(H, A + lam * torch.eye(5, dtype=DTYPE), atol=1e-10)
    assert torch.linalg.cholesky_ex(A).info > 0
    torch.linalg.cholesky(H)


def test_random_spd_spectrum():
    lo, hi = spectral_bounds(random_spd(12, 5, (0.5, 4.0)))
    assert 0.5 - 1e-9 <= lo <= hi <= 4.0 + 1e-9


# ==================== Stationarity ====================

def test_stationarity_at_closed_form_solution():
    A = random_spd(4, 3)
    b = torch.tensor([1.0, 0.0, -1.0, 0.5], dtype=DTYPE)
    theta_d = torch.tensor([0.2, 0.4, -0.6, 0.0], dtype=DTYPE)
    theta_p = quadratic_lower_solution(A, b, theta_d, 0.5)
    residual = stationarity_residual(
        quadratic_objective(A, b), ParamVector.single(theta_d), ParamVector.single(theta_p), EMPTY, 0.5, None
    )
    assert residual <= 1e-10


def test_stationarity_at_pretext_minimum_without_coupling():
    A = random_spd(3, 4)
    b = torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE)
    minimum = torch.linalg.solve(A, -b)
    residual = stationarity_residual(
        quadratic_objective(A, b), ParamVector.single(torch.zeros(3)), ParamVector.single(minimum), EMPTY, 0.0, None
    )
    assert residual <= 1e-10


def test_stationarity_matches_lower_gradient_norm():
    theta, phi_p, _, views, _ = mlp_instance(5)
    pretext = pretext_objective(ORACLE_SPEC, 0.5)
    theta_d = theta * 1.1
    g_theta, _ = lower_gradients(pretext, theta, phi_p, theta_d, 0.3, views)
    assert stationarity_residual(pretext, theta_d, theta, phi_p, 0.3, views) == g_theta.norm()


# ==================== Stationarity construction ====================

def test_construction_with_constant_pretext():
    constant = Objective(fn=lambda theta, _aux, _batch: theta.values.sum() * 0.0 + 2.0, name="constant")
    downstream = quadratic_downstream_objective([[1.0]], [3.0])
    theta_bar = ParamVector.single([3.0])
    report = stationary_point_check(downstream, constant, theta_bar, 2.0, 1e-12, phi_d=EMPTY)
    assert report.theta_d_star.bitwise_equal(theta_bar)
    assert report.lower_residual == 0.0
    assert report.passed


def test_construction_scalar_quadratics():
    """L^D=½(θ−3)², L^P=½θ², λ=2, θ̄=3: lower stationarity puts θ_D* at θ̄ + θ̄/λ"""
    report = stationary_point_check(
        quadratic_downstream_objective([[1.0]], [3.0]), quadratic_objective([[1.0]]),
        ParamVector.single([3.0]), 2.0, 1e-12, phi_d=EMPTY, phi_p=EMPTY,
    )
    assert float(report.theta_d_star.values[0]) == pytest.approx(4.5, abs=1e-15)
    assert report.upper_residual <= 1e-12
    assert report.lower_residual <= 1e-12
    assert report.passed


def test_construction_lower_residual_for_any_point():
    theta, phi_p, phi_d, views, labeled = mlp_instance(6)
    pretext = pretext_objective(ORACLE_SPEC, 0.5)
    report = stationary_point_check(
        downstream_objective(ORACLE_SPEC), pretext, theta, 0.7, 1e-12, labeled, views, phi_d, phi_p,
    )
    assert report.lower_residual <= 1e-10


def test_fit_newton_reaches_stationarity():
    gen = torch.Generator().manual_seed(0)
    labels = torch.arange(30) % 3
    inputs = torch.randn((30, 2), generator=gen, dtype=DTYPE) + labels.unsqueeze(1).to(DTYPE)
    batch = LabeledBatch(inputs, labels)
    obj = linear_softmax_objective(2, 3, l2=1e-2)
    theta = fit_newton(obj, ParamVector.zeros(obj.layout), batch)
    assert grad(obj, theta, batch).norm() <= 1e-9


# ==================== Suite ====================

@pytest.mark.parametrize("check", [
    check_cg_exactness,
    check_ij_equivalence,
    check_upper_equivalence,
    check_lambda_limits,
    check_stationary_point,
    check_hand_unroll,
    check_batch_stack,
    check_clipping,
])
def test_individual_checks_pass(check):
    passed, detail = check(0)
    assert passed, detail


def test_verify_suite_passes():
    results = run_verify_suite(seed=0)
    assert [r.name for r in results] == [name for name, _ in CHECKS]
    assert all_passed(results), [(r.name, r.detail) for r in results if not r.passed]


def test_render_results():
    console = Console(record=True, width=200)
    results = [CheckResult("CG exactness", True, "ok", 0.5), CheckResult("lambda limits", False, "bad", 0.1)]
    render_results(results, console)
    assert "FAIL" in console.export_text()
