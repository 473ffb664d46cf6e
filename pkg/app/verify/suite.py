# app/verify/suite.py
"""
Oracle suite behind the `verify` command.

Every check builds its own random instances from a fixed seed and compares
the iterative/autodiff code paths against dense or finite-difference ground
truth.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple
import logging
import time

import numpy as np
import torch
from rich.console import Console
from rich.table import Table

from app.autodiff.tensor_ops import (
    DTYPE,
    Objective,
    ParamVector,
    finite_diff_grad,
    finite_diff_hvp,
    grad,
    hvp,
    relative_error,
)
from app.core.models import (
    BiSSLConfig,
    CGConfig,
    ModelPart,
    ModelSpec,
    OptimizerKind,
    OptimizerSettings,
    ScheduleKind,
)
from app.hypergrad.implicit import clip_by_norm, conjugate_gradient, ij_vector, upper_gradients
from app.networks.mlp import flatten, forward_backbone, init_model, min_abs_preactivation
from app.objectives.losses import (
    LabeledBatch,
    ViewBatch,
    downstream_objective,
    lower_level_objective,
    nt_xent,
    pretext_objective,
)
from app.training.batch_stack import BatchStack, trace_reshuffles
from app.training.bissl_loop import BiSSLProblem, TrainState, bissl_run
from app.verify.oracles import (
    dense_upper_gradient,
    exact_ij_dense,
    fit_newton,
    linear_softmax_objective,
    quadratic_downstream_objective,
    quadratic_lower_solution,
    quadratic_objective,
    random_spd,
    relative_gap,
    cosine,
    spectral_bounds,
    stationary_point_check,
)

logger = logging.getLogger(__name__)

INSTANCES = 10
KINK_MARGIN = 1e-2
ORACLE_SPEC = ModelSpec(
    input_dim=4, backbone_widths=[5], feature_dim=3, pretext_widths=[3, 2], num_classes=3,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _unit(rng: np.random.Generator, dim: int) -> torch.Tensor:
    v = rng.standard_normal(dim)
    return torch.from_numpy(v / np.linalg.norm(v)).to(DTYPE)


def _cg_cfg(iterations: int) -> CGConfig:
    return CGConfig(iterations=iterations, damping=0.0, residual_tol=0.0)


# ==================== Gradient / HVP oracles ====================

@dataclass
class OracleCase:
    name: str
    objective: Objective
    params: ParamVector
    batch: object
    aux: Optional[ParamVector]


def mlp_instance(seed: int) -> Tuple[ParamVector, ParamVector, ParamVector, ViewBatch, LabeledBatch]:
    """Redraw until every ReLU input is at least KINK_MARGIN away from 0."""
    spec = ORACLE_SPEC
    for attempt in range(1000):
        g = torch.Generator().manual_seed(seed * 1000 + attempt)
        params = init_model(spec, seed * 1000 + attempt)
        theta = flatten(params, ModelPart.BACKBONE)
        phi_p = flatten(params, ModelPart.PRETEXT_HEAD)
        phi_d = flatten(params, ModelPart.DOWNSTREAM_HEAD)
        # random head biases so the pretext head's ReLUs are not all at the same offset
        phi_p = phi_p + phi_p.with_values(0.1 * torch.randn(len(phi_p), generator=g, dtype=DTYPE))
        x_a = torch.randn((4, spec.input_dim), generator=g, dtype=DTYPE)
        x_b = x_a + 0.3 * torch.randn((4, spec.input_dim), generator=g, dtype=DTYPE)
        labels = torch.randint(0, spec.num_classes, (4,), generator=g)
        margin = min(min_abs_preactivation(theta, x, spec) for x in (x_a, x_b))
        for x in (x_a, x_b):
            with torch.no_grad():
                features = forward_backbone(theta, x, spec)
            margin = min(margin, min_abs_preactivation(phi_p, features, spec, ModelPart.PRETEXT_HEAD))
        if margin >= KINK_MARGIN:
            return theta, phi_p, phi_d, ViewBatch(x_a, x_b), LabeledBatch(x_a, labels)
    raise RuntimeError("Could not draw an instance away from ReLU kinks")


def _oracle_cases(seed: int) -> List[OracleCase]:
    rng = np.random.default_rng(seed)
    theta, phi_p, phi_d, views, labeled = mlp_instance(seed)
    pretext = pretext_objective(ORACLE_SPEC, 0.5)
    downstream = downstream_objective(ORACLE_SPEC)
    dim = 6
    A = random_spd(dim, seed)
    quad_theta = ParamVector.single(rng.standard_normal(dim))
    anchor = theta + theta.with_values(0.05 * torch.from_numpy(rng.standard_normal(len(theta))).to(DTYPE))

    softmax = linear_softmax_objective(ORACLE_SPEC.input_dim, ORACLE_SPEC.num_classes, l2=1e-2)
    softmax_theta = ParamVector(
        torch.from_numpy(rng.standard_normal(softmax.layout.total)).to(DTYPE), softmax.layout
    )
    return [
        OracleCase("quadratic", quadratic_objective(A, rng.standard_normal(dim)), quad_theta, None, ParamVector.empty()),
        OracleCase("pretext/backbone", pretext, theta, views, phi_p),
        OracleCase("pretext/head", pretext.swapped(), phi_p, views, theta),
        OracleCase("downstream/backbone", downstream, theta, labeled, phi_d),
        OracleCase("downstream/head", downstream.swapped(), phi_d, labeled, theta),
        OracleCase("lower-level", lower_level_objective(pretext, anchor, 0.5), theta, views, phi_p),
        OracleCase("linear-softmax", softmax, softmax_theta, labeled, None),
    ]


def check_gradient_oracles(seed: int = 0) -> Tuple[bool, str]:
    worst_grad = worst_hvp = worst_sym = 0.0
    for i in range(INSTANCES):
        rng = np.random.default_rng(seed + i)
        for case in _oracle_cases(seed + i):
            g = grad(case.objective, case.params, case.batch, aux=case.aux)
            fd = finite_diff_grad(case.objective, case.params, case.batch, 1e-5, aux=case.aux)
            worst_grad = max(worst_grad, relative_error(g, fd))

            u = case.params.with_values(_unit(rng, len(case.params)))
            v = case.params.with_values(_unit(rng, len(case.params)))
            hv = hvp(case.objective, case.params, case.batch, v, aux=case.aux)
            fd_hv = finite_diff_hvp(case.objective, case.params, case.batch, v, 1e-4, aux=case.aux)
            if fd_hv.norm() > 1e-8:
                worst_hvp = max(worst_hvp, relative_error(hv, fd_hv))
            hu = hvp(case.objective, case.params, case.batch, u, aux=case.aux)
            u_hv = u.dot(hv)
            worst_sym = max(worst_sym, abs(u_hv - v.dot(hu)) / (1.0 + abs(u_hv)))
    passed = worst_grad <= 1e-5 and worst_hvp <= 1e-4 and worst_sym <= 1e-8
    return passed, f"grad {worst_grad:.2e}, hvp {worst_hvp:.2e}, symmetry {worst_sym:.2e}"


# ==================== Linear algebra oracles ====================

def check_cg_exactness(seed: int = 0) -> Tuple[bool, str]:
    worst = 0.0
    for dim in (5, 20, 50):
        for i in range(INSTANCES):
            A = random_spd(dim, seed + 100 * dim + i)
            v = ParamVector.single(np.random.default_rng(seed + i).standard_normal(dim))
            x, _ = conjugate_gradient(lambda p, A=A: p.with_values(A @ p.values), v, _cg_cfg(dim))
            worst = max(worst, relative_gap(x.values, torch.linalg.solve(A, v.values)))
    return worst <= 1e-6, f"max relative error {worst:.2e} over 30 systems"


def check_ij_equivalence(seed: int = 0) -> Tuple[bool, str]:
    dim = 10
    worst = 0.0
    for i in range(INSTANCES):
        rng = np.random.default_rng(seed + i)
        A = random_spd(dim, seed + i)
        pretext = quadratic_objective(A)
        theta = ParamVector.single(rng.standard_normal(dim))
        v = ParamVector.single(rng.standard_normal(dim))
        for lam in (1e-3, 1.0, 1e3):
            out = ij_vector(pretext, theta, ParamVector.empty(), lam, v, _cg_cfg(dim), None)
            worst = max(worst, relative_gap(out.values, exact_ij_dense(A, lam) @ v.values))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def check_upper_equivalence(seed: int = 0) -> Tuple[bool, str]:
    dim = 8
    worst = 0.0
    for i in range(INSTANCES):
        rng = np.random.default_rng(seed + 50 + i)
        A = random_spd(dim, seed + 50 + i)
        B = random_spd(dim, seed + 500 + i)
        b = rng.standard_normal(dim)
        c = rng.standard_normal(dim)
        theta_d = rng.standard_normal(dim)
        lam = (0.1, 1.0, 10.0)[i % 3]
        theta_p = quadratic_lower_solution(A, b, theta_d, lam)
        g_theta, _, _ = upper_gradients(
            quadratic_objective(A, b), quadratic_downstream_objective(B, c),
            ParamVector.single(theta_p), ParamVector.single(theta_d),
            ParamVector.empty(), ParamVector.empty(), lam, _cg_cfg(dim), None, None,
        )
        worst = max(worst, relative_gap(g_theta.values, dense_upper_gradient(A, b, B, c, theta_d, lam)))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def check_lambda_limits(seed: int = 0) -> Tuple[bool, str]:
    dim = 10
    A = random_spd(dim, seed + 7)
    pretext = quadratic_objective(A)
    rng = np.random.default_rng(seed + 7)
    theta = ParamVector.single(rng.standard_normal(dim))
    v = ParamVector.single(rng.standard_normal(dim))
    sigma_min, sigma_max = spectral_bounds(A)
    cfg = _cg_cfg(dim)

    def ij(lam: float) -> ParamVector:
        return ij_vector(pretext, theta, ParamVector.empty(), lam, v, cfg, None)

    large = relative_error(ij(1e6 * sigma_max), v)
    lam_small = 1e-4 * sigma_min
    expected = lam_small * float(torch.linalg.vector_norm(torch.linalg.solve(A, v.values)))
    ratio = ij(lam_small).norm() / expected
    gaps = [(ij(lam) - v).norm() for lam in (1e-2, 1.0, 1e2, 1e4, 1e6)]
    monotone = all(b <= a * (1 + 1e-9) for a, b in zip(gaps, gaps[1:]))
    passed = large <= 1e-3 and abs(ratio - 1.0) <= 0.05 and monotone
    return passed, f"large-lam gap {large:.2e}, small-lam ratio {ratio:.4f}, monotone {monotone}"


# ==================== Bilevel checks ====================

def check_stationary_point(seed: int = 0) -> Tuple[bool, str]:
    g = torch.Generator().manual_seed(seed)
    num_features, num_classes, n = 4, 3, 90
    means = 1.5 * torch.randn((num_classes, num_features), generator=g, dtype=DTYPE)
    labels = torch.arange(n) % num_classes
    inputs = means[labels] + torch.randn((n, num_features), generator=g, dtype=DTYPE)
    batch = LabeledBatch(inputs, labels)

    downstream = linear_softmax_objective(num_features, num_classes, l2=1e-2)
    theta_bar = fit_newton(downstream, ParamVector.zeros(downstream.layout), batch, tol=1e-10)
    stationarity = grad(downstream, theta_bar, batch).norm()

    views = ViewBatch(inputs, inputs + 0.1 * torch.randn(inputs.shape, generator=g, dtype=DTYPE))

    def contrastive(theta: ParamVector, _aux, batch: ViewBatch) -> torch.Tensor:
        w, b = theta.segment("weight"), theta.segment("bias")
        return nt_xent(batch.view_a @ w.T + b, batch.view_b @ w.T + b, 0.5)

    pretext = Objective(fn=contrastive, layout=downstream.layout, name="linear_nt_xent")
    report = stationary_point_check(downstream, pretext, theta_bar, 1.0, 1e-8, batch, views)
    passed = stationarity <= 1e-9 and report.passed
    return passed, (
        f"|grad L^D| {stationarity:.2e}, upper {report.upper_residual:.2e}, lower {report.lower_residual:.2e}"
    )


def hand_unrolled_alternation(
    a: float, b: float, c: float, theta0: float, lam: float, lr_lower: float, lr_upper: float, damping: float,
) -> Tuple[float, float]:
    """One alternation with N_L = N_U = 1 and plain SGD, written out by hand."""
    theta_p = theta0 - lr_lower * (a * theta0 + lam * (theta0 - theta0))
    v = b * (theta_p - c)
    v_ij = v / (1.0 + a / (lam + damping))
    theta_d = theta0 - lr_upper * (v_ij + b * (theta0 - c))
    return theta_p, theta_d


def run_scalar_alternation(
    a: float, b: float, c: float, theta0: float, lam: float, lr_lower: float, lr_upper: float, damping: float,
) -> TrainState:
    def sgd(lr: float) -> OptimizerSettings:
        return OptimizerSettings(
            kind=OptimizerKind.SGD, base_lr=lr, momentum=0.9, weight_decay=0.0,
            schedule=ScheduleKind.CONSTANT, warmup_steps=0,
        )

    cfg = BiSSLConfig(
        lam=lam, N_L=1, N_U=1, T=1, clip_threshold=10.0,
        cg=CGConfig(iterations=5, damping=damping), lower=sgd(lr_lower), upper=sgd(lr_upper),
    )
    dummy = torch.zeros((1, 1), dtype=DTYPE)
    problem = BiSSLProblem(
        pretext=quadratic_objective([[a]]),
        downstream=quadratic_downstream_objective([[b]], [c]),
        pretext_stack=BatchStack(dummy, 1, 0),
        downstream_stack=BatchStack(dummy, 1, 1, labels=torch.zeros(1, dtype=torch.long)),
    )
    theta = ParamVector.single([theta0])
    state = TrainState.initial(theta, ParamVector.empty(), ParamVector.empty())
    bissl_run(cfg, state, problem)
    return state


def check_hand_unroll(seed: int = 0) -> Tuple[bool, str]:
    args = dict(a=2.0, b=3.0, c=1.0, theta0=0.5, lam=0.1, lr_lower=0.1, lr_upper=0.05, damping=10.0)
    expected_p, expected_d = hand_unrolled_alternation(**args)
    state = run_scalar_alternation(**args)
    err = max(abs(float(state.theta_p.values[0]) - expected_p), abs(float(state.theta_d.values[0]) - expected_d))
    return err <= 1e-12, f"max abs deviation {err:.2e}"


def check_batch_stack(seed: int = 0) -> Tuple[bool, str]:
    small = trace_reshuffles(BatchStack(torch.zeros((100, 1), dtype=DTYPE), 1, seed), 20, 20)
    large = trace_reshuffles(BatchStack(torch.zeros((1251, 1), dtype=DTYPE), 1, seed), 20, 63)
    passed = small[:3] == [6, 11, 16] and large == [63]
    return passed, f"reshuffles at {small[:4]} (100 batches), {large} (1251 batches)"


def check_clipping(seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_norm = 0.0
    worst_cos = 1.0
    for _ in range(1000):
        dim = int(rng.integers(1, 64))
        raw = rng.standard_normal(dim) * 10 ** rng.uniform(-3, 3)
        g = ParamVector.single(raw)
        out = clip_by_norm(g, 10.0)
        worst_norm = max(worst_norm, out.norm())
        worst_cos = min(worst_cos, cosine(out.values, g.values))
    passed = worst_norm <= 10.0 + 1e-12 and worst_cos >= 1 - 1e-12
    return passed, f"max norm {worst_norm:.15f}, min cosine {worst_cos:.15f}"


CHECKS: List[Tuple[str, Callable[[int], Tuple[bool, str]]]] = [
    ("gradient/HVP oracles", check_gradient_oracles),
    ("CG exactness", check_cg_exactness),
    ("implicit Jacobian (dense)", check_ij_equivalence),
    ("upper gradient (dense)", check_upper_equivalence),
    ("lambda limits", check_lambda_limits),
    ("bilevel stationarity construction", check_stationary_point),
    ("alternation hand unroll", check_hand_unroll),
    ("batch stack arithmetic", check_batch_stack),
    ("gradient clipping", check_clipping),
]


def run_verify_suite(seed: int = 0) -> List[CheckResult]:
    results = []
    for name, check in CHECKS:
        start = time.perf_counter()
        try:
            passed, detail = check(seed)
        except Exception as e:
            logger.exception(f"❌ Check '{name}' raised")
            passed, detail = False, f"{e.__class__.__name__}: {e}"
        elapsed = time.perf_counter() - start
        results.append(CheckResult(name, passed, detail, elapsed))
        status = "✅" if passed else "❌"
        logger.info(f"{status} {name}: {detail} ({elapsed:.2f}s)")
    return results


def render_results(results: List[CheckResult], console: Optional[Console] = None) -> None:
    table = Table(title="Oracle suite")
    table.add_column("check")
    table.add_column("result")
    table.add_column("detail")
    table.add_column("seconds", justify="right")
    for r in results:
        table.add_row(r.name, "[green]pass[/green]" if r.passed else "[red]FAIL[/red]", r.detail, f"{r.seconds:.2f}")
    (console or Console()).print(table)


def all_passed(results: List[CheckResult]) -> bool:
    return all(r.passed for r in results)
