# app/training/bissl_loop.py
"""
The alternating BiSSL training loop.

Each alternation runs N_L lower-level steps on (θ_P, φ_P) and then N_U
upper-level steps on (θ_D, φ_D). Upper steps reuse the most recent lower
pretext batch for the Hessian-vector products and draw a fresh downstream
batch per step.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional
import logging
import time

import torch
from tqdm import tqdm

from app.autodiff.tensor_ops import Objective, ParamVector, concat_norm
from app.core.config import settings
from app.core.errors import NumericalAbortError, NumericalOverflowError
from app.core.models import BiSSLConfig, Phase
from app.hypergrad.implicit import clip_by_norm, lower_step_terms, upper_step_terms
from app.objectives.losses import l2_coupling
from app.training.batch_stack import BatchStack, stack_next
from app.training.checkpoint import save_train_state, vector_from_dict, vector_to_dict
from app.training.metrics import BISSL_COLUMNS, MetricsWriter
from app.training.optimizers import MomentumState, optimizer_step
from app.training.schedules import learning_rate

logger = logging.getLogger(__name__)

PARAM_NAMES = ("theta_p", "phi_p", "theta_d", "phi_d")


@dataclass
class TrainState:
    theta_p: ParamVector
    theta_d: ParamVector
    phi_p: ParamVector
    phi_d: ParamVector
    moments: Dict[str, MomentumState] = field(default_factory=lambda: {n: MomentumState() for n in PARAM_NAMES})
    lower_steps: int = 0
    upper_steps: int = 0
    alternation: int = 0
    stage: str = "bissl"
    rng: Dict[str, Any] = field(default_factory=dict)
    last_pretext_batch: Any = None

    def __post_init__(self):
        self.theta_p.require_same_layout(self.theta_d)

    @classmethod
    def initial(cls, theta: ParamVector, phi_p: ParamVector, phi_d: ParamVector) -> "TrainState":
        """θ_P and θ_D both start at the pretrained backbone."""
        return cls(theta_p=theta.clone(), theta_d=theta.clone(), phi_p=phi_p.clone(), phi_d=phi_d.clone())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "params": {n: vector_to_dict(getattr(self, n)) for n in PARAM_NAMES},
            "moments": {n: None if m.buffer is None else m.buffer.clone() for n, m in self.moments.items()},
            "lower_steps": self.lower_steps,
            "upper_steps": self.upper_steps,
            "alternation": self.alternation,
            "stage": self.stage,
            "rng": self.rng,
            "last_pretext_batch": self.last_pretext_batch,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainState":
        params = {n: vector_from_dict(d) for n, d in data["params"].items()}
        return cls(
            **params,
            moments={n: MomentumState(None if b is None else b.clone()) for n, b in data["moments"].items()},
            lower_steps=int(data["lower_steps"]),
            upper_steps=int(data["upper_steps"]),
            alternation=int(data["alternation"]),
            stage=data["stage"],
            rng=data["rng"],
            last_pretext_batch=data["last_pretext_batch"],
        )


@dataclass
class BiSSLProblem:
    """Objectives and data sources the loop draws from."""
    pretext: Objective
    downstream: Objective
    pretext_stack: BatchStack
    downstream_stack: BatchStack
    make_views: Callable[[Any], Any] = lambda x: x
    augment_generator: Optional[torch.Generator] = None

    def capture_rng(self) -> Dict[str, Any]:
        rng = {
            "pretext_stack": self.pretext_stack.state_dict(),
            "downstream_stack": self.downstream_stack.state_dict(),
        }
        if self.augment_generator is not None:
            rng["augment"] = self.augment_generator.get_state()
        return rng

    def restore_rng(self, rng: Dict[str, Any]) -> None:
        if not rng:
            return
        self.pretext_stack.load_state_dict(rng["pretext_stack"])
        self.downstream_stack.load_state_dict(rng["downstream_stack"])
        if self.augment_generator is not None and "augment" in rng:
            self.augment_generator.set_state(rng["augment"])


@dataclass
class BiSSLRunResult:
    theta_p: ParamVector
    state: TrainState
    records: List[Dict[str, Any]]


def _wall_ms(start: float) -> float:
    if not settings.RECORD_WALL_TIME:
        return 0.0
    return round((time.perf_counter() - start) * 1000.0, 3)


def _flush(state: TrainState, problem: BiSSLProblem, checkpoint_path: Optional[Path]) -> None:
    if checkpoint_path is None:
        return
    state.rng = problem.capture_rng()
    save_train_state(checkpoint_path, state.to_dict())


def bissl_run(
    cfg: BiSSLConfig,
    state: TrainState,
    problem: BiSSLProblem,
    metrics: Optional[MetricsWriter] = None,
    checkpoint_path: Optional[Path] = None,
) -> BiSSLRunResult:
    """
    Run the remaining alternations of `state` (all T of them for a fresh state).

    Mutates `state` in place and returns the final θ_P. A state restored from
    a checkpoint continues exactly where the interrupted run stopped.
    """
    metrics = metrics or MetricsWriter(BISSL_COLUMNS)
    problem.restore_rng(state.rng)
    total_lower = cfg.T * cfg.N_L
    total_upper = cfg.T * cfg.N_U
    clip = cfg.clip_threshold

    if state.alternation == 0:
        logger.info(
            f"🚀 BiSSL: T={cfg.T} N_L={cfg.N_L} N_U={cfg.N_U} lam={cfg.lam} "
            f"N_c={cfg.cg.iterations} damping={cfg.cg.damping} discard_ij={cfg.discard_ij}"
        )

    alternations = range(state.alternation, cfg.T)
    try:
        for t in tqdm(alternations, desc="bissl", disable=not settings.SHOW_PROGRESS):
            # lower level: θ_P, φ_P
            for x in stack_next(problem.pretext_stack, cfg.N_L):
                start = time.perf_counter()
                views = problem.make_views(x)
                terms = lower_step_terms(problem.pretext, state.theta_p, state.phi_p, state.theta_d, cfg.lam, views)
                pre_clip = concat_norm(terms.g_theta, terms.g_phi)
                lr = learning_rate(cfg.lower, state.lower_steps, total_lower, cfg.lower_warmup_steps)
                state.theta_p, state.moments["theta_p"] = optimizer_step(
                    cfg.lower, state.theta_p, clip_by_norm(terms.g_theta, clip), state.moments["theta_p"], lr
                )
                state.phi_p, state.moments["phi_p"] = optimizer_step(
                    cfg.lower, state.phi_p, clip_by_norm(terms.g_phi, clip), state.moments["phi_p"], lr
                )
                state.lower_steps += 1
                state.last_pretext_batch = views
                metrics.write({
                    "step": state.lower_steps + state.upper_steps,
                    "alternation": t + 1,
                    "phase": Phase.LOWER.value,
                    "loss": terms.loss,
                    "grad_norm_pre_clip": pre_clip,
                    "lr": lr,
                    "cg_initial_residual": None,
                    "cg_final_residual": None,
                    "cg_fell_back": None,
                    "coupling_term": terms.coupling,
                    "wall_ms": _wall_ms(start),
                })

            # upper level: θ_D, φ_D
            for batch in stack_next(problem.downstream_stack, cfg.N_U):
                start = time.perf_counter()
                terms = upper_step_terms(
                    problem.pretext, problem.downstream, state.theta_p, state.theta_d,
                    state.phi_p, state.phi_d, cfg.lam, cfg.cg,
                    state.last_pretext_batch, batch, cfg.discard_ij,
                )
                pre_clip = concat_norm(terms.g_theta, terms.g_phi)
                lr = learning_rate(cfg.upper, state.upper_steps, total_upper, cfg.upper_warmup_steps)
                state.theta_d, state.moments["theta_d"] = optimizer_step(
                    cfg.upper, state.theta_d, clip_by_norm(terms.g_theta, clip), state.moments["theta_d"], lr
                )
                state.phi_d, state.moments["phi_d"] = optimizer_step(
                    cfg.upper, state.phi_d, clip_by_norm(terms.g_phi, clip), state.moments["phi_d"], lr
                )
                state.upper_steps += 1
                report = terms.report
                metrics.write({
                    "step": state.lower_steps + state.upper_steps,
                    "alternation": t + 1,
                    "phase": Phase.UPPER.value,
                    "loss": terms.loss,
                    "grad_norm_pre_clip": pre_clip,
                    "lr": lr,
                    "cg_initial_residual": report.cg_initial_residual,
                    "cg_final_residual": report.cg_final_residual,
                    "cg_fell_back": report.fell_back,
                    "coupling_term": cfg.lam * float(l2_coupling(state.theta_d, state.theta_p)),
                    "wall_ms": _wall_ms(start),
                })

            state.alternation = t + 1
            _flush(state, problem, checkpoint_path)
    except NumericalOverflowError as e:
        _flush(state, problem, checkpoint_path)
        if e.segment == "<loss>":
            raise NumericalAbortError(
                f"Non-finite loss at alternation {state.alternation + 1}; state flushed",
                details={"lower_steps": state.lower_steps, "upper_steps": state.upper_steps},
            ) from e
        raise

    logger.info(f"✅ BiSSL finished: {state.lower_steps} lower / {state.upper_steps} upper steps")
    return BiSSLRunResult(theta_p=state.theta_p, state=state, records=metrics.rows)
