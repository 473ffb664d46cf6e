# app/services/stages.py
"""
Training stages: pretext pretraining, head warm-up, BiSSL, the
weighted-sum baseline and downstream fine-tuning.

Each stage reads only the artifacts passed in and its own seed, so it can be
re-run on its own from a checkpoint and reproduce the same outputs.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional
import logging
import math
import time

import torch
from tqdm import tqdm

from app.autodiff.tensor_ops import ParamVector, concat_norm, grad, value_and_grads
from app.core.config import settings
from app.core.errors import ConfigError, NumericalAbortError, NumericalOverflowError
from app.core.models import (
    AugmentConfig,
    BiSSLConfig,
    FinetuneConfig,
    HeadKind,
    ModelPart,
    ModelSpec,
    NormKind,
    PretrainConfig,
    WarmupConfig,
)
from app.data.synthetic import DownstreamSplits, LabeledSet, SyntheticData, UnlabeledSet, augment_views
from app.hypergrad.implicit import clip_by_norm
from app.networks.mlp import (
    RunningStats,
    estimate_running_stats,
    flatten,
    forward_backbone,
    forward_head,
    init_model,
)
from app.objectives.losses import (
    LabeledBatch,
    cross_entropy,
    downstream_objective,
    head_objective,
    pretext_objective,
    topk_accuracy,
    weighted_sum_gradients,
)
from app.training.batch_stack import BatchStack, stack_next
from app.training.bissl_loop import BiSSLProblem, TrainState, bissl_run
from app.training.metrics import BISSL_COLUMNS, EPOCH_COLUMNS, MetricsWriter
from app.training.optimizers import MomentumState, lars_step, optimizer_step, sgd_momentum_step
from app.training.schedules import cosine_schedule, learning_rate
from app.verify.oracles import stationarity_residual

logger = logging.getLogger(__name__)


def _elapsed_ms(start: float) -> float:
    return round((time.perf_counter() - start) * 1000.0, 3) if settings.RECORD_WALL_TIME else 0.0


def _batches(n: int, batch_size: int, generator: torch.Generator, drop_last: bool) -> List[torch.Tensor]:
    order = torch.randperm(n, generator=generator)
    stop = (n // batch_size) * batch_size if drop_last else n
    return [order[i:min(i + batch_size, stop)] for i in range(0, stop, batch_size)]


def eval_running_stats(spec: ModelSpec, theta: ParamVector, inputs: torch.Tensor) -> Optional[RunningStats]:
    """Population statistics for evaluation; None when the model has no normalization."""
    if spec.norm is NormKind.NONE:
        return None
    return estimate_running_stats(theta, inputs, spec, ModelPart.BACKBONE)


# ==================== Pretext pretraining ====================

@dataclass
class PretrainResult:
    theta: ParamVector
    phi_p: ParamVector
    history: List[Dict[str, Any]] = field(default_factory=list)


def diagnostic_views(data: UnlabeledSet, batch_size: int, augment: AugmentConfig, seed: int):
    """A fixed pair of views used to compare gradient norms across epochs."""
    generator = torch.Generator().manual_seed(int(seed))
    return augment_views(data.inputs[:batch_size], generator, augment)


def run_pretext_pretrain(
    spec: ModelSpec,
    data: UnlabeledSet,
    cfg: PretrainConfig,
    augment: AugmentConfig,
    seed: int,
    augment_seed: int,
    metrics_path: Optional[Path] = None,
) -> PretrainResult:
    """NT-Xent pretraining of (θ, φ_P) with LARS and a warm-up + cosine schedule."""
    params = init_model(spec, seed)
    theta = flatten(params, ModelPart.BACKBONE)
    phi_p = flatten(params, ModelPart.PRETEXT_HEAD)
    objective = pretext_objective(spec, cfg.temperature)

    steps_per_epoch = len(data) // cfg.batch_size
    if steps_per_epoch < 1:
        raise ConfigError(f"Pretext set of {len(data)} samples is smaller than one batch of {cfg.batch_size}")
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    generator = torch.Generator().manual_seed(int(augment_seed))
    probe = diagnostic_views(data, cfg.batch_size, augment, augment_seed)

    m_theta, m_phi = MomentumState(), MomentumState()
    history: List[Dict[str, Any]] = []
    step = 0
    with MetricsWriter(EPOCH_COLUMNS, metrics_path) as metrics:
        for epoch in tqdm(range(cfg.epochs), desc="pretrain", disable=not settings.SHOW_PROGRESS):
            start = time.perf_counter()
            losses = []
            try:
                for idx in _batches(len(data), cfg.batch_size, generator, drop_last=True):
                    views = augment_views(data.inputs[idx], generator, augment)
                    loss, g_theta, g_phi = value_and_grads(objective, theta, views, aux=phi_p)
                    lr = cosine_schedule(step, total_steps, cfg.base_lr, warmup_steps)
                    theta, m_theta = lars_step(
                        theta, g_theta, m_theta, lr, cfg.momentum, cfg.weight_decay, cfg.trust_coefficient
                    )
                    phi_p, m_phi = lars_step(
                        phi_p, g_phi, m_phi, lr, cfg.momentum, cfg.weight_decay, cfg.trust_coefficient
                    )
                    losses.append(loss)
                    step += 1
            except NumericalOverflowError as e:
                raise NumericalAbortError(f"Pretraining diverged in epoch {epoch + 1}", details={"segment": e.segment}) from e

            row = {
                "epoch": epoch + 1,
                "loss": sum(losses) / len(losses),
                "grad_norm": grad(objective, theta, probe, aux=phi_p).norm(),
                "lr": lr,
                "val_accuracy": None,
                "val_loss": None,
                "wall_ms": _elapsed_ms(start),
            }
            metrics.write(row)
            history.append(row)

    if history:
        logger.info(f"✅ Pretraining done: loss {history[0]['loss']:.4f} -> {history[-1]['loss']:.4f}")
    return PretrainResult(theta=theta, phi_p=phi_p, history=history)


# ==================== Head warm-up ====================

@dataclass
class WarmupResult:
    phi_d: ParamVector
    train_accuracy: float
    history: List[Dict[str, Any]] = field(default_factory=list)


def run_head_warmup(
    spec: ModelSpec,
    theta: ParamVector,
    phi_d: ParamVector,
    train: LabeledSet,
    cfg: WarmupConfig,
    seed: int,
) -> WarmupResult:
    """Fit the linear head on frozen backbone features with a constant learning rate."""
    stats = eval_running_stats(spec, theta, train.inputs)
    with torch.no_grad():
        features = forward_backbone(theta, train.inputs, spec, stats)
    objective = head_objective(spec)
    generator = torch.Generator().manual_seed(int(seed))
    momentum = MomentumState()
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(train), cfg.batch_size, generator, drop_last=False):
            batch = LabeledBatch(features[idx], train.labels[idx])
            loss, g, _ = value_and_grads(objective, phi_d, batch)
            phi_d, momentum = sgd_momentum_step(phi_d, g, momentum, cfg.lr, cfg.momentum, cfg.weight_decay)
            losses.append(loss)
        history.append({"epoch": epoch + 1, "loss": sum(losses) / len(losses)})

    with torch.no_grad():
        logits = forward_head(phi_d, features, HeadKind.DOWNSTREAM, spec)
    accuracy = topk_accuracy(logits, train.labels, 1)
    logger.info(f"✅ Head warm-up done: train accuracy {accuracy:.3f}")
    return WarmupResult(phi_d=phi_d, train_accuracy=accuracy, history=history)


# ==================== Evaluation and fine-tuning ====================

@dataclass(frozen=True)
class EvalMetrics:
    loss: float
    accuracy: float
    topk_accuracy: float
    k: int


def evaluate(
    spec: ModelSpec, theta: ParamVector, phi_d: ParamVector, split: LabeledSet, topk: int = 5,
    running_stats: Optional[RunningStats] = None,
) -> EvalMetrics:
    k = min(topk, spec.num_classes)
    with torch.no_grad():
        features = forward_backbone(theta, split.inputs, spec, running_stats)
        logits = forward_head(phi_d, features, HeadKind.DOWNSTREAM, spec)
        loss = float(cross_entropy(logits, split.labels))
    return EvalMetrics(
        loss=loss,
        accuracy=topk_accuracy(logits, split.labels, 1),
        topk_accuracy=topk_accuracy(logits, split.labels, k),
        k=k,
    )


@dataclass
class FinetuneResult:
    theta: ParamVector
    phi_d: ParamVector
    best_epoch: int
    val: EvalMetrics
    test: EvalMetrics
    history: List[Dict[str, Any]] = field(default_factory=list)


def run_finetune(
    spec: ModelSpec,
    theta: ParamVector,
    phi_d: ParamVector,
    splits: DownstreamSplits,
    cfg: FinetuneConfig,
    seed: int,
    metrics_path: Optional[Path] = None,
) -> FinetuneResult:
    """
    Full-model SGD fine-tuning with cosine decay.

    The model is kept after every epoch whose validation top-1 accuracy beats
    all earlier epochs; test metrics are reported for that model.
    """
    objective = downstream_objective(spec)
    train = splits.train
    generator = torch.Generator().manual_seed(int(seed))
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    best_theta, best_phi, best_epoch = theta, phi_d, 0
    best_val = evaluate(spec, theta, phi_d, splits.val, cfg.topk, eval_running_stats(spec, theta, train.inputs))
    best_accuracy = -math.inf
    m_theta, m_phi = MomentumState(), MomentumState()
    history: List[Dict[str, Any]] = []
    step = 0

    with MetricsWriter(EPOCH_COLUMNS, metrics_path) as metrics:
        for epoch in tqdm(range(cfg.epochs), desc="finetune", disable=not settings.SHOW_PROGRESS):
            start = time.perf_counter()
            losses, norms = [], []
            try:
                for idx in _batches(len(train), cfg.batch_size, generator, drop_last=False):
                    batch = LabeledBatch(train.inputs[idx], train.labels[idx])
                    loss, g_theta, g_phi = value_and_grads(objective, theta, batch, aux=phi_d)
                    lr = cosine_schedule(step, total_steps, cfg.lr, 0)
                    theta, m_theta = sgd_momentum_step(theta, g_theta, m_theta, lr, cfg.momentum, cfg.weight_decay)
                    phi_d, m_phi = sgd_momentum_step(phi_d, g_phi, m_phi, lr, cfg.momentum, cfg.weight_decay)
                    losses.append(loss)
                    norms.append(concat_norm(g_theta, g_phi))
                    step += 1
            except NumericalOverflowError as e:
                raise NumericalAbortError(f"Fine-tuning diverged in epoch {epoch + 1}", details={"segment": e.segment}) from e

            val = evaluate(spec, theta, phi_d, splits.val, cfg.topk, eval_running_stats(spec, theta, train.inputs))
            if val.accuracy > best_accuracy:
                best_accuracy = val.accuracy
                best_theta, best_phi, best_epoch, best_val = theta.clone(), phi_d.clone(), epoch + 1, val
            row = {
                "epoch": epoch + 1,
                "loss": sum(losses) / len(losses),
                "grad_norm": sum(norms) / len(norms),
                "lr": lr,
                "val_accuracy": val.accuracy,
                "val_loss": val.loss,
                "wall_ms": _elapsed_ms(start),
            }
            metrics.write(row)
            history.append(row)

    test = evaluate(
        spec, best_theta, best_phi, splits.test, cfg.topk, eval_running_stats(spec, best_theta, train.inputs)
    )
    logger.info(f"✅ Fine-tuning done: best epoch {best_epoch}, test accuracy {test.accuracy:.4f}")
    return FinetuneResult(
        theta=best_theta, phi_d=best_phi, best_epoch=best_epoch, val=best_val, test=test, history=history
    )


# ==================== BiSSL and the weighted-sum baseline ====================

def build_bissl_problem(
    spec: ModelSpec,
    data: SyntheticData,
    temperature: float,
    augment: AugmentConfig,
    pretext_batch_size: int,
    downstream_batch_size: int,
    stack_seed: int,
    augment_seed: int,
) -> BiSSLProblem:
    generator = torch.Generator().manual_seed(int(augment_seed))
    train = data.downstream.train
    return BiSSLProblem(
        pretext=pretext_objective(spec, temperature),
        downstream=downstream_objective(spec),
        pretext_stack=BatchStack(data.pretext.inputs, pretext_batch_size, stack_seed),
        downstream_stack=BatchStack(train.inputs, downstream_batch_size, stack_seed + 1, labels=train.labels),
        make_views=lambda x: augment_views(x, generator, augment),
        augment_generator=generator,
    )


@dataclass
class BiSSLStageResult:
    theta_p: ParamVector
    state: TrainState
    stationarity_before: float
    stationarity_after: float
    records: List[Dict[str, Any]]


def run_bissl_stage(
    cfg: BiSSLConfig,
    problem: BiSSLProblem,
    state: TrainState,
    probe: Any,
    metrics_path: Optional[Path] = None,
    checkpoint_path: Optional[Path] = None,
    resume: bool = False,
) -> BiSSLStageResult:
    """bissl_run plus the lower-level stationarity residual before and after, measured on `probe`."""
    before = stationarity_residual(problem.pretext, state.theta_d, state.theta_p, state.phi_p, cfg.lam, probe)
    with MetricsWriter(BISSL_COLUMNS, metrics_path, append=resume) as metrics:
        result = bissl_run(cfg, state, problem, metrics, checkpoint_path)
    after = stationarity_residual(problem.pretext, state.theta_d, state.theta_p, state.phi_p, cfg.lam, probe)
    logger.info(f"📊 Lower-level stationarity residual {before:.4e} -> {after:.4e}")
    return BiSSLStageResult(result.theta_p, state, before, after, result.records)


@dataclass
class WeightedSumResult:
    theta: ParamVector
    phi_p: ParamVector
    phi_d: ParamVector
    history: List[Dict[str, Any]] = field(default_factory=list)


def run_weighted_sum(
    cfg: BiSSLConfig,
    problem: BiSSLProblem,
    theta: ParamVector,
    phi_p: ParamVector,
    phi_d: ParamVector,
    w: float,
    steps: int,
) -> WeightedSumResult:
    """
    Joint training on w·L^D + (1 − w)·L^P, one pretext and one downstream
    batch per step, with the lower-level optimizer settings.
    """
    moments = {"theta": MomentumState(), "phi_p": MomentumState(), "phi_d": MomentumState()}
    warmup = min(cfg.lower_warmup_steps, steps)
    history = []
    for step in tqdm(range(steps), desc="weighted-sum", disable=not settings.SHOW_PROGRESS):
        (x,) = stack_next(problem.pretext_stack, 1)
        (batch,) = stack_next(problem.downstream_stack, 1)
        terms = weighted_sum_gradients(
            problem.pretext, problem.downstream, theta, phi_p, phi_d, w, problem.make_views(x), batch
        )
        lr = learning_rate(cfg.lower, step, steps, warmup)
        clip = cfg.clip_threshold
        theta, moments["theta"] = optimizer_step(cfg.lower, theta, clip_by_norm(terms.g_theta, clip), moments["theta"], lr)
        phi_p, moments["phi_p"] = optimizer_step(cfg.lower, phi_p, clip_by_norm(terms.g_phi_p, clip), moments["phi_p"], lr)
        phi_d, moments["phi_d"] = optimizer_step(cfg.lower, phi_d, clip_by_norm(terms.g_phi_d, clip), moments["phi_d"], lr)
        history.append({"step": step + 1, "loss": terms.loss, "lr": lr})
    return WeightedSumResult(theta, phi_p, phi_d, history)
