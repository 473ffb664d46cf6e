# app/services/pipeline_service.py
"""
Service that runs whole pipelines: the comparison arms, the random
hyperparameter search and the ablation table.

One pretrained backbone is shared by every arm and seed of a service
instance. Arms run on a thread pool (BISSL_THREADS workers); results are
sorted by (seed index, arm order) before anything is written.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import threading
import time

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from app.core.config import settings
from app.core.errors import ConfigError
from app.core.models import Arm, BiSSLConfig, FinetuneConfig, ModelPart, RunConfig, SearchSpace, SearchStage
from app.core.seeding import derive_seed
from app.data.synthetic import SyntheticData, dataset_hash, make_datasets
from app.networks.mlp import flatten, init_model
from app.services.manifest import RunManifest, maybe_write
from app.services.stages import (
    PretrainResult,
    build_bissl_problem,
    diagnostic_views,
    run_bissl_stage,
    run_finetune,
    run_head_warmup,
    run_pretext_pretrain,
    run_weighted_sum,
)
from app.training.bissl_loop import TrainState
from app.training.checkpoint import param_hash, save_params

logger = logging.getLogger(__name__)

ARM_ORDER: List[Arm] = list(Arm)
ABLATION_ARMS: List[Arm] = [Arm.BISSL, Arm.BISSL_NU1, Arm.BISSL_NU1_MATCHED, Arm.BISSL_DISCARD_IJ]
PRETRAINED_NAME = "pretrained.pt"


def arm_bissl_config(arm: Arm, base: BiSSLConfig) -> Optional[BiSSLConfig]:
    """BiSSL settings for an arm; None for arms that skip BiSSL."""
    if arm is Arm.BISSL:
        return base
    if arm is Arm.BISSL_DISCARD_IJ:
        return base.model_copy(update={"discard_ij": True})
    if arm is Arm.BISSL_NU1:
        return base.model_copy(update={"N_U": 1})
    if arm is Arm.BISSL_NU1_MATCHED:
        # same number of upper-level updates as the default arm
        return base.model_copy(update={"N_U": 1, "T": base.T * base.N_U})
    return None


def data_seed(cfg: RunConfig) -> int:
    if cfg.data.seed is not None:
        return cfg.data.seed
    return derive_seed(cfg.pipeline.seed, "data")


def bissl_seed(cfg: RunConfig) -> int:
    """Root of the BiSSL batch-stack and augmentation streams; bissl.seed overrides pipeline.seed."""
    return cfg.bissl.seed if cfg.bissl.seed is not None else cfg.pipeline.seed


@dataclass
class ArmResult:
    arm: str
    seed_index: int
    test_accuracy: float
    test_topk_accuracy: float
    test_loss: float
    val_accuracy: float
    val_loss: float
    best_epoch: int
    theta_hash: str
    stationarity_before: Optional[float] = None
    stationarity_after: Optional[float] = None
    seconds: float = 0.0


@dataclass
class ComparisonReport:
    results: List[ArmResult]
    name: str = "comparison"

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.results])

    def summary(self) -> pd.DataFrame:
        """Mean and sample std per arm, arms in their canonical order."""
        frame = self.frame()
        metrics = ["test_accuracy", "test_topk_accuracy", "test_loss", "val_accuracy"]
        grouped = frame.groupby("arm", sort=False)[metrics]
        table = grouped.mean().add_suffix("_mean").join(grouped.std(ddof=1).fillna(0.0).add_suffix("_std"))
        table.insert(0, "seeds", grouped.size())
        order = [a.value for a in ARM_ORDER if a.value in table.index]
        return table.loc[order].reset_index()

    def text(self) -> str:
        summary = self.summary()
        lines = [f"{'arm':<20} {'seeds':>5} {'test acc':>18} {'top-k acc':>18}"]
        for _, row in summary.iterrows():
            lines.append(
                f"{row['arm']:<20} {int(row['seeds']):>5} "
                f"{row['test_accuracy_mean']:>9.4f} ± {row['test_accuracy_std']:<6.4f} "
                f"{row['test_topk_accuracy_mean']:>9.4f} ± {row['test_topk_accuracy_std']:<6.4f}"
            )
        return "\n".join(lines) + "\n"

    def write(self, output_dir: Path) -> Dict[str, Path]:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "results": output_dir / f"{self.name}_results.csv",
            "table": output_dir / f"{self.name}.csv",
            "text": output_dir / f"{self.name}.txt",
        }
        self.frame().to_csv(paths["results"], index=False)
        self.summary().to_csv(paths["table"], index=False)
        paths["text"].write_text(self.text(), encoding="utf-8")
        logger.info(f"✅ Wrote {self.name} table to {paths['table']}")
        return paths

    def render(self, console: Optional[Console] = None) -> None:
        table = Table(title=self.name)
        for column in ("arm", "seeds", "test acc", "top-k acc"):
            table.add_column(column)
        for _, row in self.summary().iterrows():
            table.add_row(
                row["arm"], str(int(row["seeds"])),
                f"{row['test_accuracy_mean']:.4f} ± {row['test_accuracy_std']:.4f}",
                f"{row['test_topk_accuracy_mean']:.4f} ± {row['test_topk_accuracy_std']:.4f}",
            )
        (console or Console()).print(table)


# ==================== Random search ====================

def sample_log_uniform(rng: np.random.Generator, low: float, high: float) -> float:
    if low <= 0 or high < low:
        raise ConfigError(f"Log-uniform range must satisfy 0 < low <= high, got [{low}, {high}]")
    return float(np.exp(rng.uniform(np.log(low), np.log(high))))


@dataclass
class TrialResult:
    index: int
    lr: float
    weight_decay: float
    val_accuracy: float
    val_loss: float


@dataclass
class SearchResult:
    best: TrialResult
    trials: List[TrialResult] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(t) for t in self.trials])


TrialTrainer = Callable[[int, float, float], Tuple[float, float]]


def random_search(
    space: SearchSpace,
    trials: int,
    stage: SearchStage,
    seed: int,
    trainer: TrialTrainer,
    workers: int = 1,
) -> SearchResult:
    """
    Log-uniform search over (lr, weight decay).

    `trainer(index, lr, wd)` returns (val accuracy, val loss). The winner has
    the highest val accuracy; ties go to the lower val loss, then the lower
    trial index.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    configs = [
        (i, sample_log_uniform(rng, space.lr_min, space.lr_max), sample_log_uniform(rng, space.wd_min, space.wd_max))
        for i in range(trials)
    ]
    logger.info(f"🔎 Random search over {stage.value}: {trials} trials")

    def run(config: Tuple[int, float, float]) -> TrialResult:
        index, lr, wd = config
        accuracy, loss = trainer(index, lr, wd)
        return TrialResult(index, lr, wd, accuracy, loss)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = sorted(pool.map(run, configs), key=lambda t: t.index)
    best = min(results, key=lambda t: (-t.val_accuracy, t.val_loss, t.index))
    logger.info(f"✅ Best trial {best.index}: lr={best.lr:.3g} wd={best.weight_decay:.3g} val acc {best.val_accuracy:.4f}")
    return SearchResult(best=best, trials=results)


# ==================== Pipeline ====================

class PipelineService:
    """Runs pipeline arms that share one dataset and one pretrained backbone"""

    def __init__(self, cfg: RunConfig, output_dir: Path, manifest: Optional[RunManifest] = None):
        self.cfg = cfg
        self.output_dir = Path(output_dir)
        self.manifest = manifest
        self.root_seed = cfg.pipeline.seed
        self._data: Optional[SyntheticData] = None
        self._pretrained: Optional[PretrainResult] = None
        self._lock = threading.Lock()

    def prepare_data(self) -> SyntheticData:
        with self._lock:
            if self._data is None:
                self._data = make_datasets(self.cfg.data, data_seed(self.cfg))
                maybe_write(self.manifest, "hash.dataset", dataset_hash(self._data))
            return self._data

    def pretrain(self) -> PretrainResult:
        data = self.prepare_data()
        with self._lock:
            if self._pretrained is None:
                start = time.perf_counter()
                self._pretrained = run_pretext_pretrain(
                    self.cfg.model, data.pretext, self.cfg.pretrain, self.cfg.data.augment,
                    seed=derive_seed(self.root_seed, "init"),
                    augment_seed=derive_seed(self.root_seed, "augment"),
                    metrics_path=self.output_dir / "pretrain_metrics.csv",
                )
                hashes = save_params(
                    self.output_dir / PRETRAINED_NAME,
                    {"theta": self._pretrained.theta, "phi_p": self._pretrained.phi_p},
                    meta={"stage": "pretrain"},
                )
                if self.manifest is not None:
                    self.manifest.record_hash("pretrained.theta", hashes["theta"])
                    self.manifest.record_timing("pretrain", time.perf_counter() - start)
            return self._pretrained

    def run_arm(self, arm: Arm, seed_index: int, finetune: Optional[FinetuneConfig] = None) -> ArmResult:
        cfg = self.cfg
        spec = cfg.model
        root = self.root_seed
        bissl_root = bissl_seed(cfg)
        data = self.prepare_data()
        pre = self.pretrain()
        arm_dir = self.output_dir / arm.value / f"seed_{seed_index}"
        start = time.perf_counter()
        logger.info(f"▶️ Arm {arm.value}, seed {seed_index}")

        # every arm fine-tunes from a freshly initialized head
        fresh_head = flatten(init_model(spec, derive_seed(root, "init", seed_index)), ModelPart.DOWNSTREAM_HEAD)
        theta = pre.theta
        before = after = None

        if arm is not Arm.FT_ONLY:
            warm = run_head_warmup(
                spec, pre.theta, fresh_head, data.downstream.train, cfg.warmup,
                seed=derive_seed(root, "train", seed_index, 0),
            )
            problem = build_bissl_problem(
                spec, data, cfg.pretrain.temperature, cfg.data.augment,
                cfg.data.pretext_batch_size, cfg.data.downstream_batch_size,
                stack_seed=derive_seed(bissl_root, "stack", seed_index),
                augment_seed=derive_seed(bissl_root, "augment", seed_index),
            )
            bissl_cfg = arm_bissl_config(arm, cfg.bissl)
            if bissl_cfg is not None:
                probe = diagnostic_views(
                    data.pretext, cfg.data.pretext_batch_size, cfg.data.augment,
                    derive_seed(bissl_root, "augment", seed_index, 1),
                )
                stage = run_bissl_stage(
                    bissl_cfg, problem, TrainState.initial(pre.theta, pre.phi_p, warm.phi_d), probe,
                    metrics_path=arm_dir / "bissl_metrics.csv",
                    checkpoint_path=arm_dir / "bissl_state.pt",
                )
                theta, before, after = stage.theta_p, stage.stationarity_before, stage.stationarity_after
            else:
                steps = cfg.bissl.T * cfg.bissl.N_U
                theta = run_weighted_sum(
                    cfg.bissl, problem, pre.theta, pre.phi_p, warm.phi_d, cfg.pipeline.weighted_sum_w, steps
                ).theta

        ft = run_finetune(
            spec, theta, fresh_head, data.downstream, finetune or cfg.finetune,
            seed=derive_seed(root, "train", seed_index, 1),
            metrics_path=arm_dir / "finetune_metrics.csv",
        )
        hashes = save_params(
            arm_dir / "finetuned.pt", {"theta": ft.theta, "phi_d": ft.phi_d},
            meta={"arm": arm.value, "seed_index": seed_index, "best_epoch": ft.best_epoch},
        )
        seconds = time.perf_counter() - start
        if self.manifest is not None:
            self.manifest.record_hash(f"{arm.value}.seed_{seed_index}.theta", hashes["theta"])
            self.manifest.record_timing(f"{arm.value}.seed_{seed_index}", seconds)
            if before is not None:
                self.manifest.write(f"stationarity.{arm.value}.seed_{seed_index}.before", f"{before:.6e}")
                self.manifest.write(f"stationarity.{arm.value}.seed_{seed_index}.after", f"{after:.6e}")
        return ArmResult(
            arm=arm.value,
            seed_index=seed_index,
            test_accuracy=ft.test.accuracy,
            test_topk_accuracy=ft.test.topk_accuracy,
            test_loss=ft.test.loss,
            val_accuracy=ft.val.accuracy,
            val_loss=ft.val.loss,
            best_epoch=ft.best_epoch,
            theta_hash=param_hash(ft.theta),
            stationarity_before=before,
            stationarity_after=after,
            seconds=seconds,
        )

    def run(
        self,
        arms: Optional[Sequence[Arm]] = None,
        seeds: Optional[int] = None,
        finetune: Optional[FinetuneConfig] = None,
        name: str = "comparison",
    ) -> ComparisonReport:
        arms = list(arms or self.cfg.pipeline.arms)
        seeds = seeds or self.cfg.pipeline.seeds
        # shared artifacts are built before fanning out
        self.pretrain()
        jobs = [(r, arm) for r in range(seeds) for arm in arms]
        logger.info(f"🚀 Pipeline: {len(arms)} arms x {seeds} seeds on {settings.worker_count} worker(s)")
        with ThreadPoolExecutor(max_workers=settings.worker_count) as pool:
            results = list(pool.map(lambda job: self.run_arm(job[1], job[0], finetune), jobs))
        results.sort(key=lambda res: (res.seed_index, ARM_ORDER.index(Arm(res.arm))))
        report = ComparisonReport(results, name)
        report.write(self.output_dir)
        return report

    def ablate(self, seeds: Optional[int] = None) -> ComparisonReport:
        return self.run(ABLATION_ARMS, seeds, name="ablation")

    def sweep(self, seeds: Optional[int] = None) -> Tuple[SearchResult, ComparisonReport]:
        """Search fine-tuning (lr, wd) from the pretrained backbone, then retrain the winner with R seeds."""
        cfg = self.cfg
        data = self.prepare_data()
        pre = self.pretrain()
        head = flatten(init_model(cfg.model, derive_seed(self.root_seed, "init", 0)), ModelPart.DOWNSTREAM_HEAD)

        def trainer(index: int, lr: float, wd: float) -> Tuple[float, float]:
            ft_cfg = cfg.finetune.model_copy(update={"lr": lr, "weight_decay": wd})
            result = run_finetune(
                cfg.model, pre.theta, head, data.downstream, ft_cfg, seed=derive_seed(self.root_seed, "search", index),
            )
            return result.val.accuracy, result.val.loss

        search = random_search(
            cfg.search, cfg.search.trials, SearchStage.FINETUNE, derive_seed(self.root_seed, "search"),
            trainer, settings.worker_count,
        )
        self.output_dir.mkdir(parents=True, exist_ok=True)
        search.frame().to_csv(self.output_dir / "search_trials.csv", index=False)
        maybe_write(self.manifest, "search.best.index", search.best.index)
        maybe_write(self.manifest, "search.best.lr", repr(search.best.lr))
        maybe_write(self.manifest, "search.best.weight_decay", repr(search.best.weight_decay))

        tuned = cfg.finetune.model_copy(update={"lr": search.best.lr, "weight_decay": search.best.weight_decay})
        report = self.run([Arm.FT_ONLY], seeds, finetune=tuned, name="search_retrain")
        return search, report
