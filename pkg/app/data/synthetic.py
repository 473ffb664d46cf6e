# app/data/synthetic.py
"""
Synthetic pretext/downstream datasets and vector-space augmentations.

Pretext samples come from K isotropic Gaussian clusters. The downstream
task uses the same clusters translated by `shift_magnitude` along a fixed
random unit direction, labelled by cluster id, and is split per class into
train/val/test.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional
import hashlib
import logging

import numpy as np
import pandas as pd
import torch

from app.autodiff.tensor_ops import DTYPE
from app.core.errors import ConfigError
from app.core.models import AugmentConfig, SynthConfig
from app.objectives.losses import LabeledBatch, ViewBatch

logger = logging.getLogger(__name__)

MIN_SAMPLES_PER_CLASS = 5


@dataclass(frozen=True)
class UnlabeledSet:
    inputs: torch.Tensor
    sample_ids: torch.Tensor

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class LabeledSet:
    inputs: torch.Tensor
    labels: torch.Tensor
    sample_ids: torch.Tensor

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def as_batch(self) -> LabeledBatch:
        return LabeledBatch(self.inputs, self.labels)


@dataclass(frozen=True)
class DownstreamSplits:
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet


@dataclass(frozen=True)
class SyntheticData:
    pretext: UnlabeledSet
    downstream: DownstreamSplits
    pretext_means: np.ndarray
    downstream_means: np.ndarray
    shift_direction: np.ndarray


def _class_counts(total: int, num_classes: int) -> List[int]:
    return [total // num_classes + (1 if c < total % num_classes else 0) for c in range(num_classes)]


def _draw_clusters(
    means: np.ndarray, counts: List[int], noise_scale: float, seqs: List[np.random.SeedSequence]
) -> List[np.ndarray]:
    """One independent generator per class."""
    out = []
    for c, (n_c, seq) in enumerate(zip(counts, seqs)):
        rng = np.random.default_rng(seq)
        out.append(means[c] + noise_scale * rng.standard_normal((n_c, means.shape[1])))
    return out


def _labeled(x: np.ndarray, y: np.ndarray, ids: np.ndarray) -> LabeledSet:
    return LabeledSet(
        inputs=torch.from_numpy(np.ascontiguousarray(x)).to(DTYPE),
        labels=torch.from_numpy(np.ascontiguousarray(y)).long(),
        sample_ids=torch.from_numpy(np.ascontiguousarray(ids)).long(),
    )


def stratified_split(
    labels: np.ndarray, val_fraction: float, test_fraction: float, rng: np.random.Generator,
    train_per_class: Optional[int] = None,
) -> Dict[str, np.ndarray]:
    """Per-class shuffled index split; each class contributes round(fraction·n_c) samples."""
    parts: Dict[str, List[np.ndarray]] = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_val = int(round(val_fraction * idx.size))
        n_test = int(round(test_fraction * idx.size))
        train = idx[n_val + n_test:]
        if train.size == 0:
            raise ConfigError(f"Class {int(c)} has no training samples after splitting")
        if train_per_class is not None:
            train = train[:train_per_class]
        parts["val"].append(idx[:n_val])
        parts["test"].append(idx[n_val:n_val + n_test])
        parts["train"].append(train)
    return {name: np.sort(np.concatenate(chunks)) for name, chunks in parts.items()}


def make_datasets(cfg: SynthConfig, seed: Optional[int] = None) -> SyntheticData:
    seed = cfg.seed if seed is None else seed
    if seed is None:
        raise ConfigError("make_datasets needs a seed (data.seed or a derived data stream)")

    counts_p = _class_counts(cfg.pretext_samples, cfg.num_classes)
    counts_d = _class_counts(cfg.downstream_samples, cfg.num_classes)
    if min(counts_d) < MIN_SAMPLES_PER_CLASS:
        raise ConfigError(
            f"Downstream classes need at least {MIN_SAMPLES_PER_CLASS} samples, got {min(counts_d)}",
            details={"downstream_samples": cfg.downstream_samples, "num_classes": cfg.num_classes},
        )

    root = np.random.SeedSequence(int(seed))
    means_seq, direction_seq, split_seq, order_seq, pretext_seq, downstream_seq = root.spawn(6)

    means = cfg.cluster_spread * np.sqrt(cfg.input_dim) * np.random.default_rng(means_seq).standard_normal(
        (cfg.num_classes, cfg.input_dim)
    )
    direction = np.random.default_rng(direction_seq).standard_normal(cfg.input_dim)
    direction /= np.linalg.norm(direction)
    downstream_means = means + cfg.shift_magnitude * direction

    pretext_chunks = _draw_clusters(means, counts_p, cfg.noise_scale, pretext_seq.spawn(cfg.num_classes))
    pretext_x = np.concatenate(pretext_chunks)
    pretext_x = pretext_x[np.random.default_rng(order_seq).permutation(pretext_x.shape[0])]

    downstream_chunks = _draw_clusters(downstream_means, counts_d, cfg.noise_scale, downstream_seq.spawn(cfg.num_classes))
    downstream_x = np.concatenate(downstream_chunks)
    downstream_y = np.concatenate([np.full(n, c, dtype=np.int64) for c, n in enumerate(counts_d)])
    # ids continue after the pretext ids so the two sets never share one
    downstream_ids = np.arange(downstream_x.shape[0]) + pretext_x.shape[0]

    split = stratified_split(
        downstream_y, cfg.val_fraction, cfg.test_fraction, np.random.default_rng(split_seq),
        cfg.train_samples_per_class,
    )
    splits = DownstreamSplits(
        **{name: _labeled(downstream_x[idx], downstream_y[idx], downstream_ids[idx]) for name, idx in split.items()}
    )
    pretext = UnlabeledSet(
        inputs=torch.from_numpy(pretext_x).to(DTYPE),
        sample_ids=torch.arange(pretext_x.shape[0], dtype=torch.long),
    )
    logger.info(
        f"✅ Synthetic data: {len(pretext)} pretext, "
        f"{len(splits.train)}/{len(splits.val)}/{len(splits.test)} downstream train/val/test"
    )
    return SyntheticData(pretext, splits, means, downstream_means, direction)


def _augment(x: torch.Tensor, generator: torch.Generator, cfg: AugmentConfig) -> torch.Tensor:
    batch, dim = x.shape
    lo, hi = cfg.scale_range
    scale = lo + (hi - lo) * torch.rand((batch, 1), generator=generator, dtype=DTYPE)
    noise = torch.randn((batch, dim), generator=generator, dtype=DTYPE) * cfg.noise_sigma
    view = x * scale + noise
    n_mask = int(round(cfg.mask_fraction * dim))
    if n_mask > 0:
        ranks = torch.rand((batch, dim), generator=generator, dtype=DTYPE).argsort(dim=1)
        mask = torch.zeros((batch, dim), dtype=torch.bool)
        mask.scatter_(1, ranks[:, :n_mask], True)
        view = view.masked_fill(mask, 0.0)
    return view


def augment_views(x: torch.Tensor, generator: torch.Generator, cfg: AugmentConfig) -> ViewBatch:
    """Two independent augmented views of every row of x."""
    x = x.to(DTYPE)
    return ViewBatch(_augment(x, generator, cfg), _augment(x, generator, cfg))


def dataset_hash(data: SyntheticData) -> str:
    digest = hashlib.sha256()
    tensors = [
        data.pretext.inputs,
        data.downstream.train.inputs, data.downstream.train.labels,
        data.downstream.val.inputs, data.downstream.val.labels,
        data.downstream.test.inputs, data.downstream.test.labels,
    ]
    for t in tensors:
        digest.update(t.contiguous().numpy().tobytes())
    return digest.hexdigest()


def _frame(inputs: torch.Tensor, labels: Optional[torch.Tensor] = None) -> pd.DataFrame:
    frame = pd.DataFrame(inputs.numpy(), columns=[f"x_{i}" for i in range(inputs.shape[1])])
    if labels is not None:
        frame["label"] = labels.numpy()
    return frame


def export_datasets_csv(data: SyntheticData, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = {
        "pretext.csv": _frame(data.pretext.inputs),
        "downstream_train.csv": _frame(data.downstream.train.inputs, data.downstream.train.labels),
        "downstream_val.csv": _frame(data.downstream.val.inputs, data.downstream.val.labels),
        "downstream_test.csv": _frame(data.downstream.test.inputs, data.downstream.test.labels),
    }
    paths = []
    for name, frame in frames.items():
        path = out_dir / name
        frame.to_csv(path, index=False)
        paths.append(path)
    logger.info(f"✅ Exported {len(paths)} dataset files to {out_dir}")
    return paths


def export_features_csv(features: torch.Tensor, labels: Optional[torch.Tensor], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(features.detach().numpy(), columns=[f"f_{i}" for i in range(features.shape[1])])
    if labels is not None:
        frame["label"] = labels.numpy()
    frame.to_csv(path, index=False)
    return path
