# app/networks/mlp.py
"""
MLP backbone, projection head and linear classifier over flat ParamVectors.

Segment names are `<part>.<layer>.<tensor>` with tensor one of weight,
bias, bn_weight, bn_bias. Batch normalization (when enabled) sits after
every hidden linear layer of the backbone and the projection head, before
the ReLU. The downstream head is a single linear layer.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import logging
import math

import torch

from app.autodiff.tensor_ops import DTYPE, Layout, ParamVector
from app.core.errors import LayoutError
from app.core.models import HeadKind, ModelPart, ModelSpec, NormKind

logger = logging.getLogger(__name__)

BN_EPS = 1e-5

RunningStats = Dict[str, torch.Tensor]


def layer_dims(spec: ModelSpec, part: ModelPart) -> List[Tuple[int, int]]:
    if part is ModelPart.BACKBONE:
        dims = [spec.input_dim, *spec.backbone_widths, spec.feature_dim]
    elif part is ModelPart.PRETEXT_HEAD:
        dims = [spec.feature_dim, *spec.pretext_widths]
    else:
        dims = [spec.feature_dim, spec.num_classes]
    return list(zip(dims[:-1], dims[1:]))


def _normalized(spec: ModelSpec, part: ModelPart, index: int, n_layers: int) -> bool:
    return (
        spec.norm is NormKind.BATCHNORM
        and part is not ModelPart.DOWNSTREAM_HEAD
        and index < n_layers - 1
    )


def part_shapes(spec: ModelSpec, part: ModelPart) -> List[Tuple[str, Tuple[int, ...]]]:
    dims = layer_dims(spec, part)
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    for i, (fan_in, fan_out) in enumerate(dims):
        prefix = f"{part.value}.{i}"
        shapes.append((f"{prefix}.weight", (fan_out, fan_in)))
        shapes.append((f"{prefix}.bias", (fan_out,)))
        if _normalized(spec, part, i, len(dims)):
            shapes.append((f"{prefix}.bn_weight", (fan_out,)))
            shapes.append((f"{prefix}.bn_bias", (fan_out,)))
    return shapes


def part_layout(spec: ModelSpec, part: ModelPart) -> Layout:
    return Layout.from_shapes(part_shapes(spec, part))


def model_layout(spec: ModelSpec) -> Layout:
    return Layout.from_shapes([s for part in ModelPart for s in part_shapes(spec, part)])


def parameter_count(spec: ModelSpec) -> int:
    return model_layout(spec).total


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: Dict[str, torch.Tensor]
    running_stats: RunningStats = field(default_factory=dict)

    def part(self, part: ModelPart) -> ParamVector:
        return flatten(self, part)

    def equals(self, other: "ModelParams") -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit BN scale."""
    generator = torch.Generator().manual_seed(int(seed))
    tensors: Dict[str, torch.Tensor] = {}
    running: RunningStats = {}
    for part in ModelPart:
        for name, shape in part_shapes(spec, part):
            if name.endswith(".weight"):
                fan_out, fan_in = shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                tensors[name] = (torch.rand(shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound
            elif name.endswith(".bn_weight"):
                tensors[name] = torch.ones(shape, dtype=DTYPE)
                layer = name.rsplit(".", 1)[0]
                running[f"{layer}.running_mean"] = torch.zeros(shape, dtype=DTYPE)
                running[f"{layer}.running_var"] = torch.ones(shape, dtype=DTYPE)
            else:
                tensors[name] = torch.zeros(shape, dtype=DTYPE)
    return ModelParams(spec=spec, tensors=tensors, running_stats=running)


def flatten(p: ModelParams, part: Optional[ModelPart] = None) -> ParamVector:
    layout = model_layout(p.spec) if part is None else part_layout(p.spec, part)
    try:
        values = torch.cat([p.tensors[seg.name].reshape(-1) for seg in layout.segments])
    except KeyError as e:
        raise LayoutError(f"Missing parameter tensor {e}") from e
    return ParamVector(values.to(DTYPE).clone(), layout)


def unflatten(v: ParamVector, spec: ModelSpec, part: Optional[ModelPart] = None) -> ModelParams:
    expected = model_layout(spec) if part is None else part_layout(spec, part)
    if v.layout.total != expected.total:
        raise LayoutError(
            f"Vector length {v.layout.total} does not match model layout length {expected.total}"
        )
    if v.layout != expected:
        raise LayoutError("Vector layout does not match the model layout", details={"expected": expected.names})
    tensors = {seg.name: t.view(seg.shape).clone() for seg, t in v.items()}
    return ModelParams(spec=spec, tensors=tensors)


def _check_input(x: torch.Tensor, dim: int, what: str) -> None:
    if x.dim() < 1 or x.shape[-1] != dim:
        raise LayoutError(f"{what} last dimension must be {dim}, got shape {tuple(x.shape)}")


def _check_layout(params: ParamVector, spec: ModelSpec, part: ModelPart) -> None:
    if params.layout != part_layout(spec, part):
        raise LayoutError(f"Parameters do not have the {part.value} layout")


def _batch_norm(
    h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
    stats: Optional[RunningStats], layer: str, record: Optional[RunningStats],
) -> torch.Tensor:
    if stats is not None:
        mean = stats[f"{layer}.running_mean"]
        var = stats[f"{layer}.running_var"]
    else:
        mean = h.mean(dim=0)
        var = h.var(dim=0, unbiased=False)
        if record is not None:
            record[f"{layer}.running_mean"] = mean.detach().clone()
            record[f"{layer}.running_var"] = var.detach().clone()
    return (h - mean) / torch.sqrt(var + BN_EPS) * gamma + beta


def _mlp(
    params: ParamVector, spec: ModelSpec, part: ModelPart, h: torch.Tensor,
    stats: Optional[RunningStats] = None, record: Optional[RunningStats] = None,
) -> torch.Tensor:
    dims = layer_dims(spec, part)
    for i in range(len(dims)):
        layer = f"{part.value}.{i}"
        h = h @ params.segment(f"{layer}.weight").T + params.segment(f"{layer}.bias")
        if _normalized(spec, part, i, len(dims)):
            h = _batch_norm(
                h, params.segment(f"{layer}.bn_weight"), params.segment(f"{layer}.bn_bias"),
                stats, layer, record,
            )
        if i < len(dims) - 1:
            h = torch.relu(h)
    return h


def forward_backbone(
    theta: ParamVector, x: torch.Tensor, spec: ModelSpec, running_stats: Optional[RunningStats] = None
) -> torch.Tensor:
    """Features f_θ(x); the last backbone layer is linear."""
    _check_layout(theta, spec, ModelPart.BACKBONE)
    _check_input(x, spec.input_dim, "Input")
    return _mlp(theta, spec, ModelPart.BACKBONE, x, stats=running_stats)


def forward_head(
    phi: ParamVector, features: torch.Tensor, head: HeadKind, spec: ModelSpec,
    running_stats: Optional[RunningStats] = None,
) -> torch.Tensor:
    part = ModelPart.PRETEXT_HEAD if head is HeadKind.PRETEXT else ModelPart.DOWNSTREAM_HEAD
    _check_layout(phi, spec, part)
    _check_input(features, spec.feature_dim, "Features")
    return _mlp(phi, spec, part, features, stats=running_stats)


def estimate_running_stats(
    params: ParamVector, x: torch.Tensor, spec: ModelSpec, part: ModelPart = ModelPart.BACKBONE
) -> RunningStats:
    """Population mean/variance at every normalized layer, computed over all of `x`."""
    _check_layout(params, spec, part)
    record: RunningStats = {}
    if spec.norm is NormKind.NONE:
        return record
    with torch.no_grad():
        _mlp(params, spec, part, x, record=record)
    return record


def min_abs_preactivation(
    params: ParamVector, x: torch.Tensor, spec: ModelSpec, part: ModelPart = ModelPart.BACKBONE
) -> float:
    """Smallest |pre-activation| over the ReLU inputs of one part; used to keep FD checks off kinks."""
    dims = layer_dims(spec, part)
    smallest = math.inf
    h = x
    with torch.no_grad():
        for i in range(len(dims) - 1):
            layer = f"{part.value}.{i}"
            h = h @ params.segment(f"{layer}.weight").T + params.segment(f"{layer}.bias")
            if _normalized(spec, part, i, len(dims)):
                h = _batch_norm(
                    h, params.segment(f"{layer}.bn_weight"), params.segment(f"{layer}.bn_bias"), None, layer, None
                )
            smallest = min(smallest, float(h.abs().min()))
            h = torch.relu(h)
    return smallest
