import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import math

import pytest
import torch

from app.autodiff.tensor_ops import DTYPE, Layout, ParamVector
from app.core.errors import LayoutError
from app.core.models import HeadKind, ModelPart, ModelSpec, NormKind
from app.networks.mlp import (
    estimate_running_stats,
    flatten,
    forward_backbone,
    forward_head,
    init_model,
    layer_dims,
    min_abs_preactivation,
    model_layout,
    parameter_count,
    part_layout,
    part_shapes,
    unflatten,
)

SPEC = ModelSpec(input_dim=5, backbone_widths=[7, 6], feature_dim=4, pretext_widths=[4, 3], num_classes=3)


def test_init_is_deterministic():
    """Same (spec, seed) gives bit-identical parameters"""
    assert init_model(SPEC, 11).equals(init_model(SPEC, 11))


def test_glorot_bound():
    """A 4→2 layer has every |w| ≤ sqrt(6/6) = 1"""
    spec = ModelSpec(input_dim=4, backbone_widths=[], feature_dim=2, pretext_widths=[2], num_classes=2)
    w = init_model(spec, 0).tensors["backbone.0.weight"]
    assert w.shape == (2, 4)
    assert float(w.abs().max()) <= 1.0


def test_seeds_give_different_weights():
    a, b = init_model(SPEC, 1), init_model(SPEC, 2)
    weights = [name for name in a.tensors if name.endswith(".weight")]
    differ = sum(int((a.tensors[n] != b.tensors[n]).sum()) for n in weights)
    total = sum(a.tensors[n].numel() for n in weights)
    assert differ / total >= 0.99


def test_biases_start_at_zero():
    params = init_model(SPEC, 0)
    for name, t in params.tensors.items():
        if name.endswith(".bias"):
            assert torch.equal(t, torch.zeros_like(t))


def test_zero_parameters_give_zero_features():
    theta = ParamVector.zeros(part_layout(SPEC, ModelPart.BACKBONE))
    out = forward_backbone(theta, torch.randn((8, 5), dtype=DTYPE), SPEC)
    assert torch.equal(out, torch.zeros((8, 4), dtype=DTYPE))


def test_identity_layer_passes_input_through():
    spec = ModelSpec(input_dim=3, backbone_widths=[], feature_dim=3, pretext_widths=[2], num_classes=2)
    layout = part_layout(spec, ModelPart.BACKBONE)
    theta = ParamVector(torch.cat([torch.eye(3, dtype=DTYPE).reshape(-1), torch.zeros(3, dtype=DTYPE)]), layout)
    x = torch.randn((4, 3), dtype=DTYPE)
    assert torch.equal(forward_backbone(theta, x, spec), x)


def test_output_shapes():
    params = init_model(SPEC, 3)
    x = torch.randn((9, 5), dtype=DTYPE)
    features = forward_backbone(flatten(params, ModelPart.BACKBONE), x, SPEC)
    assert features.shape == (9, SPEC.feature_dim)
    z = forward_head(flatten(params, ModelPart.PRETEXT_HEAD), features, HeadKind.PRETEXT, SPEC)
    assert z.shape == (9, SPEC.projection_dim)
    logits = forward_head(flatten(params, ModelPart.DOWNSTREAM_HEAD), features, HeadKind.DOWNSTREAM, SPEC)
    assert logits.shape == (9, SPEC.num_classes)


def test_flatten_round_trip_is_bitwise():
    params = init_model(SPEC, 5)
    v = flatten(params)
    assert flatten(unflatten(v, SPEC)).bitwise_equal(v)
    head = flatten(params, ModelPart.DOWNSTREAM_HEAD)
    assert flatten(unflatten(head, SPEC, ModelPart.DOWNSTREAM_HEAD), ModelPart.DOWNSTREAM_HEAD).bitwise_equal(head)


def test_layout_length_matches_parameter_formula():
    expected = 0
    for part in ModelPart:
        expected += sum(fan_in * fan_out + fan_out for fan_in, fan_out in layer_dims(SPEC, part))
    assert model_layout(SPEC).total == expected == parameter_count(SPEC)


def test_permuted_layout_is_rejected():
    shapes = part_shapes(SPEC, ModelPart.BACKBONE)
    permuted = Layout.from_shapes(list(reversed(shapes)))
    v = ParamVector.zeros(permuted)
    with pytest.raises(LayoutError):
        unflatten(v, SPEC, ModelPart.BACKBONE)


def test_wrong_length_is_rejected():
    with pytest.raises(LayoutError):
        unflatten(ParamVector.single(torch.zeros(3)), SPEC, ModelPart.BACKBONE)


def test_wrong_input_width_is_rejected():
    theta = flatten(init_model(SPEC, 0), ModelPart.BACKBONE)
    with pytest.raises(LayoutError):
        forward_backbone(theta, torch.zeros((2, 4), dtype=DTYPE), SPEC)


def test_batchnorm_segments_and_running_stats():
    """Running statistics estimated on x reproduce the batch-statistics forward pass on x"""
    spec = SPEC.model_copy(update={"norm": NormKind.BATCHNORM})
    names = part_layout(spec, ModelPart.BACKBONE).names
    assert "backbone.0.bn_weight" in names and "backbone.1.bn_bias" in names
    assert "backbone.2.bn_weight" not in names
    assert all("bn_" not in n for n in part_layout(spec, ModelPart.DOWNSTREAM_HEAD).names)

    theta = flatten(init_model(spec, 0), ModelPart.BACKBONE)
    x = torch.randn((32, 5), generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    stats = estimate_running_stats(theta, x, spec)
    assert set(stats) == {
        "backbone.0.running_mean", "backbone.0.running_var", "backbone.1.running_mean", "backbone.1.running_var",
    }
    train_mode = forward_backbone(theta, x, spec)
    eval_mode = forward_backbone(theta, x, spec, stats)
    assert torch.allclose(train_mode, eval_mode, atol=1e-12)


def test_running_stats_empty_without_norm():
    theta = flatten(init_model(SPEC, 0), ModelPart.BACKBONE)
    assert estimate_running_stats(theta, torch.zeros((4, 5), dtype=DTYPE), SPEC) == {}


def test_min_abs_preactivation():
    theta = flatten(init_model(SPEC, 0), ModelPart.BACKBONE)
    x = torch.randn((6, 5), dtype=DTYPE)
    margin = min_abs_preactivation(theta, x, SPEC)
    assert 0 <= margin < math.inf
    # no hidden layers means no ReLU inputs
    linear = ModelSpec(input_dim=5, backbone_widths=[], feature_dim=4, pretext_widths=[3], num_classes=3)
    theta_linear = flatten(init_model(linear, 0), ModelPart.BACKBONE)
    assert min_abs_preactivation(theta_linear, x, linear) == math.inf
