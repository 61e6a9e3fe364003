"""Tests for the modality attention block."""

from typing import Callable

import numpy as np
import pytest
import torch

from medcap.config import AttentionConfig
from medcap.errors import ShapeError
from medcap.modality_attention import (
    AnatomyAttention,
    MedicalModalityAttention,
    MultiScaleExtraction,
    TextureAttention,
)


def test_forward_preserves_shape_and_gates_in_unit_interval() -> None:
    """Test 100 random shapes: output matches input, every gate lies in [0, 1]."""
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    blocks = {c: MedicalModalityAttention(c) for c in (4, 8, 16)}

    for trial in range(100):
        b = int(rng.integers(1, 5))
        c = int(rng.choice([4, 8, 16]))
        hw = int(rng.choice([8, 16, 32]))
        block = blocks[c].train(trial % 2 == 0)
        x = torch.randn(b, c, hw, hw)

        with torch.no_grad():
            out = block(x)
            gates = [
                block.anatomy_attention(x),
                block.texture_attention(x),
                block.intrinsic_attention(x),
            ]

        assert out.shape == x.shape
        for gate in gates:
            assert gate.min() >= 0.0
            assert gate.max() <= 1.0


def test_gate_shapes() -> None:
    """Test the anatomy gate is per-position and the texture gate per-channel."""
    block = MedicalModalityAttention(8, AttentionConfig(reduction_ratio=4)).eval()
    x = torch.randn(2, 8, 16, 16)

    assert block.anatomy_attention(x).shape == (2, 8, 16, 16)
    assert block.texture_attention(x).shape == (2, 8, 1, 1)
    assert block.intrinsic.texture.hidden == 2


def test_texture_hidden_width_never_zero() -> None:
    """Test reduction beyond the channel count keeps one hidden unit."""
    assert TextureAttention(4, reduction_ratio=16).hidden == 1


def test_multi_scale_branches_use_configured_dilations() -> None:
    """Test one 3x3 branch per dilation rate, padded to keep the size."""
    extraction = MultiScaleExtraction(4)

    assert [conv.dilation for conv in extraction.branches] == [(1, 1), (2, 2), (4, 4)]
    assert [conv.padding for conv in extraction.branches] == [(1, 1), (2, 2), (4, 4)]
    assert extraction.adjust.in_channels == 12


def test_forward_matches_composition() -> None:
    """Test forward equals x * anatomy * texture + multi_scale."""
    torch.manual_seed(1)
    block = MedicalModalityAttention(4).eval()
    x = torch.randn(2, 4, 8, 8)

    with torch.no_grad():
        expected = (
            x * block.anatomy_attention(x) * block.texture_attention(x) + block.multi_scale(x)
        )
        assert torch.allclose(block(x), expected, atol=1e-6)


def _zero_conv(conv: torch.nn.Conv2d) -> None:
    torch.nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        torch.nn.init.zeros_(conv.bias)


def _gated_block(channels: int, anatomy_open: bool) -> MedicalModalityAttention:
    """Block in inference mode with no multi-scale response and a saturated texture gate.

    The anatomy gate is 1 when ``anatomy_open`` and sigmoid(0) = 0.5 otherwise.
    """
    block = MedicalModalityAttention(channels).eval()
    with torch.no_grad():
        for conv in [*block.multi_scale.branches, block.multi_scale.adjust]:
            _zero_conv(conv)
        _zero_conv(block.intrinsic.anatomy.conv)
        _zero_conv(block.intrinsic.texture.expand)
        block.intrinsic.texture.expand.bias.fill_(1e4)
        if anatomy_open:
            block.intrinsic.anatomy.bn.bias.fill_(1e4)
    return block


def test_anatomy_gate_is_half_with_identity_batch_norm() -> None:
    """Test zero conv and fresh batch norm in inference mode give a 0.5 gate everywhere."""
    gate = AnatomyAttention(4).eval()
    _zero_conv(gate.conv)

    with torch.no_grad():
        out = gate(torch.randn(2, 4, 8, 8))

    assert torch.equal(out, torch.full_like(out, 0.5))


def test_multi_scale_with_zero_weights_is_zero() -> None:
    extraction = MultiScaleExtraction(4)
    for conv in [*extraction.branches, extraction.adjust]:
        _zero_conv(conv)

    with torch.no_grad():
        out = extraction(torch.randn(2, 4, 8, 8))

    assert torch.equal(out, torch.zeros_like(out))


def test_open_gates_without_multi_scale_return_input() -> None:
    x = torch.randn(2, 4, 8, 8)

    with torch.no_grad():
        assert torch.equal(_gated_block(4, anatomy_open=True)(x), x)
        assert torch.equal(_gated_block(4, anatomy_open=False)(x), 0.5 * x)


def test_inference_is_bit_identical_across_runs() -> None:
    torch.manual_seed(5)
    block = MedicalModalityAttention(8, AttentionConfig(reduction_ratio=4)).eval()
    x = torch.randn(3, 8, 16, 16)

    with torch.no_grad():
        first = block(x)
        second = block(x.clone())

    assert torch.equal(first, second)


def test_shape_errors() -> None:
    """Test wrong rank or channel count raises ShapeError."""
    block = MedicalModalityAttention(4)

    with pytest.raises(ShapeError):
        block(torch.randn(4, 8, 8))
    with pytest.raises(ShapeError):
        block(torch.randn(1, 8, 8, 8))
    with pytest.raises(ShapeError):
        AnatomyAttention(4)(torch.randn(1, 4, 0, 8))
    with pytest.raises(ShapeError):
        MedicalModalityAttention(0)


def _central_difference(
    loss_fn: Callable[[], torch.Tensor], tensor: torch.Tensor, index: tuple[int, ...], eps: float
) -> float:
    original = tensor[index].item()
    with torch.no_grad():
        tensor[index] = original + eps
        plus = loss_fn().item()
        tensor[index] = original - eps
        minus = loss_fn().item()
        tensor[index] = original
    return (plus - minus) / (2 * eps)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed: int) -> None:
    """Test analytic gradients for the input and every parameter group in float64."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    channels = int(rng.choice([4, 8]))
    size = int(rng.choice([6, 8]))
    block = MedicalModalityAttention(channels, AttentionConfig(reduction_ratio=2)).double().eval()
    x = torch.randn(2, channels, size, size, dtype=torch.float64, requires_grad=True)
    projection = torch.randn(2, channels, size, size, dtype=torch.float64)

    def loss_fn() -> torch.Tensor:
        return (block(x) * projection).sum()

    loss_fn().backward()

    groups = [("input", x)] + list(block.named_parameters())
    for name, tensor in groups:
        analytic = []
        numeric = []
        flat_count = tensor.numel()
        for flat in rng.choice(flat_count, size=min(20, flat_count), replace=False):
            index = tuple(int(i) for i in np.unravel_index(int(flat), tuple(tensor.shape)))
            analytic.append(tensor.grad[index].item())
            numeric.append(_central_difference(loss_fn, tensor.data, index, eps=1e-7))
        analytic_arr = np.array(analytic)
        numeric_arr = np.array(numeric)
        error = np.linalg.norm(analytic_arr - numeric_arr)
        # Absolute floor covers groups whose gradient is exactly zero (inactive ReLU units).
        assert error <= 1e-5 * np.linalg.norm(numeric_arr) + 1e-6, f"{name}: error {error:.2e}"
