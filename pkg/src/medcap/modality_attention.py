"""Medical modality attention block.

The block re-weights a feature map with an intrinsic gate (spatial anatomy
gate times channel texture gate) and adds a multi-scale dilated response:

    out = x * (anatomy(x) * texture(x)) + multi_scale(x)
"""

import logging
from typing import Optional

import torch
from torch import nn

from medcap.config import AttentionConfig
from medcap.errors import ShapeError

logger = logging.getLogger(__name__)


def check_feature_map(x: torch.Tensor, channels: int) -> None:
    """Validate a B x C x H x W feature map against the configured width.

    Raises:
        ShapeError: If the tensor is not 4-D, has a zero dimension, or the wrong C
    """
    if x.dim() != 4:
        raise ShapeError(f"Expected a 4-D feature map, got shape {tuple(x.shape)}")
    if min(x.shape[1:]) <= 0:
        raise ShapeError(f"Feature map dimensions must be positive, got {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(f"Expected {channels} channels, got {x.shape[1]}")


def _init_conv(conv: nn.Conv2d) -> None:
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class AnatomyAttention(nn.Module):
    """Spatial-channel gate from a 7x7 convolution, batch norm, ReLU and sigmoid."""

    def __init__(self, channels: int, kernel_size: int = 7) -> None:
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(
            channels, channels, kernel_size=kernel_size, stride=1, padding=kernel_size // 2
        )
        self.bn = nn.BatchNorm2d(channels)
        self.relu = nn.ReLU()
        self.gate = nn.Sigmoid()
        _init_conv(self.conv)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_feature_map(x, self.channels)
        return self.gate(self.relu(self.bn(self.conv(x))))


class TextureAttention(nn.Module):
    """Channel gate: global pooling, 1x1 reduce, ReLU, 1x1 expand, sigmoid."""

    def __init__(self, channels: int, reduction_ratio: int = 16) -> None:
        super().__init__()
        self.channels = channels
        self.hidden = max(channels // reduction_ratio, 1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.reduce = nn.Conv2d(channels, self.hidden, kernel_size=1)
        self.relu = nn.ReLU()
        self.expand = nn.Conv2d(self.hidden, channels, kernel_size=1)
        self.gate = nn.Sigmoid()
        _init_conv(self.reduce)
        _init_conv(self.expand)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_feature_map(x, self.channels)
        return self.gate(self.expand(self.relu(self.reduce(self.pool(x)))))


class IntrinsicModalityAttention(nn.Module):
    """Product of the anatomy gate (B x C x H x W) and texture gate (B x C x 1 x 1)."""

    def __init__(self, channels: int, reduction_ratio: int = 16, anatomy_kernel: int = 7) -> None:
        super().__init__()
        self.anatomy = AnatomyAttention(channels, kernel_size=anatomy_kernel)
        self.texture = TextureAttention(channels, reduction_ratio=reduction_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.anatomy(x) * self.texture(x)


class MultiScaleExtraction(nn.Module):
    """Parallel dilated convolutions, concatenated and projected back to C channels."""

    def __init__(
        self, channels: int, dilation_rates: tuple[int, ...] = (1, 2, 4), kernel_size: int = 3
    ) -> None:
        super().__init__()
        self.channels = channels
        self.dilation_rates = tuple(dilation_rates)
        self.branches = nn.ModuleList(
            nn.Conv2d(
                channels,
                channels,
                kernel_size=kernel_size,
                dilation=d,
                padding=d * (kernel_size // 2),
            )
            for d in self.dilation_rates
        )
        self.adjust = nn.Conv2d(channels * len(self.dilation_rates), channels, kernel_size=1)
        for conv in self.branches:
            _init_conv(conv)
        _init_conv(self.adjust)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_feature_map(x, self.channels)
        return self.adjust(torch.cat([branch(x) for branch in self.branches], dim=1))


class MedicalModalityAttention(nn.Module):
    """Shape-preserving attention block for modality-revealing features.

    In training mode batch norm uses batch statistics and updates its running
    estimates, so a block must be owned by a single trainer while training.
    Inference mode is read-only over the weights.

    Example:
        >>> block = MedicalModalityAttention(8, AttentionConfig(reduction_ratio=4)).eval()
        >>> block(torch.rand(2, 8, 16, 16)).shape
        torch.Size([2, 8, 16, 16])
    """

    def __init__(self, channels: int, config: Optional[AttentionConfig] = None) -> None:
        super().__init__()
        if channels <= 0:
            raise ShapeError(f"channels must be positive, got {channels}")
        config = config or AttentionConfig()
        self.channels = channels
        self.config = config
        self.intrinsic = IntrinsicModalityAttention(
            channels,
            reduction_ratio=config.reduction_ratio,
            anatomy_kernel=config.anatomy_kernel,
        )
        self.multi_scale = MultiScaleExtraction(
            channels, dilation_rates=config.dilation_rates, kernel_size=config.scale_kernel
        )

    def anatomy_attention(self, x: torch.Tensor) -> torch.Tensor:
        return self.intrinsic.anatomy(x)

    def texture_attention(self, x: torch.Tensor) -> torch.Tensor:
        return self.intrinsic.texture(x)

    def intrinsic_attention(self, x: torch.Tensor) -> torch.Tensor:
        return self.intrinsic(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_feature_map(x, self.channels)
        return x * self.intrinsic(x) + self.multi_scale(x)
