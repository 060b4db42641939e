"""Network architectures: resnet-style generator, patch discriminator, and the
regression backbone.

All nets take and produce NCHW tensors with pixel values in [-1, 1].
"""

from __future__ import annotations

import torch
import torch.nn as nn


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Zero-mean Gaussian init for conv and linear layers."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def default_n_blocks(resolution: tuple[int, int]) -> int:
    """9 residual blocks at 256x256 and above, 6 below."""
    return 9 if min(resolution) >= 256 else 6


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Encoder / residual stack / decoder translator with tanh output.

    Two stride-2 downsampling convolutions, ``n_blocks`` residual blocks, two
    fractionally-strided (transposed) upsampling convolutions. Output shape
    equals input shape; inputs must have sides divisible by 4.
    """

    def __init__(
        self,
        channels: int = 1,
        base: int = 64,
        n_blocks: int = 6,
        stem_kernel: int = 7,
        global_skip: bool = False,
    ):
        super().__init__()
        if stem_kernel % 2 != 1:
            raise ValueError("stem_kernel must be odd")
        self.channels = channels
        # optional scalar-weighted input highway: pre-tanh output becomes
        # net(x) + a*x with learnable a (init 0), which accelerates learning
        # of near-(anti)identity intensity maps on small budgets
        self.global_skip = global_skip
        pad = stem_kernel // 2
        layers: list[nn.Module] = [
            nn.Conv2d(channels, base, stem_kernel, padding=pad, padding_mode="reflect"),
            nn.InstanceNorm2d(base),
            nn.ReLU(inplace=True),
        ]
        width = base
        for _ in range(2):
            layers += [
                nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(width * 2),
                nn.ReLU(inplace=True),
            ]
            width *= 2
        layers += [ResidualBlock(width) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(width, width // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(width // 2),
                nn.ReLU(inplace=True),
            ]
            width //= 2
        layers += [nn.Conv2d(width, channels, stem_kernel, padding=pad, padding_mode="reflect")]
        self.layers = nn.Sequential(*layers)
        self.skip_gain = nn.Parameter(torch.zeros(1)) if global_skip else None
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pre = self.layers(x)
        if self.skip_gain is not None:
            pre = pre + self.skip_gain * x
        return torch.tanh(pre)


class IdentityGenerator(nn.Module):
    """Debug translator: tanh of the input, no parameters.

    Useful as a known-answer oracle for translation plumbing (the output is
    exactly ``tanh(x)``).
    """

    def __init__(self, channels: int = 1):
        super().__init__()
        self.channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(x)


class PatchDiscriminator(nn.Module):
    """Patch discriminator emitting a grid of raw realness scores.

    ``n_layers=3`` gives the classic 70x70 receptive field; smaller values are
    for toy resolutions. No final sigmoid: scores feed a least-squares loss.
    """

    def __init__(self, channels: int = 1, base: int = 64, n_layers: int = 3):
        super().__init__()
        self.channels = channels
        layers: list[nn.Module] = [
            nn.Conv2d(channels, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        width = base
        for _ in range(n_layers - 1):
            layers += [
                nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(width * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            width *= 2
        layers += [
            nn.Conv2d(width, width * 2, 4, stride=1, padding=1),
            nn.InstanceNorm2d(width * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width * 2, 1, 4, stride=1, padding=1),
        ]
        self.layers = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class PlainBlock(nn.Module):
    """Residual conv block without normalization (keeps absolute intensities)."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1:
            # pooled projection instead of a strided 1x1 conv (same role,
            # and strided 1x1 convolutions hit a oneDNN backward crash on
            # some CPU builds)
            self.skip: nn.Module = nn.Sequential(nn.AvgPool2d(stride), nn.Conv2d(c_in, c_out, 1))
        elif c_in != c_out:
            self.skip = nn.Conv2d(c_in, c_out, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.conv1(x))
        out = self.conv2(out)
        return self.relu(out + self.skip(x))


class RegressionNet(nn.Module):
    """Small residual backbone with a single-scalar regression head.

    The head is an unbounded linear layer on globally pooled features, so
    predictions live in natural label units (years).
    """

    def __init__(self, channels: int = 1, base: int = 12, n_blocks: int = 4, width_cap: int = 48):
        super().__init__()
        self.channels = channels
        self.stem = nn.Sequential(nn.Conv2d(channels, base, 3, padding=1), nn.ReLU(inplace=True))
        blocks = []
        width = base
        for _ in range(n_blocks):
            nxt = min(width * 2, width_cap)
            blocks.append(PlainBlock(width, nxt, stride=2))
            width = nxt
        self.blocks = nn.Sequential(*blocks)
        self.feature_dim = width
        self.head = nn.Linear(width, 1)
        init_weights(self)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.stem(x))
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)


class Resnet50Regressor(nn.Module):
    """Full-scale preset: 50-layer residual backbone with a scalar head."""

    def __init__(self, channels: int = 1, pretrained: bool = False):
        super().__init__()
        from torchvision.models import resnet50

        weights = "DEFAULT" if pretrained else None
        net = resnet50(weights=weights)
        if channels != 3:
            net.conv1 = nn.Conv2d(channels, 64, 7, stride=2, padding=3, bias=False)
        self.feature_dim = net.fc.in_features
        net.fc = nn.Identity()
        self.backbone = net
        self.head = nn.Linear(self.feature_dim, 1)
        self.channels = channels

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)


def build_predictor(arch: str, channels: int, base: int = 12, n_blocks: int = 4) -> nn.Module:
    if arch == "small":
        return RegressionNet(channels=channels, base=base, n_blocks=n_blocks)
    if arch == "resnet50":
        return Resnet50Regressor(channels=channels)
    raise ValueError(f"unknown predictor architecture {arch!r}")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
