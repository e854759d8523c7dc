"""Generator and the two discriminators.

The generator is a 3D U-Net-like encoder/decoder over the 64-cube
conditioned input, emitting only the 32-cube nodule (the decoder stops
one upsampling stage short of the input resolution). The context
discriminator scores whole 64-cube composites on a patch grid; the
nodule critic scores 32-cube nodules concatenated with their tiled
conditions and carries no batch normalization, as the gradient penalty
requires.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .conditioning import CHANNEL_ORDER, ConditionedInput
from .errors import InvalidArgumentError
from .volume import NODULE_SIDE, VOI_SIDE

IN_CHANNELS = len(CHANNEL_ORDER)  # noise-boxed VOI + 6 condition tiles


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 32
    dropout: float = 0.5
    leaky_slope: float = 0.2
    intensity_range: tuple[float, float] = (-1.0, 1.0)


@dataclass(frozen=True)
class ContextDiscriminatorSpec:
    base_channels: int = 32
    leaky_slope: float = 0.2


@dataclass(frozen=True)
class NoduleCriticSpec:
    base_channels: int = 32
    leaky_slope: float = 0.2


def _enc(in_ch: int, out_ch: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=4, stride=2, padding=1),
        nn.BatchNorm3d(out_ch),
        nn.LeakyReLU(slope, inplace=True),
    )


def _dec(in_ch: int, out_ch: int, stride: int, dropout: float) -> nn.Sequential:
    kernel = 4 if stride == 2 else 3
    layers: list[nn.Module] = [
        nn.ConvTranspose3d(in_ch, out_ch, kernel_size=kernel, stride=stride, padding=1),
        nn.BatchNorm3d(out_ch),
        nn.ReLU(inplace=True),
    ]
    if dropout > 0:
        layers.append(nn.Dropout3d(dropout))
    return nn.Sequential(*layers)


class NoduleGenerator(nn.Module):
    """64^3 x 7 conditioned input -> 32^3 x 1 nodule in the intensity range."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        b = spec.base_channels
        self.enc1 = _enc(IN_CHANNELS, b, spec.leaky_slope)        # 64 -> 32
        self.enc2 = _enc(b, b * 2, spec.leaky_slope)              # 32 -> 16
        self.enc3 = _enc(b * 2, b * 4, spec.leaky_slope)          # 16 -> 8
        self.enc4 = _enc(b * 4, b * 8, spec.leaky_slope)          # 8 -> 4 (bottleneck)
        self.dec1 = _dec(b * 8, b * 4, 2, spec.dropout)           # 4 -> 8, skip enc3
        self.dec2 = _dec(b * 8, b * 2, 2, spec.dropout)           # 8 -> 16, skip enc2
        self.dec3 = _dec(b * 4, b, 2, 0.0)                        # 16 -> 32, skip enc1
        self.dec4 = _dec(b * 2, b, 1, 0.0)                        # stays 32: no final upsample
        self.head = nn.Conv3d(b, 1, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != IN_CHANNELS or x.shape[2:] != (VOI_SIDE,) * 3:
            raise InvalidArgumentError(
                f"generator expects (B, {IN_CHANNELS}, 64, 64, 64), got {tuple(x.shape)}")
        h1 = self.enc1(x)
        h2 = self.enc2(h1)
        h3 = self.enc3(h2)
        h4 = self.enc4(h3)
        y = self.dec1(h4)
        y = self.dec2(torch.cat([y, h3], dim=1))
        y = self.dec3(torch.cat([y, h2], dim=1))
        y = self.dec4(torch.cat([y, h1], dim=1))
        lo, hi = self.spec.intensity_range
        mid, half = (hi + lo) / 2.0, (hi - lo) / 2.0
        return mid + half * torch.tanh(self.head(y))


class ContextDiscriminator(nn.Module):
    """Real-vs-synthetic scores on a patch grid over 64^3 composites."""

    def __init__(self, spec: ContextDiscriminatorSpec = ContextDiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        b = spec.base_channels
        self.net = nn.Sequential(
            nn.Conv3d(1, b, 4, 2, 1), nn.LeakyReLU(spec.leaky_slope, inplace=True),
            _enc(b, b * 2, spec.leaky_slope),
            _enc(b * 2, b * 4, spec.leaky_slope),
            _enc(b * 4, b * 8, spec.leaky_slope),
            nn.Conv3d(b * 8, 1, kernel_size=3, padding=1),  # 4^3 patch grid
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != 1 or x.shape[2:] != (VOI_SIDE,) * 3:
            raise InvalidArgumentError(
                f"context discriminator expects (B, 1, 64, 64, 64), got {tuple(x.shape)}")
        return self.net(x)


class NoduleCritic(nn.Module):
    """Unbounded scalar critic over 32^3 nodules + tiled conditions; no batchnorm."""

    def __init__(self, spec: NoduleCriticSpec = NoduleCriticSpec()):
        super().__init__()
        self.spec = spec
        b = spec.base_channels
        self.net = nn.Sequential(
            nn.Conv3d(IN_CHANNELS, b, 4, 2, 1), nn.LeakyReLU(spec.leaky_slope, inplace=True),
            nn.Conv3d(b, b * 2, 4, 2, 1), nn.LeakyReLU(spec.leaky_slope, inplace=True),
            nn.Conv3d(b * 2, b * 4, 4, 2, 1), nn.LeakyReLU(spec.leaky_slope, inplace=True),
            nn.Conv3d(b * 4, b * 8, 4, 2, 1), nn.LeakyReLU(spec.leaky_slope, inplace=True),
        )
        self.fc = nn.Linear(b * 8 * 2 * 2 * 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != IN_CHANNELS or x.shape[2:] != (NODULE_SIDE,) * 3:
            raise InvalidArgumentError(
                f"nodule critic expects (B, {IN_CHANNELS}, 32, 32, 32), got {tuple(x.shape)}")
        return self.fc(self.net(x).flatten(1)).squeeze(-1)


def init_gan_weights(module: nn.Module) -> None:
    """Normal(0, 0.02) conv init, the usual GAN starting point."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


def composite(voi_data: np.ndarray, nodule: np.ndarray) -> np.ndarray:
    """Paste a 32-cube nodule into the center of a 64-cube VOI (copy)."""
    voi_data = np.asarray(voi_data, dtype=np.float32)
    nodule = np.asarray(nodule, dtype=np.float32)
    if voi_data.shape != (VOI_SIDE,) * 3:
        raise InvalidArgumentError(f"VOI data must be 64^3, got {voi_data.shape}")
    if nodule.shape != (NODULE_SIDE,) * 3:
        raise InvalidArgumentError(f"nodule must be 32^3, got {nodule.shape}")
    out = voi_data.copy()
    lo = (VOI_SIDE - NODULE_SIDE) // 2
    out[lo:lo + NODULE_SIDE, lo:lo + NODULE_SIDE, lo:lo + NODULE_SIDE] = nodule
    return out


def composite_batch(voi: torch.Tensor, nodule: torch.Tensor) -> torch.Tensor:
    """Differentiable composite for training batches (B, 1, 64^3) x (B, 1, 32^3)."""
    lo = (VOI_SIDE - NODULE_SIDE) // 2
    out = voi.clone()
    out[:, :, lo:lo + NODULE_SIDE, lo:lo + NODULE_SIDE, lo:lo + NODULE_SIDE] = nodule
    return out


def generator_forward(model: NoduleGenerator, x: ConditionedInput) -> np.ndarray:
    """Run one conditioned input through the generator in inference mode."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            # copy: the ConditionedInput tensor is frozen, torch wants writable
            tensor = torch.from_numpy(np.array(x.tensor)).permute(3, 0, 1, 2)[None]
            out = model(tensor)
    finally:
        model.train(was_training)
    return out[0, 0].numpy().astype(np.float32)
