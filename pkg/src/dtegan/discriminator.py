"""Dual-purpose discriminator: a shared downsampling trunk to 8x8 feeding an
adversarial branch (real/fake logit) and a contrastive branch (image features
matching the sentence embedding dimension). An optional conditional head
(for the matching-aware gradient penalty) fuses the replicated sentence
embedding into the adversarial branch at 4x4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils import spectral_norm

# trunk output-channel multipliers from the image inward (256 -> 8 uses all)
TRUNK_CHANNEL_MULTIPLIERS = (1, 2, 4, 4, 4)
BRANCH_MULTIPLIER = 8
LEAKY_SLOPE = 0.2


def _sn(module: nn.Module, enabled: bool) -> nn.Module:
    return spectral_norm(module) if enabled else module


def num_downblocks(resolution: int) -> int:
    if resolution < 16 or resolution % 8 != 0:
        raise ValueError(f"resolution must be a power-of-two multiple of 8 (>= 16), got {resolution}")
    n = int(math.log2(resolution / 8))
    if 8 * 2 ** n != resolution:
        raise ValueError(f"resolution must be a power-of-two multiple of 8 (>= 16), got {resolution}")
    return n


def trunk_out_channels(ch: int, resolution: int) -> list:
    """Per-block trunk output channels, growing from the image side."""
    n = num_downblocks(resolution)
    if n > len(TRUNK_CHANNEL_MULTIPLIERS):
        raise ValueError(f"resolution {resolution} exceeds the supported chain")
    return [m * ch for m in TRUNK_CHANNEL_MULTIPLIERS[:n]]


class DownBlock(nn.Module):
    """Residual stride-2 block: conv3x3 -> LeakyReLU -> conv3x3 -> 2x average
    pool, plus an average-pooled 1x1-conv skip. Internals follow the common
    hinge-GAN recipe and are deliberately simple; swap the module if another
    definition is needed."""

    def __init__(self, in_channels: int, out_channels: int, use_spectral_norm: bool = True):
        super().__init__()
        self.conv1 = _sn(nn.Conv2d(in_channels, out_channels, 3, padding=1), use_spectral_norm)
        self.conv2 = _sn(nn.Conv2d(out_channels, out_channels, 3, padding=1), use_spectral_norm)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        if in_channels != out_channels:
            self.skip = _sn(nn.Conv2d(in_channels, out_channels, 1), use_spectral_norm)
        else:
            self.skip = None

    def forward(self, x: Tensor) -> Tensor:
        h = F.avg_pool2d(self.conv2(self.act(self.conv1(x))), 2)
        s = F.avg_pool2d(x, 2)
        if self.skip is not None:
            s = self.skip(s)
        return h + s


class ResBlock(nn.Module):
    """Same-resolution residual block: conv3x3 -> LeakyReLU -> conv3x3 + identity."""

    def __init__(self, channels: int, use_spectral_norm: bool = True):
        super().__init__()
        self.conv1 = _sn(nn.Conv2d(channels, channels, 3, padding=1), use_spectral_norm)
        self.conv2 = _sn(nn.Conv2d(channels, channels, 3, padding=1), use_spectral_norm)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


@dataclass
class DiscriminatorOutput:
    logit: Tensor
    f_v: Tensor


class Discriminator(nn.Module):
    """Shared trunk to 8x8, then an adversarial branch and a contrastive
    branch (each: DownBlock -> ResBlock -> linear).

    With ``conditional=True`` the adversarial branch consumes the sentence
    embedding: it is replicated over the 4x4 grid after the branch DownBlock,
    concatenated with the image features, and fused by a 3x3 conv (one-way
    conditional output). The contrastive branch is unchanged.
    """

    def __init__(self, resolution: int, ch: int, d_s: int, conditional: bool = False,
                 use_spectral_norm: bool = True):
        super().__init__()
        self.resolution = resolution
        self.ch = ch
        self.d_s = d_s
        self.conditional = conditional
        chans = trunk_out_channels(ch, resolution)
        trunk = []
        in_ch = 3
        for out_ch in chans:
            trunk.append(DownBlock(in_ch, out_ch, use_spectral_norm))
            in_ch = out_ch
        self.trunk_blocks = nn.Sequential(*trunk)
        self.trunk_out_channels = in_ch
        branch_ch = BRANCH_MULTIPLIER * ch

        self.adv_down = DownBlock(in_ch, branch_ch, use_spectral_norm)
        if conditional:
            self.cond_fuse = _sn(nn.Conv2d(branch_ch + d_s, branch_ch, 3, padding=1),
                                 use_spectral_norm)
        self.adv_res = ResBlock(branch_ch, use_spectral_norm)
        self.adv_fc = _sn(nn.Linear(branch_ch * 4 * 4, 1), use_spectral_norm)

        self.cont_down = DownBlock(in_ch, branch_ch, use_spectral_norm)
        self.cont_res = ResBlock(branch_ch, use_spectral_norm)
        self.cont_fc = _sn(nn.Linear(branch_ch * 4 * 4, d_s), use_spectral_norm)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def trunk(self, images: Tensor) -> Tensor:
        """Downsample to the shared (C, 8, 8) feature map."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError("expected (N, 3, H, W) images")
        if images.shape[2] != self.resolution or images.shape[3] != self.resolution:
            raise ValueError(f"expected {self.resolution}x{self.resolution} images, "
                             f"got {images.shape[2]}x{images.shape[3]}")
        return self.trunk_blocks(images)

    def _adversarial_branch(self, t: Tensor, s_d: Tensor) -> Tensor:
        a = self.adv_down(t)
        if self.conditional:
            s_map = s_d.unsqueeze(-1).unsqueeze(-1).expand(-1, -1, a.shape[2], a.shape[3])
            a = self.act(self.cond_fuse(torch.cat([a, s_map], dim=1)))
        a = self.act(self.adv_res(a))
        return self.adv_fc(a.flatten(1)).squeeze(-1)

    def _contrastive_branch(self, t: Tensor) -> Tensor:
        c = self.act(self.cont_res(self.cont_down(t)))
        return self.cont_fc(c.flatten(1))

    def features(self, images: Tensor) -> Tensor:
        """Contrastive-branch image features; never touches the conditional head."""
        return self._contrastive_branch(self.trunk(images))

    def forward(self, images: Tensor, s_d: Tensor = None) -> DiscriminatorOutput:
        if self.conditional and s_d is None:
            raise ValueError("conditional discriminator requires the sentence embedding")
        if not self.conditional and s_d is not None:
            raise ValueError("unconditional discriminator does not accept a sentence embedding")
        t = self.trunk(images)
        logit = self._adversarial_branch(t, s_d)
        f_v = self._contrastive_branch(t)
        return DiscriminatorOutput(logit=logit, f_v=f_v)
