"""Single-stage conditional image generator.

Pipeline: concatenated sentence embeddings -> conditioning augmentation ->
stem linear to an 8ch x 4 x 4 map -> a chain of CBN-modulated residual
upsampling blocks with learned noise injection -> self-modulated convolution
-> 1x1 convolution -> tanh. Spectral normalization wraps every conv/linear
weight unless disabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils import spectral_norm

# output-channel multipliers for the full six-block chain (4x4 -> 256x256);
# smaller resolutions keep the tail of the list, the stem is always 8*ch
CHANNEL_MULTIPLIERS = (8, 8, 4, 2, 2, 1)

LEAKY_SLOPE = 0.2
SIGMA_FLOOR = 1e-8
BN_MOMENTUM = 0.1


def _sn(module: nn.Module, enabled: bool) -> nn.Module:
    return spectral_norm(module) if enabled else module


def num_upblocks(resolution: int) -> int:
    """Number of 2x upsampling blocks from the 4x4 stem to ``resolution``."""
    if resolution < 8 or resolution % 4 != 0:
        raise ValueError(f"resolution must be a power-of-two multiple of 4, got {resolution}")
    n = int(math.log2(resolution / 4))
    if 4 * 2 ** n != resolution:
        raise ValueError(f"resolution must be a power-of-two multiple of 4, got {resolution}")
    return n


def upblock_out_channels(ch: int, resolution: int) -> list:
    """Per-block output channels; the tail of the full schedule."""
    n = num_upblocks(resolution)
    if n > len(CHANNEL_MULTIPLIERS):
        raise ValueError(f"resolution {resolution} exceeds the supported chain")
    return [m * ch for m in CHANNEL_MULTIPLIERS[-n:]]


@dataclass
class ConditionVector:
    """Sampled condition with its Gaussian parameters and per-sample KL to N(0, I)."""

    c_t: Tensor
    mu: Tensor
    sigma: Tensor
    kl: Tensor


class ConditionAugmentation(nn.Module):
    """Sample the condition from a learned diagonal Gaussian around the
    combined sentence embedding (reparameterized), with closed-form KL."""

    def __init__(self, input_dim: int, cond_dim: int, use_spectral_norm: bool = True):
        super().__init__()
        self.input_dim = input_dim
        self.cond_dim = cond_dim
        self.pre = _sn(nn.Linear(input_dim, input_dim), use_spectral_norm)
        self.head = _sn(nn.Linear(input_dim, 2 * cond_dim), use_spectral_norm)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, s_t: Tensor, eps: Tensor = None, rng: torch.Generator = None) -> ConditionVector:
        """eps is the externally injectable standard-normal draw; without eps
        or rng the condition is the Gaussian mean (deterministic)."""
        h = self.act(self.pre(s_t))
        stats = self.head(h)
        mu, logvar = stats.chunk(2, dim=-1)
        if not bool(torch.isfinite(stats).all()):
            raise ValueError("non-finite conditioning statistics")
        sigma = torch.exp(0.5 * logvar)
        if eps is None:
            if rng is None:
                eps = torch.zeros_like(mu)
            else:
                eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
        c_t = mu + sigma * eps
        # KL(N(mu, sigma^2) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - log sigma^2 - 1)
        kl = 0.5 * (mu.pow(2) + sigma.pow(2) - logvar - 1.0).sum(dim=-1)
        if not bool(torch.isfinite(c_t).all()):
            raise ValueError("non-finite condition sample")
        return ConditionVector(c_t=c_t, mu=mu, sigma=sigma, kl=kl)


class ConditionalBatchNorm2d(nn.Module):
    """Batch normalization whose scale/shift offsets are linear in the
    generator input vector: (gamma + FC_gamma(f)) * x_hat + (beta + FC_beta(f)).

    Training mode normalizes with batch statistics and updates running
    statistics (momentum 0.1); eval mode uses the running statistics. The
    per-channel std is clamped at 1e-8, never dividing by zero.
    """

    def __init__(self, num_features: int, cond_dim: int, use_spectral_norm: bool = True,
                 momentum: float = BN_MOMENTUM):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.gamma = nn.Parameter(torch.ones(num_features))
        self.beta = nn.Parameter(torch.zeros(num_features))
        self.fc_gamma = _sn(nn.Linear(cond_dim, num_features), use_spectral_norm)
        self.fc_beta = _sn(nn.Linear(cond_dim, num_features), use_spectral_norm)
        for fc in (self.fc_gamma, self.fc_beta):
            nn.init.normal_(_weight_of(fc), std=0.02)
            nn.init.zeros_(fc.bias)
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: Tensor, f_g: Tensor) -> Tensor:
        if x.dim() != 4:
            raise ValueError("expected (N, C, H, W) input")
        if self.training:
            if x.numel() // x.shape[1] < 2:
                raise ValueError("batch statistics need at least 2 values per channel")
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                n = x.numel() / x.shape[1]
                unbiased = var.detach() * n / max(n - 1, 1)
                self.running_mean.mul_(1 - self.momentum).add_(mean.detach(), alpha=self.momentum)
                self.running_var.mul_(1 - self.momentum).add_(unbiased, alpha=self.momentum)
        else:
            mean, var = self.running_mean, self.running_var
        sigma = torch.sqrt(var.clamp_min(SIGMA_FLOOR ** 2))
        x_hat = (x - mean.view(1, -1, 1, 1)) / sigma.view(1, -1, 1, 1)
        gamma_c = self.fc_gamma(f_g).unsqueeze(-1).unsqueeze(-1)
        beta_c = self.fc_beta(f_g).unsqueeze(-1).unsqueeze(-1)
        gamma = self.gamma.view(1, -1, 1, 1) + gamma_c
        beta = self.beta.view(1, -1, 1, 1) + beta_c
        return gamma * x_hat + beta


class NoiseInjection(nn.Module):
    """Adds single-channel noise scaled per channel; scales start at zero so
    the injection is initially inert."""

    def __init__(self, num_features: int):
        super().__init__()
        self.scale = nn.Parameter(torch.zeros(num_features))

    def forward(self, x: Tensor, noise: Tensor = None, rng: torch.Generator = None) -> Tensor:
        if noise is None:
            if rng is None:
                return x
            noise = torch.randn((x.shape[0], 1, x.shape[2], x.shape[3]),
                                generator=rng, dtype=x.dtype, device=x.device)
        return x + self.scale.view(1, -1, 1, 1) * noise


class UpBlock(nn.Module):
    """Residual 2x upsampling block: bilinear upsample, then two units of
    [noise -> conv3x3 -> CBN -> LeakyReLU], plus the upsampled skip (1x1 conv
    when channel counts differ)."""

    def __init__(self, in_channels: int, out_channels: int, cond_dim: int,
                 use_spectral_norm: bool = True):
        super().__init__()
        self.noise1 = NoiseInjection(in_channels)
        self.conv1 = _sn(nn.Conv2d(in_channels, out_channels, 3, padding=1), use_spectral_norm)
        self.cbn1 = ConditionalBatchNorm2d(out_channels, cond_dim, use_spectral_norm)
        self.noise2 = NoiseInjection(out_channels)
        self.conv2 = _sn(nn.Conv2d(out_channels, out_channels, 3, padding=1), use_spectral_norm)
        self.cbn2 = ConditionalBatchNorm2d(out_channels, cond_dim, use_spectral_norm)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        if in_channels != out_channels:
            self.skip = _sn(nn.Conv2d(in_channels, out_channels, 1), use_spectral_norm)
        else:
            self.skip = None

    def forward(self, x: Tensor, f_g: Tensor, noises=None, rng: torch.Generator = None) -> Tensor:
        up = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        n1, n2 = noises if noises is not None else (None, None)
        h = self.act(self.cbn1(self.conv1(self.noise1(up, n1, rng)), f_g))
        h = self.act(self.cbn2(self.conv2(self.noise2(h, n2, rng)), f_g))
        return h + (self.skip(up) if self.skip is not None else up)


class SelfModulationConv(nn.Module):
    """Full-resolution conv + CBN(f_G) + LeakyReLU unit ahead of the 1x1 output."""

    def __init__(self, channels: int, cond_dim: int, use_spectral_norm: bool = True):
        super().__init__()
        self.conv = _sn(nn.Conv2d(channels, channels, 3, padding=1), use_spectral_norm)
        self.cbn = ConditionalBatchNorm2d(channels, cond_dim, use_spectral_norm)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x: Tensor, f_g: Tensor) -> Tensor:
        return self.act(self.cbn(self.conv(x), f_g))


class Generator(nn.Module):
    """Conditional generator emitting tanh images in [-1, 1].

    ``cond_input_dim`` is the width of the combined sentence input (2*d_s when
    both embeddings are concatenated, d_s when only one side conditions the
    generator).
    """

    def __init__(self, resolution: int, ch: int, d_z: int, cond_input_dim: int,
                 d_c: int, use_spectral_norm: bool = True):
        super().__init__()
        self.resolution = resolution
        self.ch = ch
        self.d_z = d_z
        self.d_c = d_c
        self.stem_channels = 8 * ch
        self.block_channels = upblock_out_channels(ch, resolution)
        self.ca = ConditionAugmentation(cond_input_dim, d_c, use_spectral_norm)
        f_dim = d_c + d_z
        self.stem = _sn(nn.Linear(f_dim, self.stem_channels * 4 * 4), use_spectral_norm)
        blocks = []
        in_ch = self.stem_channels
        for out_ch in self.block_channels:
            blocks.append(UpBlock(in_ch, out_ch, f_dim, use_spectral_norm))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.self_mod = SelfModulationConv(in_ch, f_dim, use_spectral_norm)
        self.to_rgb = _sn(nn.Conv2d(in_ch, 3, 1), use_spectral_norm)

    def forward(self, z: Tensor, s_primary: Tensor, s_secondary: Tensor = None,
                eps: Tensor = None, noises=None, rng: torch.Generator = None):
        """Returns (images (N, 3, H, W) in [-1, 1], ConditionVector).

        Stochastic draws (CA eps, injected noise) come from ``rng`` when
        given, from the explicit ``eps``/``noises`` arguments when supplied,
        and default to zero otherwise, so bare calls are deterministic.
        """
        if z.shape[-1] != self.d_z:
            raise ValueError(f"z has dim {z.shape[-1]}, expected {self.d_z}")
        s_t = s_primary if s_secondary is None else torch.cat([s_primary, s_secondary], dim=-1)
        cond = self.ca(s_t, eps=eps, rng=rng)
        f_g = torch.cat([cond.c_t, z], dim=-1)
        h = self.stem(f_g).view(z.shape[0], self.stem_channels, 4, 4)
        for i, block in enumerate(self.blocks):
            h = block(h, f_g, noises[i] if noises is not None else None, rng)
        h = self.self_mod(h, f_g)
        img = torch.tanh(self.to_rgb(h))
        return img, cond


def sample_noise(n: int, d_z: int, truncation_psi: float = None, seed: int = None,
                 rng: torch.Generator = None, dtype=torch.float32) -> Tensor:
    """Standard-normal latents; with ``truncation_psi`` set, components outside
    [-psi, psi] are resampled (eval-time truncation trick)."""
    if d_z < 1:
        raise ValueError("d_z must be >= 1")
    if truncation_psi is not None and truncation_psi <= 0:
        raise ValueError("truncation_psi must be positive")
    if rng is None:
        rng = torch.Generator()
        if seed is not None:
            rng.manual_seed(seed)
    z = torch.randn((n, d_z), generator=rng, dtype=dtype)
    if truncation_psi is not None:
        mask = z.abs() > truncation_psi
        while bool(mask.any()):
            z[mask] = torch.randn((int(mask.sum()),), generator=rng, dtype=dtype)
            mask = z.abs() > truncation_psi
    return z


def _weight_of(module: nn.Module) -> Tensor:
    """The trainable weight tensor, looking through a spectral-norm wrapper."""
    return module.weight_orig if hasattr(module, "weight_orig") else module.weight
