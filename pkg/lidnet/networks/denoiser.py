"""
networks/denoiser.py — Denoising generator, WGAN critic and their losses.

The generator is a residual encoder-decoder: the network predicts a
correction that is added to the input, so a zeroed output layer is the
identity map. The same generator serves the single-CNN and GAN variants;
the GAN variant adds a critic trained with the gradient-penalty objective.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from lidnet.errors import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

VARIANTS = ("cnn", "gan")


class ResidualGenerator(nn.Module):
    """Encoder-decoder with conveying paths and a global residual connection."""

    def __init__(self, channels: int = 24, depth: int = 3, zero_init_residual: bool = True):
        super().__init__()
        self.depth = depth
        self.head = nn.Conv2d(1, channels, 3, padding=1)
        self.down = nn.ModuleList(nn.Conv2d(channels, channels, 3, stride=2, padding=1) for _ in range(depth))
        self.up = nn.ModuleList(nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1) for _ in range(depth))
        self.tail = nn.Conv2d(channels, 1, 3, padding=1)
        if zero_init_residual:
            nn.init.zeros_(self.tail.weight)
            nn.init.zeros_(self.tail.bias)

    def forward(self, x: Tensor) -> Tensor:
        factor = 2 ** self.depth
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ContractError(f"generator input sides must be multiples of {factor}, got {tuple(x.shape[-2:])}")
        h = F.relu(self.head(x))
        skips = [h]
        for conv in self.down:
            h = F.relu(conv(h))
            skips.append(h)
        skips.pop()
        for deconv in self.up:
            h = F.relu(deconv(h) + skips.pop())
        return x + self.tail(h)


class Discriminator(nn.Module):
    """Four strided convolutions to a scalar critic value; no normalisation layers."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, channels, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.score = nn.Linear(channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        return self.score(self.features(x).mean(dim=(2, 3))).squeeze(1)


@dataclass
class DenoiserParams:
    """Trainable denoising parameters Θ: the generator and, for GANs, the critic."""
    generator: ResidualGenerator
    variant: str = "cnn"
    discriminator: Optional[Discriminator] = None
    gp_weight: float = 10.0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "gan" and self.discriminator is None:
            raise ConfigurationError("gan variant requires a discriminator")
        if self.variant == "cnn" and self.discriminator is not None:
            raise ConfigurationError("cnn variant must not carry a discriminator")
        if self.gp_weight < 0:
            raise ConfigurationError("gradient-penalty weight must be >= 0")
        if sum(p.numel() for p in self.generator.parameters()) == 0:
            raise ConfigurationError("generator has no parameters")


def build_denoiser(
    variant: str = "cnn",
    generator_channels: int = 24,
    discriminator_channels: int = 32,
    gp_weight: float = 10.0,
) -> DenoiserParams:
    params = DenoiserParams(
        generator=ResidualGenerator(channels=generator_channels),
        variant=variant,
        discriminator=Discriminator(channels=discriminator_channels) if variant == "gan" else None,
        gp_weight=gp_weight,
    )
    params.validate()
    return params


def denoise(generator: nn.Module, x: Tensor) -> Tensor:
    """Map an LDCT batch (B, H, W) to its denoised estimate (B, H, W)."""
    if x.dim() != 3:
        raise ContractError(f"denoise expects a (batch, H, W) tensor, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ContractError("denoise input contains non-finite values")
    return generator(x.unsqueeze(1)).squeeze(1)


def reconstruction_loss(denoised: Tensor, target: Tensor, mode: str = "mae") -> Tensor:
    """Per-pixel mean absolute (mae) or squared (mse) error."""
    if denoised.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(denoised.shape)} vs {tuple(target.shape)}")
    if mode == "mae":
        return F.l1_loss(denoised, target)
    if mode == "mse":
        return F.mse_loss(denoised, target)
    raise ConfigurationError(f"reconstruction mode must be 'mae' or 'mse', got {mode!r}")


def generator_adversarial_loss(discriminator: Optional[nn.Module], denoised: Tensor) -> Tensor:
    """E[-D(G(x))] over the batch."""
    if discriminator is None:
        raise ConfigurationError("adversarial loss requested but the denoiser is the cnn variant")
    return -discriminator(denoised).mean()


def gradient_penalty(discriminator: nn.Module, interpolates: Tensor) -> Tensor:
    """mean[(||grad_u D(u)||_2 - 1)^2]."""
    interpolates = interpolates.detach().requires_grad_(True)
    scores = discriminator(interpolates)
    gradients, = torch.autograd.grad(
        outputs=scores.sum(),
        inputs=interpolates,
        create_graph=True,
        allow_unused=True,
    )
    if gradients is None:
        gradients = torch.zeros_like(interpolates)
    norms = gradients.reshape(gradients.shape[0], -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def discriminator_loss(
    discriminator: nn.Module,
    denoised: Tensor,
    target: Tensor,
    gp_weight: float = 10.0,
    epsilon: Optional[Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """Critic objective: mean D(x_hat) - mean D(y) + gp_weight * penalty.

    Interpolates u = eps * y + (1 - eps) * x_hat with one eps ~ U(0, 1) per
    pair; ``epsilon`` may be passed explicitly for reproducible evaluation.
    """
    if gp_weight < 0:
        raise ConfigurationError(f"gradient-penalty weight must be >= 0, got {gp_weight}")
    if denoised.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(denoised.shape)} vs {tuple(target.shape)}")
    fake = denoised.detach()
    if epsilon is None:
        epsilon = torch.rand(fake.shape[0], generator=generator, dtype=fake.dtype, device=fake.device)
    eps = epsilon.reshape(-1, *([1] * (fake.dim() - 1)))
    interpolates = eps * target + (1.0 - eps) * fake
    wasserstein = discriminator(fake).mean() - discriminator(target).mean()
    return wasserstein + gp_weight * gradient_penalty(discriminator, interpolates)
