# Copyright (C) 2024 Miguel Ángel González Santamarta

# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.

# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.


import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from sound_brush import toy_world
from sound_brush.config import DiffusionConfig
from sound_brush.errors import ConfigError, ShapeError, TimestepError
from sound_brush.structures import ConditionEmbedding, Image, LatentTensor

logger = logging.getLogger(__name__)


class DiffusionSchedule:

    def __init__(
        self,
        timesteps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 2e-2,
        beta_schedule: str = "linear",
    ) -> None:
        if beta_schedule == "linear":
            betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        elif beta_schedule == "scaled_linear":
            betas = torch.linspace(beta_start**0.5, beta_end**0.5, timesteps, dtype=torch.float64) ** 2
        else:
            raise ConfigError("diffusion.beta_schedule", f"unknown schedule '{beta_schedule}'")

        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.beta_schedule = beta_schedule

        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)
        self.sigmas = torch.sqrt((1.0 - self.alpha_bars) / self.alpha_bars)

    @classmethod
    def from_config(cls, config: DiffusionConfig) -> "DiffusionSchedule":
        return cls(config.timesteps, config.beta_start, config.beta_end, config.beta_schedule)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "timesteps": self.timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "beta_schedule": self.beta_schedule,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DiffusionSchedule":
        return cls(**data)

    def check_timesteps(self, t: torch.Tensor) -> None:
        if torch.any(t < 0) or torch.any(t > self.timesteps - 1):
            raise TimestepError(f"timesteps {t.tolist()} outside [0, {self.timesteps})")

    def sigma_at(self, t: torch.Tensor) -> torch.Tensor:
        """Noise level at possibly fractional timesteps, linear in sigma between integers."""
        t = torch.as_tensor(t, dtype=torch.float64)
        self.check_timesteps(t)
        low = torch.clamp(torch.floor(t).long(), max=self.timesteps - 2)
        frac = t - low.double()
        return (1.0 - frac) * self.sigmas[low] + frac * self.sigmas[low + 1]

    def alpha_bar_at(self, t: torch.Tensor) -> torch.Tensor:
        sigma = self.sigma_at(t)
        return 1.0 / (1.0 + sigma * sigma)

    def noise(self, z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """Batched ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`` for integer ``t`` of shape B."""
        t = torch.as_tensor(t).long().reshape(-1)
        self.check_timesteps(t)
        ab = self.alpha_bars[t].to(z0.dtype).view(-1, *([1] * (z0.dim() - 1)))
        return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def add_noise(z0: LatentTensor, t: int, eps: LatentTensor, schedule: DiffusionSchedule) -> LatentTensor:
    if not 0 <= int(t) < schedule.timesteps:
        raise TimestepError(f"timestep {t} outside [0, {schedule.timesteps})")
    if z0.shape != eps.shape:
        raise ShapeError(f"latent {z0.shape} and noise {eps.shape} differ")
    z_t = schedule.noise(z0.values.unsqueeze(0), torch.tensor([int(t)]), eps.values.unsqueeze(0))
    return LatentTensor(z_t[0])


class ToyAutoencoder(nn.Module):
    """Block-average down-sampler with a seeded orthonormal colour-to-latent map.

    ``encode``: ``M @ avgpool_f(2x - 1)``, M is c_lat x 3 with orthonormal
    columns. ``decode``: nearest up-sampling of ``M^T z``, mapped back to
    [0, 1] and clipped. Exact on images that are constant on f x f blocks.
    """

    def __init__(self, latent_channels: int = 4, factor: int = 4, seed: int = 0) -> None:
        super().__init__()
        if latent_channels < 3:
            raise ConfigError("diffusion.latent_channels", "must be >= 3")
        self.latent_channels = latent_channels
        self.factor = factor

        g = torch.Generator().manual_seed(toy_world.stable_seed("autoencoder", seed))
        q, _ = torch.linalg.qr(torch.randn(latent_channels, 3, generator=g, dtype=torch.float64))
        self.register_buffer("mixing", q)

    def encode_tensor(self, pixels: torch.Tensor) -> torch.Tensor:
        """B x 3 x H x W -> B x c_lat x H/f x W/f."""
        if pixels.shape[-1] % self.factor or pixels.shape[-2] % self.factor:
            raise ShapeError(
                f"image size {tuple(pixels.shape[-2:])} is not a multiple of {self.factor}"
            )
        pooled = F.avg_pool2d(2.0 * pixels.to(self.mixing.dtype) - 1.0, self.factor)
        return torch.einsum("cr,brhw->bchw", self.mixing, pooled)

    def decode_tensor(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.dim() != 4 or latents.shape[1] != self.latent_channels:
            raise ShapeError(f"latent batch must be B x {self.latent_channels} x h x w")
        rgb = torch.einsum("cr,bchw->brhw", self.mixing.to(latents.dtype), latents)
        rgb = F.interpolate(rgb, scale_factor=self.factor, mode="nearest")
        return ((rgb + 1.0) / 2.0).clamp(0.0, 1.0)

    def autoencode(self, img: Image) -> LatentTensor:
        return LatentTensor.from_batch(self.encode_tensor(img.to_tensor(self.mixing.dtype)))

    def decode(self, z: LatentTensor) -> Image:
        if z.shape[2] != self.latent_channels:
            raise ShapeError(f"latent has {z.shape[2]} channels, expected {self.latent_channels}")
        return Image.from_tensor(self.decode_tensor(z.to_batch()))


@dataclass
class GuidanceConfig:
    """Dual classifier-free guidance; (1, 1) is the unguided prediction."""

    cond_scale: float = 1.0
    image_scale: float = 1.0

    @property
    def unguided(self) -> bool:
        return self.cond_scale == 1.0 and self.image_scale == 1.0


def guided_eps(
    denoiser: nn.Module,
    z: torch.Tensor,
    t: float,
    z_img: torch.Tensor,
    context: torch.Tensor,
    guidance: GuidanceConfig,
    null_context: Optional[torch.Tensor] = None,
    adapter: Optional[nn.Module] = None,
) -> torch.Tensor:
    eps_full = denoiser(z, t, z_img, context, adapter)
    if guidance.unguided:
        return eps_full

    if null_context is None:
        raise ConfigError("diffusion.sampler", "guidance needs the null condition")
    null_context = null_context.expand_as(context)
    eps_image = denoiser(z, t, z_img, null_context, adapter)
    eps_uncond = denoiser(z, t, torch.zeros_like(z_img), null_context, adapter)

    return (
        eps_uncond
        + guidance.image_scale * (eps_image - eps_uncond)
        + guidance.cond_scale * (eps_full - eps_image)
    )


def sampling_sigmas(schedule: DiffusionSchedule, steps: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Timesteps evenly spaced from T - 1 down to 0 and their sigmas with a final 0."""
    if steps < 1:
        raise ConfigError("diffusion.sampler.steps", f"must be >= 1, got {steps}")
    timesteps = torch.from_numpy(np.linspace(schedule.timesteps - 1, 0, steps))
    sigmas = torch.cat([schedule.sigma_at(timesteps), torch.zeros(1, dtype=torch.float64)])
    return timesteps, sigmas


def initial_latent(
    shape: Tuple[int, ...], sigma_max: float, generator: torch.Generator, dtype: torch.dtype
) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype) * sigma_max


def euler_ancestral(
    predict_eps: Callable[[torch.Tensor, float], torch.Tensor],
    shape: Tuple[int, ...],
    schedule: DiffusionSchedule,
    steps: int,
    seed: int,
    dtype: torch.dtype = torch.float32,
    progress: bool = False,
) -> torch.Tensor:
    """Euler-ancestral integration of the reverse process; returns the final latent batch.

    ``predict_eps(z, t)`` receives ``z = x / sqrt(sigma^2 + 1)`` (the
    variance-preserving latent at timestep ``t``).
    """
    timesteps, sigmas = sampling_sigmas(schedule, steps)
    generator = torch.Generator().manual_seed(seed)
    x = initial_latent(shape, float(sigmas[0]), generator, dtype)

    for i in tqdm(range(steps), desc="Sampling", total=steps, disable=not progress):
        sigma = float(sigmas[i])
        sigma_next = float(sigmas[i + 1])

        eps = predict_eps(x / (sigma**2 + 1.0) ** 0.5, float(timesteps[i]))
        denoised = x - sigma * eps

        sigma_up = (sigma_next**2 * (sigma**2 - sigma_next**2) / sigma**2) ** 0.5
        sigma_down = max(sigma_next**2 - sigma_up**2, 0.0) ** 0.5

        x = x + (x - denoised) / sigma * (sigma_down - sigma)
        if sigma_next > 0:
            noise = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
            x = x + noise * sigma_up

    return x


def sample_edit(
    denoiser: nn.Module,
    autoencoder: ToyAutoencoder,
    src: Image,
    cond: ConditionEmbedding,
    steps: int,
    seed: int,
    guidance: Optional[GuidanceConfig] = None,
    adapter: Optional[nn.Module] = None,
    null_cond: Optional[torch.Tensor] = None,
    progress: bool = False,
) -> Image:
    """Edits ``src`` under ``cond``; the source latent is concatenated at every step."""
    guidance = guidance or GuidanceConfig()
    dtype = next(denoiser.parameters()).dtype

    with torch.no_grad():
        z_img = autoencoder.encode_tensor(src.to_tensor(dtype)).to(dtype)
        context = cond.tokens.to(dtype).unsqueeze(0)

        def predict(z: torch.Tensor, t: float) -> torch.Tensor:
            return guided_eps(denoiser, z, t, z_img, context, guidance, null_cond, adapter)

        latent = euler_ancestral(
            predict, tuple(z_img.shape), denoiser.schedule, steps, seed, dtype, progress
        )
        return Image.from_tensor(autoencoder.decode_tensor(latent))
