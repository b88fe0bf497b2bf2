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


"""Small U-shaped conditional denoiser.

The network sees ``[z_t ; E(c^I)]`` (2 x c_lat channels) and attends to the
condition rows. Its cross-attention head returns a latent edit offset
``delta`` and the returned noise estimate is the posterior mean of ``eps``
when ``z_0 ~ N(E(c^I) + delta, prior_variance * I)``. The head's output
projection starts at zero, so the untouched base model reproduces its
conditioning image.
"""

import logging
import math
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from sound_brush.config import GlobalConfig
from sound_brush.diffusion import DiffusionSchedule
from sound_brush.errors import ShapeError
from sound_brush.lora import AdaptableLinear, LoRAAdapter, name_adaptable_layers
from sound_brush.structures import ConditionEmbedding, LatentTensor

logger = logging.getLogger(__name__)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double().unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class TimestepEmbedding(nn.Module):

    def __init__(self, channels: int, embed_dim: int) -> None:
        super().__init__()
        self.channels = channels
        self.linear_1 = AdaptableLinear(channels, embed_dim)
        self.linear_2 = AdaptableLinear(embed_dim, embed_dim)

    def forward(self, t: torch.Tensor, adapter: Optional[LoRAAdapter] = None) -> torch.Tensor:
        x = timestep_embedding(t, self.channels).to(self.linear_1.weight.dtype)
        return self.linear_2(F.silu(self.linear_1(x, adapter)), adapter)


class ResnetBlock(nn.Module):

    def __init__(self, in_channels: int, out_channels: int, temb_channels: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_emb_proj = AdaptableLinear(temb_channels, out_channels)
        self.norm2 = nn.GroupNorm(8, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.shortcut = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        )

    def forward(
        self, x: torch.Tensor, temb: torch.Tensor, adapter: Optional[LoRAAdapter] = None
    ) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_emb_proj(F.silu(temb), adapter)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class CrossAttention(nn.Module):
    """Pixels query the condition rows; keys and values are d_cond wide."""

    def __init__(
        self,
        channels: int,
        context_dim: int,
        heads: int,
        out_channels: Optional[int] = None,
        zero_out: bool = False,
    ) -> None:
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = AdaptableLinear(channels, channels, bias=False)
        self.to_k = AdaptableLinear(context_dim, channels, bias=False)
        self.to_v = AdaptableLinear(context_dim, channels, bias=False)
        self.to_out = AdaptableLinear(channels, out_channels or channels)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(
        self, x: torch.Tensor, context: torch.Tensor, adapter: Optional[LoRAAdapter] = None
    ) -> torch.Tensor:
        b, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)

        q = self.to_q(seq, adapter)
        k = self.to_k(context, adapter)
        v = self.to_v(context, adapter)

        head_dim = c // self.heads
        q = q.view(b, -1, self.heads, head_dim).transpose(1, 2)
        k = k.view(b, -1, self.heads, head_dim).transpose(1, 2)
        v = v.view(b, -1, self.heads, head_dim).transpose(1, 2)

        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(head_dim), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out, adapter)
        return out.transpose(1, 2).reshape(b, -1, h, w)


class DenoiserBlock(nn.Module):

    def __init__(
        self, in_channels: int, out_channels: int, temb_channels: int, context_dim: int, heads: int
    ) -> None:
        super().__init__()
        self.resnet = ResnetBlock(in_channels, out_channels, temb_channels)
        self.cross_attention = CrossAttention(out_channels, context_dim, heads)

    def forward(
        self,
        x: torch.Tensor,
        temb: torch.Tensor,
        context: torch.Tensor,
        adapter: Optional[LoRAAdapter] = None,
    ) -> torch.Tensor:
        x = self.resnet(x, temb, adapter)
        return x + self.cross_attention(x, context, adapter)


class EditHead(nn.Module):

    def __init__(self, channels: int, latent_channels: int, context_dim: int, heads: int) -> None:
        super().__init__()
        self.cross_attention = CrossAttention(
            channels, context_dim, heads, out_channels=latent_channels, zero_out=True
        )

    def forward(
        self, x: torch.Tensor, context: torch.Tensor, adapter: Optional[LoRAAdapter] = None
    ) -> torch.Tensor:
        return self.cross_attention(F.silu(x), context, adapter)


class ToyDenoiser(nn.Module):

    def __init__(
        self,
        schedule: DiffusionSchedule,
        latent_channels: int = 4,
        base_width: int = 32,
        context_dim: int = 24,
        heads: int = 4,
        prior_variance: float = 0.01,
    ) -> None:
        super().__init__()
        self.schedule = schedule
        self.latent_channels = latent_channels
        self.context_dim = context_dim
        self.prior_variance = prior_variance

        w = base_width
        temb = 4 * w
        self.conv_in = nn.Conv2d(2 * latent_channels, w, 3, padding=1)
        self.time_embedding = TimestepEmbedding(w, temb)
        self.down_blocks = nn.ModuleList(
            [
                DenoiserBlock(w, w, temb, context_dim, heads),
                DenoiserBlock(w, 2 * w, temb, context_dim, heads),
            ]
        )
        self.downsample = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.mid_block = DenoiserBlock(2 * w, 2 * w, temb, context_dim, heads)
        self.up_blocks = nn.ModuleList(
            [
                DenoiserBlock(4 * w, 2 * w, temb, context_dim, heads),
                DenoiserBlock(3 * w, w, temb, context_dim, heads),
            ]
        )
        self.head = EditHead(w, latent_channels, context_dim, heads)

        name_adaptable_layers(self)

    def edit_offset(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        z_img: torch.Tensor,
        context: torch.Tensor,
        adapter: Optional[LoRAAdapter] = None,
    ) -> torch.Tensor:
        temb = self.time_embedding(t, adapter)

        h0 = self.conv_in(torch.cat([z_t, z_img], dim=1))
        h1 = self.down_blocks[0](h0, temb, context, adapter)
        h2 = self.down_blocks[1](self.downsample(h1), temb, context, adapter)
        m = self.mid_block(h2, temb, context, adapter)

        u = self.up_blocks[0](torch.cat([m, h2], dim=1), temb, context, adapter)
        u = F.interpolate(u, size=h1.shape[-2:], mode="nearest")
        u = self.up_blocks[1](torch.cat([u, h1], dim=1), temb, context, adapter)

        return self.head(u, context, adapter)

    def forward(
        self,
        z_t: torch.Tensor,
        t: Union[torch.Tensor, float],
        z_img: torch.Tensor,
        context: torch.Tensor,
        adapter: Optional[LoRAAdapter] = None,
    ) -> torch.Tensor:
        """Predicted noise for B x c x h x w latents; ``t`` may be fractional."""
        if z_t.shape != z_img.shape or z_t.dim() != 4 or z_t.shape[1] != self.latent_channels:
            raise ShapeError(
                f"noisy latent {tuple(z_t.shape)} and image latent {tuple(z_img.shape)} "
                f"must both be B x {self.latent_channels} x h x w"
            )
        if context.dim() != 3 or context.shape[0] != z_t.shape[0] or context.shape[2] != self.context_dim:
            raise ShapeError(
                f"condition {tuple(context.shape)} must be B x n_ctx x {self.context_dim}"
            )

        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1).expand(z_t.shape[0])
        delta = self.edit_offset(z_t, t, z_img, context, adapter)

        alpha_bar = self.schedule.alpha_bar_at(t).to(z_t.dtype).view(-1, 1, 1, 1)
        mean = z_img + delta
        gain = torch.sqrt(1.0 - alpha_bar) / (alpha_bar * self.prior_variance + 1.0 - alpha_bar)
        return (z_t - torch.sqrt(alpha_bar) * mean) * gain

    def denoise(
        self,
        z_t: LatentTensor,
        t: Union[int, float],
        cond_img_latent: LatentTensor,
        cond: ConditionEmbedding,
        adapter: Optional[LoRAAdapter] = None,
    ) -> LatentTensor:
        eps = self(
            z_t.to_batch(),
            float(t),
            cond_img_latent.to_batch(),
            cond.tokens.unsqueeze(0),
            adapter,
        )
        return LatentTensor.from_batch(eps)


def build_denoiser(config: GlobalConfig, schedule: Optional[DiffusionSchedule] = None) -> ToyDenoiser:
    """Frozen base denoiser seeded by ``diffusion.seed``."""
    diffusion = config.diffusion
    schedule = schedule or DiffusionSchedule.from_config(diffusion)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(diffusion.seed)
        denoiser = ToyDenoiser(
            schedule,
            latent_channels=diffusion.latent_channels,
            base_width=diffusion.base_width,
            context_dim=config.dims.d_cond,
            heads=diffusion.attention_heads,
            prior_variance=diffusion.prior_variance,
        )

    denoiser = denoiser.to(config.torch_dtype)
    denoiser.requires_grad_(False)
    denoiser.eval()
    logger.info(
        f"[denoiser] built with seed {diffusion.seed}, "
        f"{sum(p.numel() for p in denoiser.parameters())} frozen parameters"
    )
    return denoiser
