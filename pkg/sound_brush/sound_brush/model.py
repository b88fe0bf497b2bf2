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
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from sound_brush.config import GlobalConfig
from sound_brush.denoiser import ToyDenoiser, build_denoiser
from sound_brush.diffusion import DiffusionSchedule, GuidanceConfig, ToyAutoencoder, sample_edit
from sound_brush.encoders import Encoders, build_encoders, fingerprint
from sound_brush.lora import LoRAAdapter, apply_lora
from sound_brush.mapping_network import MappingNetwork, init_mapping_network
from sound_brush.structures import AudioClip, ConditionEmbedding, Image, TokenSequence

logger = logging.getLogger(__name__)


class SoundBrush:
    """Frozen encoders, autoencoder and denoiser plus the trainable mapping network and adapter."""

    def __init__(
        self,
        config: GlobalConfig,
        encoders: Optional[Encoders] = None,
        mapping: Optional[MappingNetwork] = None,
        adapter: Optional[LoRAAdapter] = None,
    ) -> None:
        self.name = "sound_brush"
        logger.info(f"[{self.name}] Configuring...")

        self.config = config
        self.dtype = config.torch_dtype
        diffusion = config.diffusion

        self.encoders = encoders or build_encoders(config)
        self.schedule = DiffusionSchedule.from_config(diffusion)
        self.autoencoder = ToyAutoencoder(
            diffusion.latent_channels, diffusion.downsample, diffusion.seed
        ).to(self.dtype)
        self.denoiser: ToyDenoiser = build_denoiser(config, self.schedule)
        self.mapping = mapping or init_mapping_network(config)

        lora = diffusion.lora
        self.adapter = adapter or apply_lora(self.denoiser, lora.targets, lora.rank, lora.alpha)

        logger.info(
            f"[{self.name}] Configured: mapping={self.mapping.stats()}, "
            f"lora targets={len(self.adapter.targets())}, "
            f"lora parameters={self.adapter.parameter_count()}"
        )

    def trainable_modules(self) -> Dict[str, nn.Module]:
        return {"mapping_network": self.mapping, "lora": self.adapter}

    def trainable_parameters(self) -> List[nn.Parameter]:
        return list(self.mapping.parameters()) + list(self.adapter.parameters())

    def frozen_modules(self) -> Dict[str, nn.Module]:
        modules = {f"encoders.{k}": m for k, m in self.encoders.modules().items()}
        modules["autoencoder"] = self.autoencoder
        modules["denoiser"] = self.denoiser
        return modules

    def frozen_fingerprints(self) -> Dict[str, str]:
        return {name: fingerprint(m) for name, m in self.frozen_modules().items()}

    def train(self) -> None:
        self.mapping.train()
        self.adapter.train()

    def eval(self) -> None:
        self.mapping.eval()
        self.adapter.eval()

    def audio_condition(self, audio: AudioClip) -> Tuple[TokenSequence, ConditionEmbedding]:
        f_a = self.encoders.encode_audio(audio)
        tokens = self.mapping.audio_tokens(f_a)
        return tokens, self.encoders.encode_condition(tokens)

    def null_condition(self) -> torch.Tensor:
        return self.encoders.condition.null_condition(self.mapping.n_tokens, self.dtype)

    def guidance(
        self, cond_scale: Optional[float] = None, image_scale: Optional[float] = None
    ) -> GuidanceConfig:
        sampler = self.config.diffusion.sampler
        return GuidanceConfig(
            sampler.guidance_cond if cond_scale is None else cond_scale,
            sampler.guidance_img if image_scale is None else image_scale,
        )

    def edit(
        self,
        src: Image,
        audio: AudioClip,
        steps: Optional[int] = None,
        seed: int = 0,
        guidance: Optional[GuidanceConfig] = None,
        progress: bool = False,
    ) -> Image:
        """Edits ``src`` toward ``audio`` with the Euler-ancestral sampler."""
        steps = self.config.diffusion.sampler.steps if steps is None else steps
        guidance = guidance or self.guidance()

        with torch.no_grad():
            _, cond = self.audio_condition(audio)

        return sample_edit(
            self.denoiser,
            self.autoencoder,
            src,
            cond,
            steps,
            seed,
            guidance,
            adapter=self.adapter,
            null_cond=None if guidance.unguided else self.null_condition(),
            progress=progress,
        )
