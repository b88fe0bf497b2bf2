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
from typing import Dict, Optional

import torch
import torch.nn as nn

from sound_brush.config import GlobalConfig
from sound_brush.errors import ConfigError, ShapeError, SpaceMismatchError
from sound_brush.structures import EmbeddingSpace, EmbeddingVector, TokenSequence

logger = logging.getLogger(__name__)


class MappingNetwork(nn.Module):
    """Turns one pooled audio embedding into ``n_tokens`` audio tokens.

    The projected audio embedding is prepended as a context row to the
    learnable tokens; the outputs are read back at the token positions.
    """

    def __init__(
        self,
        d_a: int,
        d_token: int,
        n_tokens: int = 5,
        layers: int = 2,
        heads: int = 4,
        ff_mult: int = 4,
        token_init_std: float = 0.02,
    ) -> None:
        super().__init__()

        if n_tokens < 1:
            raise ConfigError("mapping.n_tokens", "must be >= 1")
        if d_token % heads != 0:
            raise ConfigError("mapping.heads", f"must divide d_token ({d_token})")

        self.d_a = d_a
        self.d_token = d_token
        self.n_tokens = n_tokens

        self.input_projection = nn.Linear(d_a, d_token)
        self.learnable_tokens = nn.Parameter(token_init_std * torch.randn(n_tokens, d_token))

        layer = nn.TransformerEncoderLayer(
            d_model=d_token,
            nhead=heads,
            dim_feedforward=ff_mult * d_token,
            dropout=0.0,
            batch_first=True,
        )
        self.encoder_layers = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)

    def forward(self, f_a: torch.Tensor) -> torch.Tensor:
        """B x d_a -> B x n_tokens x d_token."""
        if f_a.dim() != 2 or f_a.shape[1] != self.d_a:
            raise ShapeError(f"mapping network expects B x {self.d_a}, got {tuple(f_a.shape)}")

        batch = f_a.shape[0]
        context = self.input_projection(f_a).unsqueeze(1)
        tokens = self.learnable_tokens.unsqueeze(0).expand(batch, -1, -1)
        x = self.encoder_layers(torch.cat([context, tokens], dim=1))
        return x[:, 1:, :]

    def audio_tokens(self, f_a: EmbeddingVector) -> TokenSequence:
        if f_a.space != EmbeddingSpace.AUDIO:
            raise SpaceMismatchError(f"mapping network takes AUDIO embeddings, got {f_a.space.value}")
        if f_a.dim != self.d_a:
            raise ShapeError(f"audio embedding has dim {f_a.dim}, expected {self.d_a}")
        values = f_a.values.to(self.learnable_tokens.dtype).unsqueeze(0)
        return TokenSequence(self(values)[0])

    def stats(self) -> Dict[str, int]:
        return {
            "parameters": sum(p.numel() for p in self.parameters()),
            "n_tokens": self.n_tokens,
            "d_token": self.d_token,
        }


def init_mapping_network(config: GlobalConfig, seed: Optional[int] = None) -> MappingNetwork:
    """Seeded construction; the global RNG state is left untouched."""
    seed = config.seed if seed is None else seed
    mapping = config.mapping

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = MappingNetwork(
            config.dims.d_a,
            config.dims.d_token,
            n_tokens=mapping.n_tokens,
            layers=mapping.layers,
            heads=mapping.heads,
            ff_mult=mapping.ff_mult,
            token_init_std=mapping.token_init_std,
        )

    network = network.to(config.torch_dtype)
    logger.info(f"[mapping_network] initialized with seed {seed}: {network.stats()}")
    return network
