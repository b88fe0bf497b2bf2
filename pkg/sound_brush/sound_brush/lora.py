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


"""Low-rank adapters kept outside the frozen base weights.

Every adaptable projection is an :class:`AdaptableLinear` carrying its
qualified name. An adapter is a set of ``(A, B)`` pairs keyed by those
names; the forward pass adds ``scale * B @ A @ x`` for the layers it covers.
"""

import copy
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from sound_brush.errors import ConfigError


class LoRAPair(nn.Module):

    def __init__(self, in_features: int, out_features: int, rank: int) -> None:
        super().__init__()
        # A: r x in, B: out x r
        self.A = nn.Parameter(torch.zeros(rank, in_features))
        self.B = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5))
        nn.init.zeros_(self.B)


class LoRAAdapter(nn.Module):

    def __init__(self, rank: int, alpha: float) -> None:
        super().__init__()
        if rank < 1:
            raise ConfigError("diffusion.lora.rank", "must be >= 1")
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.pairs = nn.ModuleDict()

    @staticmethod
    def _key(name: str) -> str:
        return name.replace(".", "__")

    def add(self, name: str, in_features: int, out_features: int) -> None:
        self.pairs[self._key(name)] = LoRAPair(in_features, out_features, self.rank)

    def pair(self, name: str) -> Optional[LoRAPair]:
        key = self._key(name)
        return self.pairs[key] if key in self.pairs else None

    def targets(self) -> List[str]:
        return [key.replace("__", ".") for key in self.pairs.keys()]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class AdaptableLinear(nn.Linear):
    """``nn.Linear`` that takes an optional adapter at call time."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True) -> None:
        super().__init__(in_features, out_features, bias=bias)
        self.qualname = ""

    def forward(self, x: torch.Tensor, adapter: Optional[LoRAAdapter] = None) -> torch.Tensor:
        base = F.linear(x, self.weight, self.bias)
        if adapter is None:
            return base

        pair = adapter.pair(self.qualname)
        if pair is None:
            return base
        delta = (x @ pair.A.T) @ pair.B.T
        return base + delta * adapter.scale


def name_adaptable_layers(model: nn.Module) -> None:
    for name, module in model.named_modules():
        if isinstance(module, AdaptableLinear):
            module.qualname = name


def adaptable_layers(model: nn.Module) -> Iterator[Tuple[str, AdaptableLinear]]:
    for name, module in model.named_modules():
        if isinstance(module, AdaptableLinear):
            yield name, module


def cross_attention_projections(model: nn.Module) -> List[str]:
    suffixes = (".to_q", ".to_k", ".to_v", ".to_out")
    return [
        name
        for name, _ in adaptable_layers(model)
        if name.endswith(suffixes) and ".cross_attention" in f".{name}"
    ]


def apply_lora(
    model: nn.Module,
    targets: Optional[Sequence[str]] = None,
    rank: int = 2,
    alpha: float = 2.0,
) -> LoRAAdapter:
    """Creates an adapter with zero ``B`` for ``targets`` (default: every cross-attention projection)."""
    layers = dict(adaptable_layers(model))
    if targets is None:
        targets = cross_attention_projections(model)

    adapter = LoRAAdapter(rank, alpha)
    for i, name in enumerate(targets):
        if name not in layers:
            raise ConfigError(f"diffusion.lora.targets[{i}]", f"unknown layer '{name}'")
        layer = layers[name]
        adapter.add(name, layer.in_features, layer.out_features)

    weight = next(iter(layers.values())).weight
    return adapter.to(dtype=weight.dtype, device=weight.device)


def merge_lora(model: nn.Module, adapter: LoRAAdapter) -> nn.Module:
    """Returns a copy of ``model`` with ``W + (alpha / r) B A`` folded into each target."""
    merged = copy.deepcopy(model)
    layers: Dict[str, AdaptableLinear] = dict(adaptable_layers(merged))

    with torch.no_grad():
        for name in adapter.targets():
            pair = adapter.pair(name)
            layers[name].weight += adapter.scale * (pair.B @ pair.A)

    return merged
