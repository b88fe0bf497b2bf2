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


"""Training objective: denoising MSE, audio/image InfoNCE and an l1 penalty on the audio tokens."""

import math
from dataclasses import asdict, dataclass
from typing import Dict, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from sound_brush.errors import ConfigError, NumericalError, ShapeError, SpaceMismatchError
from sound_brush.structures import EmbeddingSpace, EmbeddingVector, LatentTensor, TokenSequence

TensorLike = Union[torch.Tensor, LatentTensor, TokenSequence]
EmbeddingBatch = Union[torch.Tensor, Sequence[EmbeddingVector]]


@dataclass(frozen=True)
class LossWeights:
    lambda_nce: float = 1.0
    lambda_l1: float = 0.01

    def __post_init__(self) -> None:
        for name in ("lambda_nce", "lambda_l1"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"losses.{name}", f"must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class LossReport:
    l_ldm: float
    l_nce: float
    l_l1: float
    l_total: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.l_ldm, self.l_nce, self.l_l1, self.l_total))


def _tensor(x: TensorLike) -> torch.Tensor:
    if isinstance(x, LatentTensor):
        return x.values
    if isinstance(x, TokenSequence):
        return x.tokens
    return x


def _embedding_batch(batch: EmbeddingBatch, name: str) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch
    for vector in batch:
        if vector.space != EmbeddingSpace.JOINT_VL:
            raise SpaceMismatchError(f"{name} must hold JOINT_VL embeddings, got {vector.space.value}")
    return torch.stack([v.values for v in batch])


def ldm_loss(eps_true: TensorLike, eps_pred: TensorLike) -> torch.Tensor:
    eps_true, eps_pred = _tensor(eps_true), _tensor(eps_pred)
    if eps_true.shape != eps_pred.shape:
        raise ShapeError(f"noise shapes differ: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    return F.mse_loss(eps_pred, eps_true, reduction="mean")


def info_nce(qv: EmbeddingBatch, qi: EmbeddingBatch, temperature: float = 1.0) -> torch.Tensor:
    """Row j's positive is ``qi[j]``; cosine logits divided by ``temperature`` (1.0 keeps them raw)."""
    qv = _embedding_batch(qv, "qv")
    qi = _embedding_batch(qi, "qi")
    if qv.dim() != 2 or qv.shape != qi.shape or qv.shape[0] < 1:
        raise ShapeError(f"need two N x d batches, got {tuple(qv.shape)} and {tuple(qi.shape)}")

    for name, batch in (("qv", qv), ("qi", qi)):
        norms = torch.linalg.vector_norm(batch, dim=1)
        if torch.any(norms == 0):
            rows = torch.nonzero(norms == 0).flatten().tolist()
            raise NumericalError(f"zero-norm {name} rows {rows} in InfoNCE")

    qv = qv / torch.linalg.vector_norm(qv, dim=1, keepdim=True)
    qi = qi / torch.linalg.vector_norm(qi, dim=1, keepdim=True)
    logits = torch.matmul(qv, qi.T) / temperature
    labels = torch.arange(qv.shape[0], device=qv.device)
    return F.cross_entropy(logits, labels)


def l1_token_reg(tokens: TensorLike, reduction: str = "sum") -> torch.Tensor:
    """|V|_1 per token matrix; a B x n x d batch averages the per-sample values."""
    tokens = _tensor(tokens)
    if reduction not in ("sum", "mean"):
        raise ConfigError("losses.l1_reduction", f"unknown reduction '{reduction}'")

    per_entry = tokens.abs()
    if tokens.dim() == 3:
        per_sample = per_entry.flatten(1).sum(1) if reduction == "sum" else per_entry.flatten(1).mean(1)
        return per_sample.mean()
    return per_entry.sum() if reduction == "sum" else per_entry.mean()


def combine(
    l_ldm: torch.Tensor, l_nce: torch.Tensor, l_l1: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    return l_ldm + weights.lambda_nce * l_nce + weights.lambda_l1 * l_l1


def total_loss(
    l_ldm: Union[torch.Tensor, float],
    l_nce: Union[torch.Tensor, float],
    l_l1: Union[torch.Tensor, float],
    weights: LossWeights,
) -> LossReport:
    ldm, nce, l1 = float(l_ldm), float(l_nce), float(l_l1)
    return LossReport(ldm, nce, l1, ldm + weights.lambda_nce * nce + weights.lambda_l1 * l1)


def objective(
    l_ldm: torch.Tensor, l_nce: torch.Tensor, l_l1: torch.Tensor, weights: LossWeights
) -> Tuple[torch.Tensor, LossReport]:
    """Differentiable total plus its report."""
    return combine(l_ldm, l_nce, l_l1, weights), total_loss(l_ldm, l_nce, l_l1, weights)
