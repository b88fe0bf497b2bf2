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


"""Domain data types shared by every sound_brush module."""

import enum
from dataclasses import dataclass, field
from typing import Any, Dict, Union

import numpy as np
import torch

from sound_brush.errors import (
    InvalidInputError,
    NumericalError,
    ShapeError,
    SpaceMismatchError,
)


class EmbeddingSpace(str, enum.Enum):
    AUDIO = "AUDIO"
    JOINT_VL = "JOINT_VL"
    JOINT_AV = "JOINT_AV"


class Subset(str, enum.Enum):
    SYNTHETIC = "SYNTHETIC"
    REAL = "REAL"


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform in [-1, 1]; ``gain`` is applied before encoding."""

    samples: np.ndarray
    sample_rate: int
    gain: float = 1.0

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise InvalidInputError("audio clip needs a non-empty mono waveform")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("audio clip contains non-finite samples")
        if np.abs(samples).max() > 1.0:
            raise InvalidInputError(f"audio samples must lie in [-1, 1], peak is {np.abs(samples).max():.4g}")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError(f"invalid sample rate {self.sample_rate}")
        if not self.gain > 0:
            raise InvalidInputError(f"gain must be positive, got {self.gain}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def scaled(self) -> np.ndarray:
        return np.clip(self.samples * self.gain, -1.0, 1.0)

    def with_gain(self, gain: float) -> "AudioClip":
        return AudioClip(self.samples, self.sample_rate, gain)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Image:
    """H x W x 3 RGB array with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ShapeError(f"image must be H x W x 3, got {pixels.shape}")
        if pixels.shape[0] < 8 or pixels.shape[1] < 8:
            raise ShapeError(f"image must be at least 8 x 8, got {pixels.shape[:2]}")
        if not np.all(np.isfinite(pixels)):
            raise InvalidInputError("image contains non-finite values")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidInputError("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Returns the pixels as a 1 x 3 x H x W tensor."""
        return torch.from_numpy(self.pixels).to(dtype).permute(2, 0, 1).unsqueeze(0)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> "Image":
        """Builds an image from a 3 x H x W (or 1 x 3 x H x W) tensor, clipping to [0, 1]."""
        if tensor.dim() == 4:
            tensor = tensor[0]
        pixels = tensor.detach().permute(1, 2, 0).clamp(0.0, 1.0).double().cpu().numpy()
        return cls(pixels)


@dataclass(frozen=True)
class EmbeddingVector:
    values: torch.Tensor
    space: EmbeddingSpace

    def __post_init__(self) -> None:
        if self.values.dim() != 1 or self.values.numel() == 0:
            raise ShapeError(f"embedding must be a non-empty vector, got {tuple(self.values.shape)}")
        if not torch.all(torch.isfinite(self.values)):
            raise NumericalError(f"{self.space.value} embedding has non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.numel()


@dataclass(frozen=True)
class TokenSequence:
    """n_tokens x d_token audio tokens in the editor's textual token space."""

    tokens: torch.Tensor

    def __post_init__(self) -> None:
        if self.tokens.dim() != 2:
            raise ShapeError(f"token sequence must be 2-D, got {tuple(self.tokens.shape)}")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def d_token(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class ConditionEmbedding:
    """n_ctx x d_cond output of the condition encoder."""

    tokens: torch.Tensor

    def __post_init__(self) -> None:
        if self.tokens.dim() != 2:
            raise ShapeError(f"condition must be 2-D, got {tuple(self.tokens.shape)}")

    @property
    def n_ctx(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class LatentTensor:
    """h x w x c latent."""

    values: torch.Tensor

    def __post_init__(self) -> None:
        if self.values.dim() != 3:
            raise ShapeError(f"latent must be h x w x c, got {tuple(self.values.shape)}")

    @property
    def shape(self):
        return tuple(self.values.shape)

    def to_batch(self) -> torch.Tensor:
        """Returns the latent as 1 x c x h x w."""
        return self.values.permute(2, 0, 1).unsqueeze(0)

    @classmethod
    def from_batch(cls, batch: torch.Tensor) -> "LatentTensor":
        return cls(batch[0].permute(1, 2, 0))


@dataclass
class EditTriplet:
    before: Image
    after: Image
    audio: AudioClip
    category: str
    subset: Subset
    seed: int = 0
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.before.pixels.shape != self.after.pixels.shape:
            raise ShapeError(
                f"before {self.before.pixels.shape} and after "
                f"{self.after.pixels.shape} differ in size"
            )
        self.subset = Subset(self.subset)
        if self.subset == Subset.REAL and "mask" not in self.provenance:
            raise InvalidInputError("REAL triplets must carry their localization mask")


Embeddable = Union[AudioClip, Image]


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity of two embeddings living in the same space."""
    if a.space != b.space:
        raise SpaceMismatchError(
            f"cannot compare {a.space.value} with {b.space.value} embeddings"
        )
    if a.dim != b.dim:
        raise ShapeError(f"embedding dims differ: {a.dim} vs {b.dim}")

    u = a.values.detach().double()
    v = b.values.detach().double()
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        raise NumericalError(f"zero-norm {a.space.value} embedding in cosine similarity")

    return float(torch.clamp(torch.dot(u, v) / (nu * nv), -1.0, 1.0))
