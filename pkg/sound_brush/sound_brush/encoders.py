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


"""Frozen embedding providers.

Toy backends, all seeded and documented so that their outputs can be
recomputed by hand:

* audio (AUDIO, d_a): ``W_a @ [mean_t L; max_t L]`` where
  ``L = log1p(melspectrogram(samples * gain))`` with ``n_mels`` bands and
  ``W_a = |N(0, 1)| / sqrt(2 n_mels)``. Non-negative weights make the norm
  nondecreasing in the gain; silence maps to the zero vector.
* image (JOINT_VL, d_joint): ``W_i @ [pool(x) - 0.5; pool(x^2) - pool(x)^2]``
  with ``pool`` the 4 x 4 adaptive average pool, features flattened channel
  first, ``W_i = N(0, 1) / sqrt(96)``.
* condition: audio tokens padded to ``n_ctx`` with a fixed pad token, plus a
  sinusoidal position table, through a seeded transformer encoder, a linear
  map to d_cond and a layer norm. ``project_condition`` is ``P @ mean_rows``.
* joint (JOINT_AV, d_av): audio gives ``log1p`` of the mean mel power in
  ``joint_bins`` bands over [0, sr/2]; images give a hue histogram over the
  same number of bins weighted by saturation * value. Both go through one
  orthonormal ``Q``.
"""

import hashlib
import logging
import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Union

import cv2
import librosa
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sound_brush import toy_world
from sound_brush.config import GlobalConfig
from sound_brush.errors import ConfigError, ShapeError
from sound_brush.structures import (
    AudioClip,
    ConditionEmbedding,
    EmbeddingSpace,
    EmbeddingVector,
    Image,
    TokenSequence,
)

logger = logging.getLogger(__name__)

PATCH_GRID = 4


def _generator(seed: int, salt: str) -> torch.Generator:
    return torch.Generator().manual_seed(toy_world.stable_seed(salt, seed))


def sinusoidal_table(n_positions: int, dim: int) -> torch.Tensor:
    position = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    freqs = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * freqs)
    table[:, 1::2] = torch.cos(position * freqs[: dim // 2])
    return table


def fingerprint(module: nn.Module) -> str:
    """sha256 over every parameter and buffer of ``module``."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class ToyAudioEncoder(nn.Module):

    def __init__(self, d_a: int, n_mels: int, n_fft: int, hop_length: int, seed: int) -> None:
        super().__init__()
        self.n_mels = n_mels
        self.n_fft = n_fft
        self.hop_length = hop_length

        weights = torch.randn(d_a, 2 * n_mels, generator=_generator(seed, "audio"), dtype=torch.float64)
        self.register_buffer("projection", weights.abs() / math.sqrt(2 * n_mels))

    def log_mel_statistics(self, clip: AudioClip) -> np.ndarray:
        mel = librosa.feature.melspectrogram(
            y=clip.scaled(),
            sr=clip.sample_rate,
            n_fft=self.n_fft,
            hop_length=self.hop_length,
            n_mels=self.n_mels,
            power=2.0,
        )
        log_mel = np.log1p(mel)
        return np.concatenate([log_mel.mean(axis=1), log_mel.max(axis=1)])

    def encode_audio(self, clip: AudioClip) -> EmbeddingVector:
        feats = torch.from_numpy(self.log_mel_statistics(clip)).to(self.projection)
        return EmbeddingVector(self.projection @ feats, EmbeddingSpace.AUDIO)

    def encode_audio_batch(self, clips: List[AudioClip]) -> torch.Tensor:
        return torch.stack([self.encode_audio(c).values for c in clips])


class ToyConditionEncoder(nn.Module):
    """Stand-in for the text tower: frozen, yet differentiable w.r.t. its input tokens."""

    def __init__(
        self,
        d_token: int,
        d_cond: int,
        d_joint: int,
        n_ctx: int,
        layers: int,
        heads: int,
        positional_encoding: bool,
        seed: int,
    ) -> None:
        super().__init__()
        self.d_token = d_token
        self.n_ctx = n_ctx
        self.positional_encoding = positional_encoding

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(toy_world.stable_seed("condition", seed))
            self.pad_token = nn.Parameter(0.02 * torch.randn(d_token))
            layer = nn.TransformerEncoderLayer(
                d_token,
                heads,
                dim_feedforward=4 * d_token,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
            )
            self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
            self.to_cond = nn.Linear(d_token, d_cond) if d_cond != d_token else nn.Identity()
            self.final_norm = nn.LayerNorm(d_cond)
            self.projection = nn.Linear(d_cond, d_joint, bias=False)

        self.register_buffer("positions", sinusoidal_table(n_ctx, d_token).float())
        self.requires_grad_(False)
        self.eval()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """B x n_tokens x d_token -> B x n_ctx x d_cond."""
        if tokens.dim() != 3 or tokens.shape[-1] != self.d_token:
            raise ShapeError(
                f"condition encoder expects B x n x {self.d_token} tokens, got {tuple(tokens.shape)}"
            )
        if tokens.shape[1] > self.n_ctx:
            raise ShapeError(f"{tokens.shape[1]} tokens exceed the context length {self.n_ctx}")

        batch, n = tokens.shape[:2]
        pad = self.pad_token.to(tokens.dtype).expand(batch, self.n_ctx - n, self.d_token)
        x = torch.cat([tokens, pad], dim=1)
        if self.positional_encoding:
            x = x + self.positions.to(tokens.dtype)
        return self.final_norm(self.to_cond(self.encoder(x)))

    def project(self, cond: torch.Tensor) -> torch.Tensor:
        """B x n_ctx x d_cond -> B x d_joint (mean over context rows, then P)."""
        return self.projection(cond.mean(dim=1))

    def encode_condition(self, tokens: TokenSequence) -> ConditionEmbedding:
        return ConditionEmbedding(self(tokens.tokens.unsqueeze(0))[0])

    def project_condition(self, cond: ConditionEmbedding) -> EmbeddingVector:
        return EmbeddingVector(self.project(cond.tokens.unsqueeze(0))[0], EmbeddingSpace.JOINT_VL)

    def null_condition(self, n_tokens: int, dtype: torch.dtype) -> torch.Tensor:
        """Response to an all-zero token matrix, 1 x n_ctx x d_cond."""
        with torch.no_grad():
            return self(torch.zeros(1, n_tokens, self.d_token, dtype=dtype))


class ToyImageEncoder(nn.Module):

    def __init__(self, d_joint: int, seed: int) -> None:
        super().__init__()
        n_features = 2 * 3 * PATCH_GRID * PATCH_GRID
        weights = torch.randn(d_joint, n_features, generator=_generator(seed, "image"), dtype=torch.float64)
        self.register_buffer("projection", weights / math.sqrt(n_features))

    @staticmethod
    def patch_statistics(pixels: torch.Tensor) -> torch.Tensor:
        """B x 3 x H x W -> B x 96 patch means (centred on 0.5) and variances."""
        mean = F.adaptive_avg_pool2d(pixels, PATCH_GRID)
        second = F.adaptive_avg_pool2d(pixels * pixels, PATCH_GRID)
        var = (second - mean * mean).clamp_min(0.0)
        return torch.cat([(mean - 0.5).flatten(1), var.flatten(1)], dim=1)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        feats = self.patch_statistics(pixels.to(self.projection.dtype))
        return feats @ self.projection.T

    def encode_image(self, img: Image) -> EmbeddingVector:
        values = self(img.to_tensor(self.projection.dtype))[0]
        return EmbeddingVector(values, EmbeddingSpace.JOINT_VL)

    def encode_image_batch(self, images: List[Image]) -> torch.Tensor:
        return self(torch.cat([img.to_tensor(self.projection.dtype) for img in images]))


class ToyJointEncoder(nn.Module):

    def __init__(self, d_av: int, bins: int, n_fft: int, hop_length: int, seed: int) -> None:
        super().__init__()
        self.bins = bins
        self.n_fft = n_fft
        self.hop_length = hop_length

        gaussian = torch.randn(d_av, bins, generator=_generator(seed, "joint"), dtype=torch.float64)
        q, _ = torch.linalg.qr(gaussian)
        self.register_buffer("projection", q)

    def audio_profile(self, clip: AudioClip) -> np.ndarray:
        mel = librosa.feature.melspectrogram(
            y=clip.scaled(),
            sr=clip.sample_rate,
            n_fft=self.n_fft,
            hop_length=self.hop_length,
            n_mels=self.bins,
            fmin=0.0,
            fmax=clip.sample_rate / 2.0,
            power=2.0,
        )
        return np.log1p(mel.mean(axis=1))

    def image_profile(self, img: Image) -> np.ndarray:
        hsv = cv2.cvtColor(img.pixels.astype(np.float32), cv2.COLOR_RGB2HSV)
        hue_bins = (hsv[..., 0] / (360.0 / self.bins)).astype(np.int64) % self.bins
        weights = (hsv[..., 1] * hsv[..., 2]).astype(np.float64)
        histogram = np.bincount(hue_bins.ravel(), weights=weights.ravel(), minlength=self.bins)
        return histogram / hue_bins.size

    def joint_embed(self, x: Union[AudioClip, Image]) -> EmbeddingVector:
        if isinstance(x, AudioClip):
            profile = self.audio_profile(x)
        elif isinstance(x, Image):
            profile = self.image_profile(x)
        else:
            raise ShapeError(f"cannot embed {type(x).__name__} in the audio-visual space")
        values = self.projection @ torch.from_numpy(profile).to(self.projection)
        return EmbeddingVector(values, EmbeddingSpace.JOINT_AV)


class ToyTextEmbedder:
    """Bag of hashed word vectors in the JOINT_VL space.

    A registered sound keyword (or category name) embeds as the image
    embedding of its category's prototype picture; every other word gets a
    seeded random vector of norm 0.1.
    """

    WORD = re.compile(r"[a-z0-9\-]+")

    def __init__(self, image_encoder: ToyImageEncoder, seed: int, n_bins: int) -> None:
        self.image_encoder = image_encoder
        self.seed = seed
        self.phrases: Dict[str, torch.Tensor] = {}

        for category in toy_world.load_categories():
            prototype = toy_world.solid_image(toy_world.bin_color(category.bin, n_bins))
            vector = image_encoder.encode_image(prototype).values
            for phrase in (category.name,) + category.keywords:
                self.phrases[phrase.lower()] = vector

    def _word_vector(self, word: str) -> torch.Tensor:
        dim = self.image_encoder.projection.shape[0]
        dtype = self.image_encoder.projection.dtype
        g = _generator(self.seed, f"word:{word}")
        v = torch.randn(dim, generator=g, dtype=torch.float64)
        return (0.1 * v / torch.linalg.vector_norm(v)).to(dtype)

    def embed_text(self, text: str) -> EmbeddingVector:
        remaining = f" {text.lower()} "
        dim = self.image_encoder.projection.shape[0]
        total = torch.zeros(dim, dtype=self.image_encoder.projection.dtype)

        # longest phrases first so "heavy rain" wins over a bare "rain"
        for phrase in sorted(self.phrases, key=len, reverse=True):
            pattern = re.compile(rf"(?<![a-z0-9\-]){re.escape(phrase)}(?![a-z0-9\-])")
            hits = len(pattern.findall(remaining))
            if hits:
                total = total + hits * self.phrases[phrase]
                remaining = pattern.sub(" ", remaining)

        for word in self.WORD.findall(remaining):
            total = total + self._word_vector(word)

        return EmbeddingVector(total, EmbeddingSpace.JOINT_VL)


@dataclass
class Encoders:
    audio: ToyAudioEncoder
    condition: ToyConditionEncoder
    image: ToyImageEncoder
    joint: ToyJointEncoder
    text: ToyTextEmbedder

    def modules(self) -> Dict[str, nn.Module]:
        return {
            "audio": self.audio,
            "condition": self.condition,
            "image": self.image,
            "joint": self.joint,
        }

    def fingerprints(self) -> Dict[str, str]:
        return {name: fingerprint(m) for name, m in self.modules().items()}

    def encode_audio(self, clip: AudioClip) -> EmbeddingVector:
        return self.audio.encode_audio(clip)

    def encode_condition(self, tokens: TokenSequence) -> ConditionEmbedding:
        return self.condition.encode_condition(tokens)

    def project_condition(self, cond: ConditionEmbedding) -> EmbeddingVector:
        return self.condition.project_condition(cond)

    def encode_image(self, img: Image) -> EmbeddingVector:
        return self.image.encode_image(img)

    def joint_embed(self, x: Union[AudioClip, Image]) -> EmbeddingVector:
        return self.joint.joint_embed(x)

    def embed_text(self, text: str) -> EmbeddingVector:
        return self.text.embed_text(text)


EncoderFactory = Callable[[GlobalConfig], Encoders]


def _build_toy(config: GlobalConfig) -> Encoders:
    enc = config.encoders
    dims = enc.dims
    dtype = config.torch_dtype

    audio = ToyAudioEncoder(dims.d_a, enc.n_mels, enc.n_fft, enc.hop_length, enc.seed).to(dtype)
    condition = ToyConditionEncoder(
        dims.d_token,
        dims.d_cond,
        dims.d_joint,
        dims.n_ctx,
        enc.text_layers,
        enc.text_heads,
        enc.positional_encoding,
        enc.seed,
    ).to(dtype)
    image = ToyImageEncoder(dims.d_joint, enc.seed).to(dtype)
    joint = ToyJointEncoder(dims.d_av, enc.joint_bins, enc.n_fft, enc.hop_length, enc.seed).to(dtype)
    text = ToyTextEmbedder(image, enc.seed, enc.joint_bins)

    return Encoders(audio, condition, image, joint, text)


_BACKENDS: Dict[str, EncoderFactory] = {"toy": _build_toy}


def register_backend(name: str, factory: EncoderFactory) -> None:
    """Makes ``factory`` available as ``encoders.backend = name``."""
    _BACKENDS[name] = factory


def build_encoders(config: GlobalConfig) -> Encoders:
    backend = config.encoders.backend
    if backend not in _BACKENDS:
        raise ConfigError("encoders.backend", f"no '{backend}' backend has been registered")

    encoders = _BACKENDS[backend](config)
    logger.info(f"[encoders] {backend} backend ready, fingerprints={encoders.fingerprints()}")
    return encoders
