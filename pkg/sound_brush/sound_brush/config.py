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


"""Configuration tree.

Every field below is a parameter with its default, the same role
``declare_parameter`` plays in a node. The JSON file only needs the keys
it overrides; unknown keys, wrong types and out-of-range values are
reported with their dotted path.
"""

import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar, Union

import torch

from sound_brush.errors import ConfigError

T = TypeVar("T")


@dataclass
class Dims:
    d_a: int = 16
    d_token: int = 24
    d_cond: int = 24
    d_joint: int = 32
    d_av: int = 32
    # room for the 10-token ablation row
    n_ctx: int = 16

    def validate(self, path: str) -> None:
        for f in fields(self):
            _check(getattr(self, f.name) >= 1, f"{path}.{f.name}", "must be >= 1")


@dataclass
class EncoderConfig:
    backend: str = "toy"
    seed: int = 0
    dims: Dims = field(default_factory=Dims)
    text_layers: int = 2
    text_heads: int = 4
    positional_encoding: bool = True
    n_mels: int = 16
    n_fft: int = 512
    hop_length: int = 256
    joint_bins: int = 8

    def validate(self, path: str) -> None:
        _check(self.backend in ("toy", "external"), f"{path}.backend", "must be 'toy' or 'external'")
        _check(
            self.dims.d_token % self.text_heads == 0,
            f"{path}.text_heads",
            "must divide dims.d_token",
        )
        _check(self.joint_bins <= self.dims.d_av, f"{path}.joint_bins", "must be <= dims.d_av")
        for name in ("text_layers", "n_mels", "n_fft", "hop_length", "joint_bins"):
            _check(getattr(self, name) >= 1, f"{path}.{name}", "must be >= 1")


@dataclass
class MappingConfig:
    n_tokens: int = 5
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    token_init_std: float = 0.02

    def validate(self, path: str) -> None:
        _check(self.n_tokens >= 1, f"{path}.n_tokens", "must be >= 1")
        _check(self.layers >= 1, f"{path}.layers", "must be >= 1")
        _check(self.heads >= 1, f"{path}.heads", "must be >= 1")
        _check(self.token_init_std > 0, f"{path}.token_init_std", "must be > 0")


@dataclass
class LoRAConfig:
    rank: int = 2
    alpha: float = 2.0
    # None selects every cross-attention projection
    targets: Optional[List[str]] = None

    def validate(self, path: str) -> None:
        _check(self.rank >= 1, f"{path}.rank", "must be >= 1")
        _check(self.alpha > 0, f"{path}.alpha", "must be > 0")


@dataclass
class SamplerConfig:
    steps: int = 100
    guidance_cond: float = 1.0
    guidance_img: float = 1.0

    def validate(self, path: str) -> None:
        _check(self.steps >= 1, f"{path}.steps", "must be >= 1")


@dataclass
class DiffusionConfig:
    seed: int = 0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    beta_schedule: str = "linear"
    latent_channels: int = 4
    downsample: int = 4
    base_width: int = 32
    attention_heads: int = 4
    prior_variance: float = 0.01
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self, path: str) -> None:
        _check(self.timesteps >= 2, f"{path}.timesteps", "must be >= 2")
        _check(0 < self.beta_start < self.beta_end < 1, f"{path}.beta_start",
               "need 0 < beta_start < beta_end < 1")
        _check(self.beta_schedule in ("linear", "scaled_linear"), f"{path}.beta_schedule",
               "must be 'linear' or 'scaled_linear'")
        _check(self.downsample >= 1, f"{path}.downsample", "must be >= 1")
        _check(self.latent_channels >= 3, f"{path}.latent_channels", "must be >= 3")
        _check(self.base_width % 8 == 0, f"{path}.base_width", "must be a multiple of 8")
        _check(self.base_width % self.attention_heads == 0, f"{path}.attention_heads",
               "must divide base_width")
        _check(self.prior_variance > 0, f"{path}.prior_variance", "must be > 0")


@dataclass
class LossConfig:
    lambda_nce: float = 1.0
    lambda_l1: float = 0.01
    temperature: float = 1.0
    l1_reduction: str = "sum"

    def validate(self, path: str) -> None:
        _check(self.lambda_nce >= 0, f"{path}.lambda_nce", "must be >= 0")
        _check(self.lambda_l1 >= 0, f"{path}.lambda_l1", "must be >= 0")
        _check(self.temperature > 0, f"{path}.temperature", "must be > 0")
        _check(self.l1_reduction in ("sum", "mean"), f"{path}.l1_reduction",
               "must be 'sum' or 'mean'")


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 48
    resolution: int = 256
    learning_rate: float = 1e-4
    early_stop_patience: int = 5
    eval_every: int = 250
    checkpoint_every: int = 1000
    val_fraction: float = 0.1
    use_nce: bool = True
    cond_dropout: float = 0.0
    log_every: int = 50

    def validate(self, path: str) -> None:
        _check(self.steps >= 1, f"{path}.steps", "must be >= 1")
        _check(self.batch_size >= 1, f"{path}.batch_size", "must be >= 1")
        _check(self.learning_rate >= 0, f"{path}.learning_rate", "must be >= 0")
        _check(self.early_stop_patience >= 1, f"{path}.early_stop_patience", "must be >= 1")
        _check(self.eval_every >= 1, f"{path}.eval_every", "must be >= 1")
        _check(self.checkpoint_every >= 1, f"{path}.checkpoint_every", "must be >= 1")
        _check(0 <= self.val_fraction < 1, f"{path}.val_fraction", "must be in [0, 1)")
        _check(0 <= self.cond_dropout < 1, f"{path}.cond_dropout", "must be in [0, 1)")
        _check(self.log_every >= 1, f"{path}.log_every", "must be >= 1")


@dataclass
class FilterThresholds:
    directional_min: float = 0.2
    iis_min: float = 0.7
    avs_min: float = 0.2
    real_iis_discard_above: float = 0.7
    # "comparative": discard when the inpainted image matches the audio at
    # least as well as the original; "absolute": discard when AVS < avs_min
    real_audio_rule: str = "comparative"

    def validate(self, path: str) -> None:
        for name in ("directional_min", "iis_min", "avs_min", "real_iis_discard_above"):
            _check(-1.0 <= getattr(self, name) <= 1.0, f"{path}.{name}", "must be in [-1, 1]")
        _check(self.real_audio_rule in ("comparative", "absolute"), f"{path}.real_audio_rule",
               "must be 'comparative' or 'absolute'")


@dataclass
class DatasetConfig:
    # None selects the six toy categories
    categories: Optional[List[str]] = None
    n_sources: int = 4
    seeds_per_pair: int = 5
    p_value: float = 0.5
    n_real: int = 12
    sample_rate: int = 16000
    clip_seconds: float = 0.5
    workers: int = 1

    def validate(self, path: str) -> None:
        _check(self.n_sources >= 1, f"{path}.n_sources", "must be >= 1")
        _check(self.seeds_per_pair >= 1, f"{path}.seeds_per_pair", "must be >= 1")
        _check(0 < self.p_value <= 1, f"{path}.p_value", "must be in (0, 1]")
        _check(self.n_real >= 0, f"{path}.n_real", "must be >= 0")
        _check(self.sample_rate > 0, f"{path}.sample_rate", "must be > 0")
        _check(self.clip_seconds > 0, f"{path}.clip_seconds", "must be > 0")
        _check(self.workers >= 1, f"{path}.workers", "must be >= 1")


@dataclass
class PathsConfig:
    # JSON {category: [floats]}; built from the toy text embedder when unset
    category_text_embeddings: Optional[str] = None


@dataclass
class GlobalConfig:
    seed: int = 0
    dtype: str = "float32"
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self, path: str) -> None:
        _check(self.dtype in ("float32", "float64"), "dtype", "must be 'float32' or 'float64'")
        _check(
            self.mapping.n_tokens <= self.encoders.dims.n_ctx,
            "mapping.n_tokens",
            f"must be <= encoders.dims.n_ctx ({self.encoders.dims.n_ctx})",
        )
        _check(
            self.dims.d_token % self.mapping.heads == 0,
            "mapping.heads",
            "must divide encoders.dims.d_token",
        )
        _check(
            self.train.resolution % self.diffusion.downsample == 0,
            "train.resolution",
            "must be a multiple of diffusion.downsample",
        )
        _check(
            self.train.resolution // self.diffusion.downsample >= 4,
            "train.resolution",
            "latent must be at least 4 x 4",
        )

    @property
    def dims(self) -> Dims:
        return self.encoders.dims

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def _check(condition: bool, key_path: str, message: str) -> None:
    if not condition:
        raise ConfigError(key_path, message)


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _convert(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)

    if origin is Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0], path)

    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        (item,) = typing.get_args(hint)
        return [_convert(v, item, f"{path}[{i}]") for i, v in enumerate(value)]

    if is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return config_from_dict(value, hint, path)

    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value

    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value

    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)

    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value

    raise ConfigError(path, f"unsupported field type {hint}")


def config_from_dict(data: Dict[str, Any], cls: Type[T] = GlobalConfig, path: str = "") -> T:
    """Builds ``cls`` from ``data`` over the dataclass defaults."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}

    for key in data:
        if key not in known:
            raise ConfigError(_join(path, key), "unknown key")

    kwargs = {key: _convert(value, hints[key], _join(path, key)) for key, value in data.items()}
    config = cls(**kwargs)

    if hasattr(config, "validate"):
        config.validate(path)

    return config


def load_config(path: Union[str, Path]) -> GlobalConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError("config", f"file '{path}' does not exist")
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON at line {e.lineno}: {e.msg}")

    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")

    return config_from_dict(data)


def config_to_dict(config: Any) -> Dict[str, Any]:
    return asdict(config)
