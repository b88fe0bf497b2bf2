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


"""Checkpoint container.

Only the trainable state (mapping network, LoRA factors, optimizer) is
stored as tensors; frozen modules are stored as their seed and fingerprint
and rebuilt from the config snapshot on load.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch

from sound_brush.config import config_from_dict, config_to_dict
from sound_brush.errors import CheckpointError, ConfigError
from sound_brush.model import SoundBrush

logger = logging.getLogger(__name__)

FORMAT = "sound_brush/1"
REQUIRED_KEYS = (
    "format",
    "mapping_network",
    "lora",
    "optimizer",
    "step",
    "config",
    "log_tail",
    "schedule",
    "denoiser",
    "frozen",
)


def checkpoint_payload(
    model: SoundBrush,
    step: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
    log_tail: Optional[List[Dict[str, Any]]] = None,
    rng_state: Optional[torch.Tensor] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    fingerprints = model.frozen_fingerprints()
    return {
        "format": FORMAT,
        "mapping_network": model.mapping.state_dict(),
        "lora": {
            "rank": model.adapter.rank,
            "alpha": model.adapter.alpha,
            "targets": model.adapter.targets(),
            "state": model.adapter.state_dict(),
        },
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "config": config_to_dict(model.config),
        "log_tail": list(log_tail or []),
        "schedule": model.schedule.to_dict(),
        "denoiser": {
            "seed": model.config.diffusion.seed,
            "fingerprint": fingerprints.pop("denoiser"),
        },
        "frozen": fingerprints,
        "rng": rng_state,
        "extra": dict(extra or {}),
    }


def save_checkpoint(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logger.info(f"Saved checkpoint at step {payload['step']} to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / "last.pt"
    if not path.exists():
        raise CheckpointError("checkpoint does not exist", str(path))

    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint: {e}", str(path))

    missing = [k for k in REQUIRED_KEYS if k not in payload]
    if missing:
        raise CheckpointError(f"missing entries {missing}", str(path))
    if payload["format"] != FORMAT:
        raise CheckpointError(f"unsupported format {payload['format']!r}", str(path))
    return payload


def restore_model(payload: Dict[str, Any], path: str = "") -> SoundBrush:
    """Rebuilds the model from the config snapshot and checks the frozen fingerprints."""
    try:
        config = config_from_dict(payload["config"])
    except ConfigError as e:
        raise CheckpointError(f"invalid config snapshot: {e}", path)

    model = SoundBrush(config)

    fingerprints = model.frozen_fingerprints()
    expected = dict(payload["frozen"])
    expected["denoiser"] = payload["denoiser"]["fingerprint"]
    changed = sorted(k for k, v in expected.items() if fingerprints.get(k) != v)
    if changed:
        raise CheckpointError(f"frozen modules differ from the checkpoint: {changed}", path)

    model.mapping.load_state_dict(payload["mapping_network"])
    model.adapter.load_state_dict(payload["lora"]["state"])
    return model
