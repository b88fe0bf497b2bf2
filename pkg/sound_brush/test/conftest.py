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


import numpy as np
import pytest

from sound_brush import toy_world
from sound_brush.config import GlobalConfig, config_from_dict
from sound_brush.encoders import build_encoders
from sound_brush.model import SoundBrush
from sound_brush.structures import EditTriplet, Subset


SMALL = {
    "dtype": "float64",
    "encoders": {
        "dims": {"d_a": 16, "d_token": 24, "d_cond": 24, "d_joint": 32, "d_av": 32, "n_ctx": 8},
        "n_fft": 256,
        "hop_length": 128,
    },
    "mapping": {"n_tokens": 5},
    "diffusion": {"timesteps": 100, "base_width": 16, "sampler": {"steps": 4}},
    "losses": {"lambda_nce": 0.1, "lambda_l1": 0.001},
    "train": {
        "steps": 20,
        "batch_size": 4,
        "resolution": 16,
        "learning_rate": 0.001,
        "eval_every": 10,
        "checkpoint_every": 10,
        "val_fraction": 0.0,
        "log_every": 5,
    },
    "dataset": {"n_sources": 1, "seeds_per_pair": 2, "n_real": 4, "clip_seconds": 0.25},
}


def small_config(**overrides) -> GlobalConfig:
    data = {key: dict(value) if isinstance(value, dict) else value for key, value in SMALL.items()}
    for block, values in overrides.items():
        if isinstance(values, dict):
            data[block] = {**data.get(block, {}), **values}
        else:
            data[block] = values
    return config_from_dict(data)


def toy_triplets(n: int = 8, size: int = 16, clip_seconds: float = 0.25):
    """Synthetic (before, after, tone) triplets cycling over the toy categories."""
    categories = toy_world.load_categories()
    triplets = []
    for i in range(n):
        category = categories[i % len(categories)]
        before, after = toy_world.render_edit_pair(f"Sunny street {i}", category, i, size)
        audio = toy_world.category_tone(category, i, seconds=clip_seconds)
        triplets.append(EditTriplet(before, after, audio, category.name, Subset.SYNTHETIC, i))
    return triplets


@pytest.fixture
def config() -> GlobalConfig:
    return small_config()


@pytest.fixture
def encoders(config):
    return build_encoders(config)


@pytest.fixture
def model(config, encoders) -> SoundBrush:
    return SoundBrush(config, encoders=encoders)


@pytest.fixture
def triplets():
    return toy_triplets()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
