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


"""PNG and WAV helpers."""

from pathlib import Path
from typing import Union

import cv2
import numpy as np
import soundfile as sf

from sound_brush.errors import InvalidInputError
from sound_brush.structures import AudioClip, Image

PathLike = Union[str, Path]


def read_image(path: PathLike) -> Image:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise InvalidInputError(f"cannot read image '{path}'")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return Image(rgb.astype(np.float64) / 255.0)


def write_image(path: PathLike, img: Image) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rgb = np.round(img.pixels * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise InvalidInputError(f"cannot write image '{path}'")


def read_audio(path: PathLike, gain: float = 1.0) -> AudioClip:
    try:
        samples, sample_rate = sf.read(str(path), dtype="float64", always_2d=False)
    except (RuntimeError, OSError) as e:
        raise InvalidInputError(f"cannot read audio '{path}': {e}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples, sample_rate, gain)


def write_audio(path: PathLike, clip: AudioClip) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), clip.samples.astype(np.float32), clip.sample_rate, subtype="FLOAT")
