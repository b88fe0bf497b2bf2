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


"""Deterministic stand-ins for the sound events and pictures of the dataset.

Each toy category owns one of ``n_bins`` mel bands and the matching hue bin:
its sound is a tone at the band centre and its visual signature is the hue
``(bin + 0.5) * 360 / n_bins``. The toy joint embedder reads exactly these two
properties, so a tone and a picture of the same category line up.
"""

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List, Optional, Tuple

import cv2
import librosa
import numpy as np

from sound_brush.errors import ConfigError
from sound_brush.structures import AudioClip, Image


@dataclass(frozen=True)
class ToyCategory:
    name: str
    keywords: Tuple[str, ...]
    bin: int


def stable_seed(*parts) -> int:
    """63-bit seed from the sha256 of the given parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(digest.digest()[:8], "little") & ((1 << 63) - 1)


def _load_fixture() -> Dict:
    fixture = resources.files("sound_brush") / "resource" / "categories.json"
    return json.loads(fixture.read_text(encoding="utf-8"))


def load_categories() -> List[ToyCategory]:
    return [
        ToyCategory(c["name"], tuple(c["keywords"]), int(c["bin"]))
        for c in _load_fixture()["toy"]
    ]


def environmental_categories() -> List[str]:
    return list(_load_fixture()["vggsound_environmental"])


def background_bin() -> int:
    return int(_load_fixture()["background_bin"])


def select_categories(names: Optional[List[str]]) -> List[ToyCategory]:
    categories = load_categories()
    if names is None:
        return categories

    by_name = {c.name: c for c in categories}
    selected = []
    for i, name in enumerate(names):
        if name not in by_name:
            raise ConfigError(f"dataset.categories[{i}]", f"unknown toy category '{name}'")
        selected.append(by_name[name])
    return selected


def category_by_name(name: str) -> ToyCategory:
    for c in load_categories():
        if c.name == name:
            return c
    raise ConfigError("category", f"unknown toy category '{name}'")


def band_center_hz(bin: int, n_bins: int, sample_rate: int) -> float:
    """Centre of mel band ``bin`` when [0, sr/2] is split into ``n_bins`` bands."""
    edges = librosa.mel_frequencies(n_mels=n_bins + 2, fmin=0.0, fmax=sample_rate / 2.0)
    return float(edges[bin + 1])


def bin_color(bin: int, n_bins: int, saturation: float = 1.0) -> np.ndarray:
    """Fully bright RGB colour at the centre of hue bin ``bin``."""
    hsv = np.array([[[(bin + 0.5) * 360.0 / n_bins, saturation, 1.0]]], dtype=np.float32)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0].astype(np.float64)


def solid_image(color: np.ndarray, size: int = 32) -> Image:
    return Image(np.broadcast_to(np.asarray(color, dtype=np.float64), (size, size, 3)).copy())


def category_tone(
    category: ToyCategory,
    seed: int,
    sample_rate: int = 16000,
    seconds: float = 0.5,
    n_bins: int = 8,
) -> AudioClip:
    rng = np.random.default_rng(stable_seed("tone", category.name, seed))
    freq = band_center_hz(category.bin, n_bins, sample_rate)
    t = np.arange(int(round(sample_rate * seconds))) / sample_rate
    amplitude = 0.3 + 0.2 * rng.random()
    phase = 2.0 * np.pi * rng.random()
    samples = amplitude * np.sin(2.0 * np.pi * freq * t + phase)
    samples += 0.002 * rng.standard_normal(t.size)
    return AudioClip(np.clip(samples, -1.0, 1.0), sample_rate)


def smooth_texture(
    rng: np.random.Generator,
    size: int,
    grid: int = 4,
    chroma: float = 0.04,
    tint: Optional[np.ndarray] = None,
    tint_strength: float = 0.0,
) -> np.ndarray:
    """Low-saturation texture: a random coarse grid upsampled with bicubic interpolation."""
    luminance = rng.uniform(0.3, 0.7, (grid, grid, 1))
    coarse = luminance + rng.uniform(-chroma, chroma, (grid, grid, 3))
    if tint is not None:
        coarse = (1.0 - tint_strength) * coarse + tint_strength * tint
    fine = cv2.resize(coarse.astype(np.float32), (size, size), interpolation=cv2.INTER_CUBIC)
    return np.clip(fine.astype(np.float64), 0.0, 1.0)


def edit_strength(p_value: float) -> float:
    """Blend weight toward the category colour; p_value is the share of source structure kept."""
    return 0.3 * (1.0 - p_value)


def render_edit_pair(
    prompt: str,
    category: ToyCategory,
    seed: int,
    size: int,
    p_value: float = 0.5,
    n_bins: int = 8,
) -> Tuple[Image, Image]:
    """Source render keyed on (prompt, seed) and its target tinted toward the category hue."""
    rng = np.random.default_rng(stable_seed("render", prompt, seed))
    before = smooth_texture(rng, size)
    alpha = edit_strength(p_value)
    after = (1.0 - alpha) * before + alpha * bin_color(category.bin, n_bins)
    return Image(before), Image(np.clip(after, 0.0, 1.0))


def object_rectangle(size: int, fraction: float) -> Tuple[int, int]:
    """Start and stop of the centred square covering ``fraction`` of each side."""
    side = max(1, int(round(size * fraction)))
    start = (size - side) // 2
    return start, start + side


def render_real_scene(
    category: ToyCategory,
    seed: int,
    size: int,
    object_fraction: float = 0.75,
    n_bins: int = 8,
) -> Image:
    """Scene with a background in the unused hue bin and a centred object in the category hue."""
    rng = np.random.default_rng(stable_seed("scene", category.name, seed))
    scene = smooth_texture(
        rng, size, tint=bin_color(background_bin(), n_bins, 0.6), tint_strength=0.35
    )
    texture = smooth_texture(rng, size)
    start, stop = object_rectangle(size, object_fraction)
    color = bin_color(category.bin, n_bins)
    scene[start:stop, start:stop] = 0.2 * texture[start:stop, start:stop] + 0.8 * color
    return Image(np.clip(scene, 0.0, 1.0))
