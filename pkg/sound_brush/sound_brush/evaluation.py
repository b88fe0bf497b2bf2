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


import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import scipy.linalg
import torch
from typing_extensions import Protocol

from sound_brush.errors import (
    InvalidInputError,
    MOSFormatError,
    NumericalError,
    ShapeError,
)
from sound_brush.structures import (
    AudioClip,
    EditTriplet,
    EmbeddingSpace,
    EmbeddingVector,
    Image,
    cosine_similarity,
)

logger = logging.getLogger(__name__)

FID_EPS = 1e-6


class ImageEmbedder(Protocol):

    def encode_image(self, img: Image) -> EmbeddingVector:
        ...


class JointEmbedder(Protocol):

    def joint_embed(self, x: Union[AudioClip, Image]) -> EmbeddingVector:
        ...


class Editor(Protocol):

    def edit(self, src: Image, audio: AudioClip, steps: Optional[int] = None, seed: int = 0) -> Image:
        ...


def avs(audio: AudioClip, edited: Image, embedder: JointEmbedder) -> float:
    return cosine_similarity(embedder.joint_embed(audio), embedder.joint_embed(edited))


def iis(edited: Image, reference: Image, embedder: ImageEmbedder) -> float:
    return cosine_similarity(embedder.encode_image(edited), embedder.encode_image(reference))


def tvs(category_text_emb: EmbeddingVector, edited: Image, embedder: ImageEmbedder) -> float:
    return cosine_similarity(category_text_emb, embedder.encode_image(edited))


def mean(values: Sequence[float]) -> float:
    if not values:
        raise InvalidInputError("cannot average an empty list")
    return math.fsum(values) / len(values)


def _as_features(features: Any) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2:
        raise ShapeError(f"features must be N x d, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InvalidInputError("need at least two feature vectors per set")
    return x


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    w, v = scipy.linalg.eigh(matrix)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(features_real: Any, features_gen: Any, eps: float = FID_EPS) -> float:
    """Frechet distance between Gaussian fits of two N x d feature sets.

    ``Tr((S1 S2)^1/2)`` is computed from the eigenvalues of the symmetric
    ``S1^1/2 S2 S1^1/2``; small negative eigenvalues are clipped to zero.
    """
    x1, x2 = _as_features(features_real), _as_features(features_gen)
    if x1.shape[1] != x2.shape[1]:
        raise ShapeError(f"feature dims differ: {x1.shape[1]} vs {x2.shape[1]}")

    d = x1.shape[1]
    mu1, mu2 = x1.mean(axis=0), x2.mean(axis=0)
    sigma1 = np.atleast_2d(np.cov(x1, rowvar=False)) + eps * np.eye(d)
    sigma2 = np.atleast_2d(np.cov(x2, rowvar=False)) + eps * np.eye(d)

    root1 = _psd_sqrt(sigma1)
    product = root1 @ sigma2 @ root1
    product = (product + product.T) / 2.0
    w = scipy.linalg.eigh(product, eigvals_only=True)

    scale = max(float(np.abs(w).max()), eps)
    if w.min() < -1e-6 * scale:
        raise NumericalError(
            f"covariance product is not PSD after regularization: min eigenvalue {w.min():.3e}, "
            f"condition numbers {np.linalg.cond(sigma1):.3e} / {np.linalg.cond(sigma2):.3e}"
        )

    trace_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * trace_sqrt)
    return max(value, 0.0)


@dataclass
class MetricsReport:
    avs: float
    iis: float
    tvs: float
    fid: float
    n_samples: int

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise InvalidInputError("a metrics report needs at least one sample")
        for name in ("avs", "iis", "tvs", "fid"):
            if not math.isfinite(getattr(self, name)):
                raise NumericalError(f"{name} is not finite")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def _identity(triplet: EditTriplet) -> Tuple[str, int, str]:
    digest = hashlib.sha256(triplet.before.pixels.tobytes()).hexdigest()
    return triplet.category, triplet.seed, digest


def evaluate_edits(
    triplets: Sequence[EditTriplet],
    edited: Sequence[Image],
    encoders: Any,
    category_text_embeddings: Dict[str, EmbeddingVector],
) -> MetricsReport:
    """Metrics of already edited images; ``edited[i]`` is the edit of ``triplets[i].before``."""
    if not triplets or len(triplets) != len(edited):
        raise InvalidInputError(f"{len(triplets)} triplets for {len(edited)} edited images")

    # sorted by the triplet identity so the report does not depend on sample order
    order = sorted(range(len(triplets)), key=lambda i: _identity(triplets[i]))
    avs_values, iis_values, tvs_values = [], [], []
    for i in order:
        triplet, image = triplets[i], edited[i]
        if triplet.category not in category_text_embeddings:
            raise InvalidInputError(f"no text embedding for category '{triplet.category}'")
        avs_values.append(avs(triplet.audio, image, encoders))
        iis_values.append(iis(image, triplet.after, encoders))
        tvs_values.append(tvs(category_text_embeddings[triplet.category], image, encoders))

    real = np.stack([encoders.encode_image(triplets[i].after).values.double().numpy() for i in order])
    generated = np.stack([encoders.encode_image(edited[i]).values.double().numpy() for i in order])

    return MetricsReport(
        avs=mean(avs_values),
        iis=mean(iis_values),
        tvs=mean(tvs_values),
        fid=fid(real, generated),
        n_samples=len(triplets),
    )


def evaluate_dataset(
    triplets: Sequence[EditTriplet],
    model: Any,
    category_text_embeddings: Optional[Dict[str, EmbeddingVector]] = None,
    steps: Optional[int] = None,
) -> MetricsReport:
    """Edits every ``before`` with its own audio and seed, then scores the edits."""
    if category_text_embeddings is None:
        category_text_embeddings = category_embeddings(model.encoders, {t.category for t in triplets})
    edited = [model.edit(t.before, t.audio, steps=steps, seed=t.seed) for t in triplets]
    report = evaluate_edits(triplets, edited, model.encoders, category_text_embeddings)
    logger.info(f"evaluated {report.n_samples} samples: {report.to_dict()}")
    return report


def category_embeddings(encoders: Any, categories: Sequence[str]) -> Dict[str, EmbeddingVector]:
    return {name: encoders.embed_text(name) for name in sorted(categories)}


def load_category_embeddings(path: Union[str, Path]) -> Dict[str, EmbeddingVector]:
    """JSON ``{category: [floats]}`` fixture."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise InvalidInputError(f"cannot read category embeddings {path}: {e.strerror or e}")
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"category embeddings {path} are not valid JSON: {e.msg} at line {e.lineno}")
    if not isinstance(data, dict):
        raise InvalidInputError(f"category embeddings {path} must be a JSON object")
    return {
        name: EmbeddingVector(torch.tensor(values, dtype=torch.float64), EmbeddingSpace.JOINT_VL)
        for name, values in data.items()
    }


@dataclass
class VolumeSweep:
    gains: List[float]
    edited: List[Image]
    avs: List[float]

    @property
    def nondecreasing(self) -> bool:
        return all(b >= a for a, b in zip(self.avs, self.avs[1:]))

    def to_dict(self) -> Dict[str, Any]:
        return {"gains": self.gains, "avs": self.avs, "nondecreasing": self.nondecreasing}


def volume_sweep(
    src: Image,
    audio: AudioClip,
    gains: Sequence[float],
    model: Any,
    seed: int = 0,
    steps: Optional[int] = None,
) -> VolumeSweep:
    """One edit per gain with the same seed; AVS is measured against the unscaled clip."""
    gains = [float(g) for g in gains]
    if not gains or any(g <= 0 for g in gains):
        raise InvalidInputError(f"gains must be positive, got {gains}")
    if any(b <= a for a, b in zip(gains, gains[1:])):
        raise InvalidInputError(f"gains must be ascending, got {gains}")

    edited, trace = [], []
    for gain in gains:
        image = model.edit(src, audio.with_gain(gain), steps=steps, seed=seed)
        edited.append(image)
        trace.append(avs(audio, image, model.encoders))
        logger.info(f"volume sweep: gain={gain}, avs={trace[-1]:.4f}")
    return VolumeSweep(gains, edited, trace)


MOS_COLUMNS = ("rater_id", "sample_id", "method", "question", "rating")


@dataclass
class MOSTable:
    entries: Dict[Tuple[str, str], Dict[str, float]] = field(default_factory=dict)
    rejected: int = 0
    errors: List[Dict[str, Any]] = field(default_factory=list)

    def mean(self, method: str, question: str) -> float:
        return self.entries[(method, question)]["mean"]

    def count(self, method: str, question: str) -> int:
        return int(self.entries[(method, question)]["count"])

    def to_dict(self) -> Dict[str, Any]:
        table: Dict[str, Dict[str, Dict[str, float]]] = {}
        for (method, question), entry in sorted(self.entries.items()):
            table.setdefault(method, {})[question] = dict(entry)
        return {"methods": table, "rejected": self.rejected, "errors": self.errors}


def mos_aggregate(responses: Union[str, Path, TextIO]) -> MOSTable:
    """Per-(method, question) mean and count of 1-5 ratings."""
    if isinstance(responses, (str, Path)):
        try:
            f = open(responses, "r", encoding="utf-8", newline="")
        except OSError as e:
            raise InvalidInputError(f"cannot read MOS responses {responses}: {e.strerror or e}")
        with f:
            return mos_aggregate(f)

    reader = csv.DictReader(responses)
    if reader.fieldnames is None or any(c not in reader.fieldnames for c in MOS_COLUMNS):
        raise MOSFormatError(1, f"header must contain {list(MOS_COLUMNS)}, got {reader.fieldnames}")

    ratings: Dict[Tuple[str, str], List[int]] = {}
    table = MOSTable()
    for row in reader:
        line = reader.line_num
        if None in row or any(row.get(c) in (None, "") for c in MOS_COLUMNS):
            raise MOSFormatError(line, f"malformed row {row}")
        try:
            rating = int(row["rating"].strip())
        except ValueError:
            raise MOSFormatError(line, f"rating {row['rating']!r} is not an integer")

        if not 1 <= rating <= 5:
            table.rejected += 1
            table.errors.append({"line": line, "rating": rating, "reason": "rating outside 1..5"})
            logger.warning(f"mos: line {line} rejected, rating {rating} outside 1..5")
            continue
        ratings.setdefault((row["method"].strip(), row["question"].strip()), []).append(rating)

    for key, values in ratings.items():
        table.entries[key] = {"mean": math.fsum(values) / len(values), "count": len(values)}
    return table
