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


"""Training-set construction.

Synthetic subset: source prompts, keyword-spliced target prompts, five
renders per prompt pair, then the directional / image / audio-visual
filters. Real subset: localize the sounding object, inpaint it away and use
(inpainted, original) as (before, after) when both discard rules pass.
"""

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
from tqdm import tqdm
from typing_extensions import Protocol

from sound_brush import media, toy_world
from sound_brush.config import FilterThresholds, GlobalConfig, config_from_dict
from sound_brush.encoders import Encoders
from sound_brush.errors import (
    ConfigError,
    GenerationError,
    InvalidInputError,
    ManifestError,
    PromptClientError,
    SpaceMismatchError,
)
from sound_brush.structures import (
    AudioClip,
    EditTriplet,
    EmbeddingSpace,
    EmbeddingVector,
    Image,
    Subset,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_template(name: str) -> str:
    template = resources.files("sound_brush") / "resource" / f"{name}_prompt_template.txt"
    return template.read_text(encoding="utf-8")


@dataclass(frozen=True)
class PromptPair:
    source_prompt: str
    target_prompt: str
    keyword: str
    category: str

    def __post_init__(self) -> None:
        for f in fields(self):
            if not getattr(self, f.name).strip():
                raise InvalidInputError(f"prompt pair field '{f.name}' is empty")


class PromptClient(Protocol):

    def complete(self, prompt: str) -> str:
        ...


class PairGenerator(Protocol):

    def generate(self, pair: PromptPair, seed: int, p_value: float, size: int) -> Tuple[Image, Image]:
        ...


class Localizer(Protocol):

    def localize(self, img: Image, audio: AudioClip) -> np.ndarray:
        ...


class Inpainter(Protocol):

    def inpaint(self, img: Image, mask: np.ndarray) -> Image:
        ...


class ToyPromptClient:
    """Answers the two prompt templates without a language model."""

    WEATHER = ("Sunny", "Sunny", "Cloudy", "Sunny", "Foggy")
    PLACES = (
        "city street",
        "mountain lake",
        "desert road",
        "harbor pier",
        "village square",
        "forest trail",
        "beach boardwalk",
        "train station",
    )

    def complete(self, prompt: str) -> str:
        wanted = re.search(r"Make (\d+) new diverse descriptions", prompt)
        if wanted:
            n = int(wanted.group(1))
            return "\n".join(
                f"{i + 1}. {self.WEATHER[i % len(self.WEATHER)]} {self.PLACES[i % len(self.PLACES)]}"
                for i in range(n)
            )

        sources = re.findall(r"^- Source\s*:\s*(.+)$", prompt, flags=re.MULTILINE)
        keywords = re.findall(r"^- Keyword\s*:\s*(.+)$", prompt, flags=re.MULTILINE)
        if not sources or not keywords:
            raise ValueError("prompt matches neither template")
        source, keyword = sources[-1].strip(), keywords[-1].strip()
        return f"- Label : {keyword}\n- Target : {splice_keyword(source, keyword)}"


def splice_keyword(source: str, keyword: str) -> str:
    """Replaces the leading weather word of ``source`` by ``keyword``."""
    words = source.split()
    if len(words) < 2:
        return f"{keyword} {source}".strip()
    return " ".join([keyword] + words[1:])


def _ask(llm: PromptClient, prompt: str, retries: int, source: str, keyword: str) -> str:
    last_error: Optional[Exception] = None
    for attempt in range(retries + 1):
        try:
            answer = llm.complete(prompt)
            if answer and answer.strip():
                return answer
            last_error = ValueError("empty answer")
        except Exception as e:
            last_error = e
        logger.warning(f"prompt client attempt {attempt + 1} failed: {last_error}")
    raise PromptClientError(f"prompt client failed: {last_error}", source, keyword)


def generate_source_prompts(n: int, llm: PromptClient, retries: int = 2) -> List[str]:
    answer = _ask(llm, load_template("source").format(n=n), retries, "", "")
    prompts = []
    for line in answer.splitlines():
        line = re.sub(r"^\s*(\d+[.)]|-)\s*", "", line).strip().strip('"')
        if line:
            prompts.append(line)
    if len(prompts) < n:
        raise PromptClientError(f"asked for {n} source prompts, got {len(prompts)}")
    return prompts[:n]


def keyword_categories() -> Dict[str, str]:
    return {k: c.name for c in toy_world.load_categories() for k in c.keywords}


def generate_prompt_pairs(
    sources: Sequence[str],
    keywords: Sequence[str],
    llm: PromptClient,
    categories: Optional[Dict[str, str]] = None,
    retries: int = 2,
) -> List[PromptPair]:
    """One pair per (source, keyword); ``categories`` maps keywords to sound categories."""
    categories = keyword_categories() if categories is None else categories
    template = load_template("target")

    pairs = []
    for source in sources:
        for keyword in keywords:
            prompt = template.replace("{source}", source).replace("{keyword}", keyword)
            answer = _ask(llm, prompt, retries, source, keyword)
            targets = re.findall(r"Target\s*:\s*(.+)", answer)
            if not targets or "Fill in" in targets[-1]:
                raise PromptClientError("answer carries no target prompt", source, keyword)
            pairs.append(
                PromptPair(source, targets[-1].strip(), keyword, categories.get(keyword, keyword))
            )
    return pairs


class ToyPairGenerator:
    """Procedural renders keyed on (source prompt, seed); the target is tinted toward the category hue."""

    def __init__(self, n_bins: int = 8) -> None:
        self.n_bins = n_bins

    def generate(self, pair: PromptPair, seed: int, p_value: float, size: int) -> Tuple[Image, Image]:
        try:
            category = toy_world.category_by_name(pair.category)
        except ConfigError as e:
            raise GenerationError(str(e))
        return toy_world.render_edit_pair(pair.source_prompt, category, seed, size, p_value, self.n_bins)


def pair_seeds(pair: PromptPair, n: int = 5) -> List[int]:
    return [toy_world.stable_seed("pair", pair.source_prompt, pair.keyword, i) % (2**31) for i in range(n)]


def generate_image_pair(
    pair: PromptPair, seed: int, gen: PairGenerator, p_value: float = 0.5, size: int = 32
) -> Tuple[Image, Image]:
    try:
        before, after = gen.generate(pair, seed, p_value, size)
    except GenerationError:
        raise
    except Exception as e:
        raise GenerationError(f"generator failed for {pair.target_prompt!r} seed {seed}: {e}")
    if before.pixels.shape != after.pixels.shape:
        raise GenerationError(f"generator returned mismatched sizes for seed {seed}")
    return before, after


@dataclass(frozen=True)
class Directional:
    value: float
    degenerate: bool


def directional_similarity(
    src_img: EmbeddingVector,
    tgt_img: EmbeddingVector,
    src_txt: EmbeddingVector,
    tgt_txt: EmbeddingVector,
) -> Directional:
    """Cosine between the image-embedding change and the text-embedding change."""
    for v in (src_img, tgt_img, src_txt, tgt_txt):
        if v.space != EmbeddingSpace.JOINT_VL:
            raise SpaceMismatchError(f"directional similarity needs JOINT_VL, got {v.space.value}")

    image_delta = (tgt_img.values - src_img.values).double()
    text_delta = (tgt_txt.values - src_txt.values).double()
    n_img = torch.linalg.vector_norm(image_delta)
    n_txt = torch.linalg.vector_norm(text_delta)
    if n_img == 0 or n_txt == 0:
        return Directional(0.0, True)

    value = float(torch.clamp(torch.dot(image_delta, text_delta) / (n_img * n_txt), -1.0, 1.0))
    return Directional(value, False)


def safe_cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine with a zero-norm operand reported as 0."""
    if a.space != b.space:
        raise SpaceMismatchError(f"cannot compare {a.space.value} with {b.space.value} embeddings")
    u, v = a.values.double(), b.values.double()
    nu, nv = torch.linalg.vector_norm(u), torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(torch.clamp(torch.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class FilterDecision:
    keep: bool
    reasons: List[Dict[str, Any]] = field(default_factory=list)
    measurements: Dict[str, Any] = field(default_factory=dict)

    @property
    def reason_ids(self) -> List[str]:
        return [r["rule"] for r in self.reasons]


@dataclass(frozen=True)
class SyntheticMeasurements:
    dir_sim: float
    iis: float
    avs: float
    dir_degenerate: bool = False


@dataclass(frozen=True)
class RealMeasurements:
    iis: float
    avs_original: float
    avs_inpainted: float
    mask_area: float = 1.0


def _reason(rule: str, value: Optional[float], threshold: Optional[float]) -> Dict[str, Any]:
    return {"rule": rule, "value": value, "threshold": threshold}


def decide_synthetic(m: SyntheticMeasurements, thresholds: FilterThresholds) -> FilterDecision:
    reasons = []
    if m.dir_degenerate or m.dir_sim < thresholds.directional_min:
        reasons.append(_reason("directional", m.dir_sim, thresholds.directional_min))
    if m.iis < thresholds.iis_min:
        reasons.append(_reason("iis", m.iis, thresholds.iis_min))
    if m.avs < thresholds.avs_min:
        reasons.append(_reason("avs", m.avs, thresholds.avs_min))
    return FilterDecision(not reasons, reasons, asdict(m))


def decide_real(m: RealMeasurements, thresholds: FilterThresholds) -> FilterDecision:
    reasons = []
    if m.mask_area <= 0:
        reasons.append(_reason("no_source_localized", m.mask_area, 0.0))
        return FilterDecision(False, reasons, asdict(m))

    if m.iis > thresholds.real_iis_discard_above:
        reasons.append(_reason("not_inpainted", m.iis, thresholds.real_iis_discard_above))
    if thresholds.real_audio_rule == "comparative":
        if m.avs_inpainted >= m.avs_original:
            reasons.append(_reason("residual_object", m.avs_inpainted, m.avs_original))
    elif m.avs_original < thresholds.avs_min:
        reasons.append(_reason("avs", m.avs_original, thresholds.avs_min))
    return FilterDecision(not reasons, reasons, asdict(m))


def measure_synthetic(
    triplet: EditTriplet, source_prompt: str, target_prompt: str, encoders: Encoders
) -> SyntheticMeasurements:
    src = encoders.encode_image(triplet.before)
    tgt = encoders.encode_image(triplet.after)
    directional = directional_similarity(
        src, tgt, encoders.embed_text(source_prompt), encoders.embed_text(target_prompt)
    )
    return SyntheticMeasurements(
        dir_sim=directional.value,
        iis=safe_cosine(src, tgt),
        avs=safe_cosine(encoders.joint_embed(triplet.audio), encoders.joint_embed(triplet.after)),
        dir_degenerate=directional.degenerate,
    )


def filter_synthetic(
    triplet: EditTriplet,
    thresholds: FilterThresholds,
    encoders: Encoders,
    source_prompt: str,
    target_prompt: str,
) -> FilterDecision:
    return decide_synthetic(measure_synthetic(triplet, source_prompt, target_prompt, encoders), thresholds)


class FixedRectangleLocalizer:
    """Centred square covering ``fraction`` of each side."""

    def __init__(self, fraction: float = 0.75) -> None:
        self.fraction = fraction

    def localize(self, img: Image, audio: AudioClip) -> np.ndarray:
        mask = np.zeros((img.height, img.width), dtype=bool)
        if self.fraction <= 0:
            return mask
        r0, r1 = toy_world.object_rectangle(img.height, self.fraction)
        c0, c1 = toy_world.object_rectangle(img.width, self.fraction)
        mask[r0:r1, c0:c1] = True
        return mask


class MeanFillInpainter:
    """Fills the masked region with the mean colour of the rest of the image."""

    def inpaint(self, img: Image, mask: np.ndarray) -> Image:
        pixels = img.pixels.copy()
        outside = ~mask
        fill = pixels[outside].mean(axis=0) if outside.any() else np.full(3, 0.5)
        pixels[mask] = fill
        return Image(pixels)


class TeleaInpainter:

    def __init__(self, radius: float = 3.0) -> None:
        self.radius = radius

    def inpaint(self, img: Image, mask: np.ndarray) -> Image:
        bgr = cv2.cvtColor(np.round(img.pixels * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
        filled = cv2.inpaint(bgr, mask.astype(np.uint8) * 255, self.radius, cv2.INPAINT_TELEA)
        return Image(cv2.cvtColor(filled, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0)


INPAINTERS = {"mean": MeanFillInpainter, "telea": TeleaInpainter}


def measure_real(
    original: Image, inpainted: Image, audio: AudioClip, mask: np.ndarray, encoders: Encoders
) -> RealMeasurements:
    audio_emb = encoders.joint_embed(audio)
    return RealMeasurements(
        iis=safe_cosine(encoders.encode_image(inpainted), encoders.encode_image(original)),
        avs_original=safe_cosine(audio_emb, encoders.joint_embed(original)),
        avs_inpainted=safe_cosine(audio_emb, encoders.joint_embed(inpainted)),
        mask_area=float(mask.mean()),
    )


def build_real_triplet(
    img: Image,
    audio: AudioClip,
    localizer: Localizer,
    inpainter: Inpainter,
    encoders: Encoders,
    thresholds: FilterThresholds,
    category: str = "",
    seed: int = 0,
) -> Tuple[Optional[EditTriplet], FilterDecision]:
    """(inpainted, original) triplet, or ``None`` with the discard reasons."""
    mask = np.asarray(localizer.localize(img, audio), dtype=bool)
    if mask.shape != (img.height, img.width):
        raise InvalidInputError(f"localizer mask {mask.shape} does not match the image")
    if not mask.any():
        return None, decide_real(RealMeasurements(0.0, 0.0, 0.0, mask_area=0.0), thresholds)

    inpainted = inpainter.inpaint(img, mask)
    decision = decide_real(measure_real(img, inpainted, audio, mask, encoders), thresholds)
    if not decision.keep:
        return None, decision

    triplet = EditTriplet(
        before=inpainted,
        after=img,
        audio=audio,
        category=category,
        subset=Subset.REAL,
        seed=seed,
        provenance={"mask": mask},
    )
    return triplet, decision


@dataclass
class ManifestRecord:
    before_path: str
    after_path: str
    audio_path: str
    category: str
    subset: str
    seed: int
    dir_sim: Optional[float]
    iis: float
    avs: float
    decision: str
    reasons: List[str]
    dir_degenerate: bool = False
    avs_inpainted: Optional[float] = None
    mask_path: Optional[str] = None
    p_value: Optional[float] = None
    source_prompt: Optional[str] = None
    target_prompt: Optional[str] = None

    @property
    def kept(self) -> bool:
        return self.decision == "keep"


REQUIRED_FIELDS = (
    "before_path",
    "after_path",
    "audio_path",
    "category",
    "subset",
    "seed",
    "dir_sim",
    "iis",
    "avs",
    "decision",
    "reasons",
)
_KNOWN = {f.name for f in fields(ManifestRecord)}


def write_manifest(records: Iterable[ManifestRecord], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(asdict(record)) + "\n")
    return path


def manifest_target(out: PathLike) -> Path:
    out = Path(out)
    return out if out.suffix == ".jsonl" else out / "manifest.jsonl"


def _existing_records(manifest: Path) -> List[ManifestRecord]:
    return read_manifest(manifest) if manifest.is_file() else []


def read_manifest(path: PathLike) -> List[ManifestRecord]:
    records = []
    try:
        f = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise InvalidInputError(f"cannot read manifest {path}: {e.strerror or e}")
    with f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(lineno, f"invalid JSON: {e.msg}")
            if not isinstance(data, dict):
                raise ManifestError(lineno, "record must be a JSON object")

            missing = [k for k in REQUIRED_FIELDS if k not in data]
            unknown = [k for k in data if k not in _KNOWN]
            if missing or unknown:
                raise ManifestError(lineno, f"missing fields {missing}, unknown fields {unknown}")
            if data["subset"] not in (Subset.SYNTHETIC.value, Subset.REAL.value):
                raise ManifestError(lineno, f"unknown subset {data['subset']!r}")
            if data["decision"] not in ("keep", "discard"):
                raise ManifestError(lineno, f"unknown decision {data['decision']!r}")
            records.append(ManifestRecord(**data))
    return records


def decide_record(record: ManifestRecord, thresholds: FilterThresholds) -> FilterDecision:
    if record.subset == Subset.SYNTHETIC.value:
        measurements = SyntheticMeasurements(
            record.dir_sim if record.dir_sim is not None else 0.0,
            record.iis,
            record.avs,
            record.dir_degenerate or record.dir_sim is None,
        )
        return decide_synthetic(measurements, thresholds)

    mask_area = 1.0 if record.mask_path else 0.0
    inpainted = record.avs_inpainted if record.avs_inpainted is not None else 0.0
    return decide_real(RealMeasurements(record.iis, record.avs, inpainted, mask_area), thresholds)


def reevaluate_manifest(
    records: Sequence[ManifestRecord], thresholds: FilterThresholds
) -> List[Tuple[int, ManifestRecord, FilterDecision]]:
    """Replays every decision from the recorded values; returns the disagreeing records."""
    mismatches = []
    for i, record in enumerate(records):
        decision = decide_record(record, thresholds)
        if decision.keep != record.kept or decision.reason_ids != record.reasons:
            mismatches.append((i, record, decision))
    return mismatches


def manifest_stats(records: Sequence[ManifestRecord]) -> Dict[str, Any]:
    stats: Dict[str, Any] = {
        "total": len(records),
        "subsets": {s.value: {"keep": 0, "discard": 0} for s in Subset},
        "reasons": {},
        "categories": {},
    }
    for r in records:
        stats["subsets"][r.subset][r.decision] += 1
        for reason in r.reasons:
            stats["reasons"][reason] = stats["reasons"].get(reason, 0) + 1
        if r.kept:
            stats["categories"][r.category] = stats["categories"].get(r.category, 0) + 1
    return stats


def load_triplets(manifest: PathLike, kept_only: bool = True) -> List[EditTriplet]:
    """Reads the media of the manifest records; paths are relative to the manifest."""
    manifest = Path(manifest)
    root = manifest.parent
    triplets = []
    for record in read_manifest(manifest):
        if kept_only and not record.kept:
            continue
        provenance: Dict[str, Any] = {"p_value": record.p_value}
        if record.mask_path:
            mask = cv2.imread(str(root / record.mask_path), cv2.IMREAD_GRAYSCALE)
            if mask is None:
                raise InvalidInputError(f"cannot read mask '{record.mask_path}'")
            provenance["mask"] = mask > 127
        triplets.append(
            EditTriplet(
                before=media.read_image(root / record.before_path),
                after=media.read_image(root / record.after_path),
                audio=media.read_audio(root / record.audio_path),
                category=record.category,
                subset=Subset(record.subset),
                seed=record.seed,
                provenance=provenance,
            )
        )
    return triplets


def load_thresholds(path: Optional[PathLike], default: FilterThresholds) -> FilterThresholds:
    if path is None:
        return default
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError("thresholds", f"cannot read '{path}': {e}")
    if not isinstance(data, dict):
        raise ConfigError("thresholds", "must be a JSON object")
    merged = {**asdict(default), **data}
    return config_from_dict(merged, FilterThresholds, "thresholds")


@dataclass
class BuildSummary:
    manifest: Path
    subset: str
    candidates: int = 0
    kept: int = 0
    discarded: int = 0
    skipped: int = 0
    elapsed: float = 0.0


class DatasetBuilder:
    """Runs one subset end to end and writes its manifest records plus media next to the manifest."""

    def __init__(
        self,
        config: GlobalConfig,
        encoders: Encoders,
        thresholds: Optional[FilterThresholds] = None,
        client: Optional[PromptClient] = None,
        generator: Optional[PairGenerator] = None,
        localizer: Optional[Localizer] = None,
        inpainter: Optional[Inpainter] = None,
    ) -> None:
        self.name = "dataset_builder"
        logger.info(f"[{self.name}] Configuring...")

        self.config = config
        self.dataset = config.dataset
        self.size = config.train.resolution
        self.bins = config.encoders.joint_bins
        self.encoders = encoders
        self.thresholds = thresholds or config.thresholds
        self.client = client or ToyPromptClient()
        self.generator = generator or ToyPairGenerator(self.bins)
        self.localizer = localizer or FixedRectangleLocalizer()
        self.inpainter = inpainter or MeanFillInpainter()
        self.categories = toy_world.select_categories(self.dataset.categories)

        logger.info(f"[{self.name}] Configured with {len(self.categories)} categories")

    def _tone(self, category: toy_world.ToyCategory, seed: int) -> AudioClip:
        return toy_world.category_tone(
            category, seed, self.dataset.sample_rate, self.dataset.clip_seconds, self.bins
        )

    def _write_media(
        self, out_dir: Path, stem: str, before: Image, after: Image, audio: AudioClip
    ) -> Tuple[str, str, str]:
        paths = (f"media/{stem}_before.png", f"media/{stem}_after.png", f"media/{stem}.wav")
        media.write_image(out_dir / paths[0], before)
        media.write_image(out_dir / paths[1], after)
        media.write_audio(out_dir / paths[2], audio)
        return paths

    def synthetic_jobs(self) -> List[Tuple[PromptPair, int]]:
        sources = generate_source_prompts(self.dataset.n_sources, self.client)
        keywords = [c.keywords[0] for c in self.categories]
        pairs = generate_prompt_pairs(sources, keywords, self.client)
        return [(pair, seed) for pair in pairs for seed in pair_seeds(pair, self.dataset.seeds_per_pair)]

    def synthetic_record(self, out_dir: Path, index: int, job: Tuple[PromptPair, int]) -> Optional[ManifestRecord]:
        pair, seed = job
        try:
            before, after = generate_image_pair(pair, seed, self.generator, self.dataset.p_value, self.size)
        except GenerationError as e:
            logger.warning(f"skipping {pair.target_prompt!r} seed {seed}: {e}")
            return None

        category = toy_world.category_by_name(pair.category)
        audio = self._tone(category, seed)
        triplet = EditTriplet(before, after, audio, pair.category, Subset.SYNTHETIC, seed)
        decision = filter_synthetic(
            triplet, self.thresholds, self.encoders, pair.source_prompt, pair.target_prompt
        )
        paths = self._write_media(out_dir, f"syn_{index:06d}", before, after, audio)
        m = decision.measurements
        return ManifestRecord(
            *paths,
            category=pair.category,
            subset=Subset.SYNTHETIC.value,
            seed=seed,
            dir_sim=m["dir_sim"],
            iis=m["iis"],
            avs=m["avs"],
            decision="keep" if decision.keep else "discard",
            reasons=decision.reason_ids,
            dir_degenerate=m["dir_degenerate"],
            p_value=self.dataset.p_value,
            source_prompt=pair.source_prompt,
            target_prompt=pair.target_prompt,
        )

    def real_record(self, out_dir: Path, index: int, job: Tuple[toy_world.ToyCategory, int]) -> ManifestRecord:
        category, seed = job
        scene = toy_world.render_real_scene(category, seed, self.size, n_bins=self.bins)
        audio = self._tone(category, seed)

        mask = np.asarray(self.localizer.localize(scene, audio), dtype=bool)
        stem = f"real_{index:06d}"
        if not mask.any():
            decision = decide_real(RealMeasurements(0.0, 0.0, 0.0, 0.0), self.thresholds)
            paths = self._write_media(out_dir, stem, scene, scene, audio)
            return ManifestRecord(
                *paths,
                category=category.name,
                subset=Subset.REAL.value,
                seed=seed,
                dir_sim=None,
                iis=0.0,
                avs=0.0,
                decision="discard",
                reasons=decision.reason_ids,
                avs_inpainted=0.0,
            )

        inpainted = self.inpainter.inpaint(scene, mask)
        m = measure_real(scene, inpainted, audio, mask, self.encoders)
        decision = decide_real(m, self.thresholds)
        paths = self._write_media(out_dir, stem, inpainted, scene, audio)
        mask_path = f"media/{stem}_mask.png"
        cv2.imwrite(str(out_dir / mask_path), mask.astype(np.uint8) * 255)
        return ManifestRecord(
            *paths,
            category=category.name,
            subset=Subset.REAL.value,
            seed=seed,
            dir_sim=None,
            iis=m.iis,
            avs=m.avs_original,
            decision="keep" if decision.keep else "discard",
            reasons=decision.reason_ids,
            avs_inpainted=m.avs_inpainted,
            mask_path=mask_path,
        )

    def build(self, subset: Union[str, Subset], out: PathLike, progress: bool = False) -> BuildSummary:
        """Rebuilds one subset into the manifest at ``out``.

        ``out`` is the manifest file, or a directory that gets ``manifest.jsonl``.
        Records of the other subset already in that manifest are kept.
        """
        subset = Subset(str(subset.value if isinstance(subset, Subset) else subset).upper())
        manifest = manifest_target(out)
        out_dir = manifest.parent
        kept_others = [r for r in _existing_records(manifest) if r.subset != subset.value]
        (out_dir / "media").mkdir(parents=True, exist_ok=True)
        t0 = time.time()

        if subset == Subset.SYNTHETIC:
            jobs: List[Any] = self.synthetic_jobs()
            work = self.synthetic_record
        else:
            jobs = [(self.categories[i % len(self.categories)], i) for i in range(self.dataset.n_real)]
            work = self.real_record

        summary = BuildSummary(manifest, subset.value, candidates=len(jobs))
        logger.info(f"[{self.name}] building {subset.value} subset from {len(jobs)} candidates")

        # workers measure, the calling thread is the only manifest writer
        with ThreadPoolExecutor(max_workers=self.dataset.workers) as pool:
            results = pool.map(lambda item: work(out_dir, item[0], item[1]), enumerate(jobs))
            records = []
            for record in tqdm(results, total=len(jobs), desc=subset.value.lower(), disable=not progress):
                if record is None:
                    summary.skipped += 1
                    continue
                records.append(record)
                if record.kept:
                    summary.kept += 1
                else:
                    summary.discarded += 1

        if kept_others:
            logger.info(f"[{self.name}] keeping {len(kept_others)} records of other subsets in {manifest}")
        write_manifest(kept_others + records, manifest)
        summary.elapsed = time.time() - t0
        logger.info(
            f"[{self.name}] {subset.value}: kept={summary.kept}, discarded={summary.discarded}, "
            f"skipped={summary.skipped}, time={summary.elapsed:.2f}s"
        )
        return summary


def build_dataset(
    subset: Union[str, Subset],
    config: GlobalConfig,
    out: PathLike,
    encoders: Encoders,
    thresholds: Optional[FilterThresholds] = None,
    progress: bool = False,
) -> BuildSummary:
    return DatasetBuilder(config, encoders, thresholds).build(subset, out, progress)
