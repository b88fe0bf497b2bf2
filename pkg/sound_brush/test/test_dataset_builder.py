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


import json
import logging
import re
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import small_config
from sound_brush import toy_world
from sound_brush.config import FilterThresholds
from sound_brush.dataset_builder import (
    DatasetBuilder,
    FixedRectangleLocalizer,
    ManifestRecord,
    MeanFillInpainter,
    PromptPair,
    RealMeasurements,
    SyntheticMeasurements,
    TeleaInpainter,
    ToyPairGenerator,
    ToyPromptClient,
    build_real_triplet,
    decide_real,
    decide_synthetic,
    directional_similarity,
    filter_synthetic,
    generate_image_pair,
    generate_prompt_pairs,
    generate_source_prompts,
    load_template,
    load_thresholds,
    load_triplets,
    manifest_stats,
    manifest_target,
    read_manifest,
    reevaluate_manifest,
    splice_keyword,
    write_manifest,
)
from sound_brush.errors import (
    ConfigError,
    GenerationError,
    InvalidInputError,
    ManifestError,
    PromptClientError,
)
from sound_brush.structures import EditTriplet, EmbeddingSpace, EmbeddingVector, Image, Subset
from sound_brush.trainer import run


class FlakyClient:

    def __init__(self, failures: int) -> None:
        self.failures = failures
        self.calls = 0
        self.inner = ToyPromptClient()

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if self.calls <= self.failures:
            raise TimeoutError("no answer")
        return self.inner.complete(prompt)


class BrokenGenerator:

    def generate(self, pair, seed, p_value, size):
        raise RuntimeError("out of memory")


def test_templates():
    assert "{n}" in load_template("source")
    target = load_template("target")
    assert "{source}" in target and "{keyword}" in target


def test_source_prompts():
    prompts = generate_source_prompts(3, ToyPromptClient())
    assert prompts == ["Sunny city street", "Sunny mountain lake", "Cloudy desert road"]


def test_prompt_pairs_splice_the_keyword():
    pairs = generate_prompt_pairs(["Sunny city street"], ["Thunderstorm", "Snowy"], ToyPromptClient())
    assert [p.target_prompt for p in pairs] == ["Thunderstorm city street", "Snowy city street"]
    assert [p.category for p in pairs] == ["thunder", "footsteps on snow"]
    assert splice_keyword("Sunny", "Misty") == "Misty Sunny"


def test_prompt_client_retries():
    client = FlakyClient(failures=2)
    assert len(generate_source_prompts(2, client, retries=2)) == 2
    assert client.calls == 3

    with pytest.raises(PromptClientError) as error:
        generate_prompt_pairs(["Sunny city street"], ["Misty"], FlakyClient(failures=5), retries=1)
    assert error.value.retriable
    assert error.value.keyword == "Misty"


def test_prompt_pair_rejects_empty_fields():
    with pytest.raises(InvalidInputError):
        PromptPair("Sunny city street", " ", "Misty", "waterfall burbling")


def test_generation_failures_are_wrapped():
    pair = PromptPair("Sunny city street", "Misty city street", "Misty", "waterfall burbling")
    with pytest.raises(GenerationError):
        generate_image_pair(pair, 0, BrokenGenerator())
    unknown = PromptPair("Sunny city street", "Foo city street", "Foo", "foo")
    with pytest.raises(GenerationError):
        generate_image_pair(unknown, 0, ToyPairGenerator())


def vl(*values):
    return EmbeddingVector(torch.tensor(values, dtype=torch.float64), EmbeddingSpace.JOINT_VL)


def test_directional_similarity():
    result = directional_similarity(vl(0, 0), vl(1, 1), vl(1, 0), vl(2, 1))
    assert result.value == pytest.approx(1.0)
    assert not result.degenerate

    result = directional_similarity(vl(1, 1), vl(1, 1), vl(1, 0), vl(2, 1))
    assert result.value == 0.0 and result.degenerate


THRESHOLDS = FilterThresholds()
ABSOLUTE = FilterThresholds(real_audio_rule="absolute")


@pytest.mark.parametrize(
    "dir_sim, iis, avs, degenerate, keep, reasons",
    [
        (0.5, 0.8, 0.5, False, True, []),
        (0.2, 0.7, 0.2, False, True, []),
        (0.19, 0.8, 0.5, False, False, ["directional"]),
        (0.5, 0.69, 0.5, False, False, ["iis"]),
        (0.5, 0.8, 0.19, False, False, ["avs"]),
        (0.1, 0.6, 0.1, False, False, ["directional", "iis", "avs"]),
        (0.1, 0.8, 0.1, False, False, ["directional", "avs"]),
        (0.9, 0.8, 0.5, True, False, ["directional"]),
        (-0.5, 0.99, 0.9, False, False, ["directional"]),
        (0.3, 1.0, -0.2, False, False, ["avs"]),
        (0.21, 0.71, 0.21, False, True, []),
        (1.0, 0.5, 1.0, False, False, ["iis"]),
        (0.0, 0.0, 0.0, False, False, ["directional", "iis", "avs"]),
        (0.25, 0.69999, 0.3, False, False, ["iis"]),
        (0.8, 0.9, 0.2, False, True, []),
    ],
)
def test_synthetic_decision_table(dir_sim, iis, avs, degenerate, keep, reasons):
    decision = decide_synthetic(SyntheticMeasurements(dir_sim, iis, avs, degenerate), THRESHOLDS)
    assert decision.keep == keep
    assert decision.reason_ids == reasons


@pytest.mark.parametrize(
    "iis, avs_original, avs_inpainted, mask_area, thresholds, keep, reasons",
    [
        (0.3, 0.6, 0.1, 0.5, THRESHOLDS, True, []),
        (0.7, 0.6, 0.1, 0.5, THRESHOLDS, True, []),
        (0.71, 0.6, 0.1, 0.5, THRESHOLDS, False, ["not_inpainted"]),
        (0.3, 0.4, 0.4, 0.5, THRESHOLDS, False, ["residual_object"]),
        (0.3, 0.4, 0.5, 0.5, THRESHOLDS, False, ["residual_object"]),
        (0.9, 0.1, 0.6, 0.5, THRESHOLDS, False, ["not_inpainted", "residual_object"]),
        (0.3, 0.05, 0.01, 0.5, THRESHOLDS, True, []),
        (0.3, 0.6, 0.1, 0.0, THRESHOLDS, False, ["no_source_localized"]),
        (0.9, 0.1, 0.9, 0.0, THRESHOLDS, False, ["no_source_localized"]),
        (0.3, 0.6, 0.9, 0.5, ABSOLUTE, True, []),
        (0.3, 0.19, 0.0, 0.5, ABSOLUTE, False, ["avs"]),
        (0.8, 0.1, 0.0, 0.5, ABSOLUTE, False, ["not_inpainted", "avs"]),
        (0.8, 0.5, 0.0, 0.5, ABSOLUTE, False, ["not_inpainted"]),
        (-0.2, -0.1, -0.3, 0.1, THRESHOLDS, True, []),
        (0.5, 0.2, 0.2, 1.0, THRESHOLDS, False, ["residual_object"]),
    ],
)
def test_real_decision_table(iis, avs_original, avs_inpainted, mask_area, thresholds, keep, reasons):
    decision = decide_real(RealMeasurements(iis, avs_original, avs_inpainted, mask_area), thresholds)
    assert decision.keep == keep
    assert decision.reason_ids == reasons


@pytest.mark.parametrize("name", ["directional_min", "iis_min", "avs_min"])
def test_raising_a_synthetic_threshold_never_keeps_more(name):
    rng = np.random.default_rng(7)
    levels = np.linspace(-1.0, 1.0, 9)
    for _ in range(200):
        dir_sim, iis, avs = rng.uniform(-1.0, 1.0, 3)
        m = SyntheticMeasurements(float(dir_sim), float(iis), float(avs), bool(rng.random() < 0.1))
        keeps = [decide_synthetic(m, replace(THRESHOLDS, **{name: float(level)})).keep for level in levels]
        assert keeps == sorted(keeps, reverse=True), (name, m)


# levels run from lenient to strict
@pytest.mark.parametrize(
    "name, levels, rule",
    [
        ("avs_min", np.linspace(-1.0, 1.0, 9), "absolute"),
        ("avs_min", np.linspace(-1.0, 1.0, 9), "comparative"),
        ("real_iis_discard_above", np.linspace(1.0, -1.0, 9), "comparative"),
        ("real_iis_discard_above", np.linspace(1.0, -1.0, 9), "absolute"),
    ],
)
def test_tightening_a_real_threshold_never_keeps_more(name, levels, rule):
    rng = np.random.default_rng(11)
    base = replace(THRESHOLDS, real_audio_rule=rule)
    for _ in range(200):
        iis, avs_original, avs_inpainted = rng.uniform(-1.0, 1.0, 3)
        mask_area = 0.0 if rng.random() < 0.1 else float(rng.uniform(0.01, 1.0))
        m = RealMeasurements(float(iis), float(avs_original), float(avs_inpainted), mask_area)
        keeps = [decide_real(m, replace(base, **{name: float(level)})).keep for level in levels]
        assert keeps == sorted(keeps, reverse=True), (name, rule, m)


def test_synthetic_toy_edits_pass_the_filters(encoders):
    category = toy_world.category_by_name("thunder")
    kept = 0
    for seed in range(4):
        before, after = toy_world.render_edit_pair("Sunny city street", category, seed, 16)
        audio = toy_world.category_tone(category, seed, seconds=0.25)
        triplet = EditTriplet(before, after, audio, category.name, Subset.SYNTHETIC, seed)
        decision = filter_synthetic(
            triplet, THRESHOLDS, encoders, "Sunny city street", "Thunderstorm city street"
        )
        kept += decision.keep
    assert kept >= 3


def test_mismatched_audio_fails_the_audio_rule(encoders):
    thunder = toy_world.category_by_name("thunder")
    before, after = toy_world.render_edit_pair("Sunny city street", thunder, 0, 16)
    audio = toy_world.category_tone(toy_world.category_by_name("waterfall burbling"), 0, seconds=0.25)
    triplet = EditTriplet(before, after, audio, thunder.name, Subset.SYNTHETIC, 0)
    measurements = filter_synthetic(
        triplet, THRESHOLDS, encoders, "Sunny city street", "Thunderstorm city street"
    ).measurements
    matched = filter_synthetic(
        EditTriplet(before, after, toy_world.category_tone(thunder, 0, seconds=0.25), thunder.name, Subset.SYNTHETIC, 0),
        THRESHOLDS,
        encoders,
        "Sunny city street",
        "Thunderstorm city street",
    ).measurements
    assert matched["avs"] > measurements["avs"]


def test_real_triplet_construction(encoders):
    category = toy_world.category_by_name("fireworks banging")
    scene = toy_world.render_real_scene(category, 0, 16)
    audio = toy_world.category_tone(category, 0, seconds=0.25)
    lenient = FilterThresholds(real_iis_discard_above=1.0)

    triplet, decision = build_real_triplet(
        scene, audio, FixedRectangleLocalizer(), MeanFillInpainter(), encoders, lenient, category.name
    )
    assert decision.measurements["avs_original"] > decision.measurements["avs_inpainted"]
    assert decision.keep
    assert triplet.subset == Subset.REAL
    assert np.array_equal(triplet.after.pixels, scene.pixels)
    assert triplet.provenance["mask"].sum() == 12 * 12

    none, decision = build_real_triplet(
        scene, audio, FixedRectangleLocalizer(0.0), MeanFillInpainter(), encoders, lenient
    )
    assert none is None
    assert decision.reason_ids == ["no_source_localized"]


def test_inpainters_only_touch_the_mask(rng):
    img = Image(rng.random((16, 16, 3)))
    mask = FixedRectangleLocalizer(0.5).localize(img, None)
    for inpainter in (MeanFillInpainter(), TeleaInpainter()):
        filled = inpainter.inpaint(img, mask)
        assert np.allclose(filled.pixels[~mask], img.pixels[~mask], atol=1 / 255)
        assert not np.allclose(filled.pixels[mask], img.pixels[mask])


def record(**overrides) -> ManifestRecord:
    data = dict(
        before_path="media/a_before.png",
        after_path="media/a_after.png",
        audio_path="media/a.wav",
        category="thunder",
        subset="SYNTHETIC",
        seed=1,
        dir_sim=0.5,
        iis=0.8,
        avs=0.4,
        decision="keep",
        reasons=[],
    )
    data.update(overrides)
    return ManifestRecord(**data)


def test_manifest_errors_carry_the_line(tmp_path):
    path = write_manifest([record()], tmp_path / "manifest.jsonl")
    assert read_manifest(path)[0] == record()

    with open(path, "a", encoding="utf-8") as f:
        f.write("{not json\n")
    with pytest.raises(ManifestError) as error:
        read_manifest(path)
    assert error.value.line == 2

    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"seed": 1}) + "\n")
    with pytest.raises(ManifestError):
        read_manifest(bad)


def test_reevaluation_finds_tampered_records():
    records = [
        record(),
        record(dir_sim=0.1, decision="discard", reasons=["directional"]),
        record(iis=0.5),
    ]
    mismatches = reevaluate_manifest(records, THRESHOLDS)
    assert [i for i, _, _ in mismatches] == [2]


def test_thresholds_override(tmp_path):
    path = tmp_path / "thresholds.json"
    path.write_text(json.dumps({"iis_min": 0.5}))
    thresholds = load_thresholds(path, FilterThresholds())
    assert thresholds.iis_min == 0.5
    assert thresholds.directional_min == 0.2
    assert load_thresholds(None, THRESHOLDS) is THRESHOLDS

    path.write_text(json.dumps({"iis_min": 3.0}))
    with pytest.raises(ConfigError) as error:
        load_thresholds(path, FilterThresholds())
    assert error.value.key_path == "thresholds.iis_min"


def test_build_synthetic_subset(tmp_path, config, encoders):
    summary = DatasetBuilder(config, encoders).build("synthetic", tmp_path)
    records = read_manifest(summary.manifest)

    assert summary.candidates == 1 * 6 * 2
    assert len(records) == summary.kept + summary.discarded
    assert summary.skipped == 0
    assert reevaluate_manifest(records, config.thresholds) == []
    assert manifest_stats(records)["subsets"]["SYNTHETIC"]["keep"] == summary.kept
    assert all(r.source_prompt and r.target_prompt for r in records)

    triplets = load_triplets(summary.manifest)
    assert len(triplets) == summary.kept
    assert all(t.before.pixels.shape == (16, 16, 3) for t in triplets)


def test_build_real_subset(tmp_path, config, encoders):
    summary = DatasetBuilder(config, encoders).build(Subset.REAL, tmp_path)
    records = read_manifest(summary.manifest)
    assert len(records) == 4
    assert reevaluate_manifest(records, config.thresholds) == []
    for triplet in load_triplets(summary.manifest):
        assert triplet.provenance["mask"].shape == (16, 16)


def test_build_skips_failed_generations(tmp_path, config, encoders):
    builder = DatasetBuilder(config, encoders, generator=BrokenGenerator())
    summary = builder.build("synthetic", tmp_path)
    assert summary.skipped == summary.candidates
    assert read_manifest(summary.manifest) == []


def test_build_is_independent_of_workers(tmp_path, encoders):
    single = DatasetBuilder(small_config(dataset={"workers": 1}), encoders).build("synthetic", tmp_path / "a")
    pooled = DatasetBuilder(small_config(dataset={"workers": 3}), encoders).build("synthetic", tmp_path / "b")
    assert single.manifest.read_text() == pooled.manifest.read_text()


def test_manifest_target():
    assert manifest_target("data/train.jsonl").name == "train.jsonl"
    assert manifest_target("data") == manifest_target("data/manifest.jsonl")


def test_missing_manifest_is_an_input_error(tmp_path):
    with pytest.raises(InvalidInputError) as error:
        read_manifest(tmp_path / "absent.jsonl")
    assert "absent.jsonl" in str(error.value)


def test_build_logs_elapsed_seconds(tmp_path, config, encoders, caplog):
    caplog.set_level(logging.INFO, logger="sound_brush.dataset_builder")
    DatasetBuilder(config, encoders).build("real", tmp_path)
    done = [r.getMessage() for r in caplog.records if "kept=" in r.getMessage()]
    assert len(done) == 1
    assert re.search(r"time=\d+\.\d{2}s$", done[0])


def test_both_subsets_share_one_manifest(tmp_path, config, encoders):
    lenient = FilterThresholds(
        directional_min=-1.0,
        iis_min=-1.0,
        avs_min=-1.0,
        real_iis_discard_above=1.0,
        real_audio_rule="absolute",
    )
    builder = DatasetBuilder(config, encoders, lenient)
    manifest = tmp_path / "data" / "train.jsonl"

    synthetic = builder.build("synthetic", manifest)
    real = builder.build("real", manifest)
    assert synthetic.manifest == real.manifest == manifest
    stats = manifest_stats(read_manifest(manifest))["subsets"]
    assert stats["SYNTHETIC"] == {"keep": 12, "discard": 0}
    assert stats["REAL"] == {"keep": 4, "discard": 0}

    # rebuilding one subset replaces only its own records
    builder.build("synthetic", manifest)
    records = read_manifest(manifest)
    assert len(records) == 16
    assert sum(r.subset == "REAL" for r in records) == 4

    triplets = load_triplets(manifest)
    assert {t.subset for t in triplets} == {Subset.SYNTHETIC, Subset.REAL}
    short = small_config(train={"steps": 4, "eval_every": 2, "checkpoint_every": 2})
    result = run(short, manifest, tmp_path / "run")
    assert result.step == 4
    assert all(report.is_finite() for report in result.history)
