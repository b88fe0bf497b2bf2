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


import io
import json

import numpy as np
import pytest
import torch

from conftest import toy_triplets
from sound_brush import toy_world
from sound_brush.errors import InvalidInputError, MOSFormatError, NumericalError, ShapeError
from sound_brush.evaluation import (
    MetricsReport,
    avs,
    category_embeddings,
    evaluate_dataset,
    evaluate_edits,
    fid,
    iis,
    load_category_embeddings,
    mos_aggregate,
    tvs,
    volume_sweep,
)


def prototype(name: str, size: int = 32):
    return toy_world.solid_image(toy_world.bin_color(toy_world.category_by_name(name).bin, 8), size)


def test_fid_of_a_set_with_itself_is_zero(rng):
    x = rng.standard_normal((50, 4))
    assert fid(x, x) == pytest.approx(0.0, abs=1e-8)


def test_fid_one_dimensional():
    # means 0 and 1, variances 1 and 4: 1 + 1 + 4 - 2 * 2
    assert fid([-1.0, 0.0, 1.0], [-1.0, 1.0, 3.0]) == pytest.approx(2.0, abs=1e-6)


def test_fid_mean_shift(rng):
    x = rng.standard_normal((40, 3))
    shift = np.array([1.0, -2.0, 0.5])
    assert fid(x, x + shift) == pytest.approx(float(shift @ shift), abs=1e-6)


def test_fid_is_symmetric_and_rotation_invariant(rng):
    a = rng.standard_normal((60, 5))
    b = 2.0 * rng.standard_normal((60, 5)) + 1.0
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))

    value = fid(a, b)
    assert value > 0
    assert fid(b, a) == pytest.approx(value, rel=1e-6)
    assert fid(a @ q, b @ q) == pytest.approx(value, rel=1e-6)


def test_fid_input_errors(rng):
    with pytest.raises(InvalidInputError):
        fid(rng.standard_normal((1, 3)), rng.standard_normal((5, 3)))
    with pytest.raises(ShapeError):
        fid(rng.standard_normal((5, 3)), rng.standard_normal((5, 4)))
    with pytest.raises(ShapeError):
        fid(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))


def test_similarity_metrics(encoders):
    thunder, rain = prototype("thunder"), prototype("rain")
    tone = toy_world.category_tone(toy_world.category_by_name("thunder"), 0, seconds=0.25)
    texts = category_embeddings(encoders, ["thunder", "rain"])

    assert iis(thunder, thunder, encoders) == pytest.approx(1.0)
    assert iis(thunder, rain, encoders) < 1.0
    assert avs(tone, thunder, encoders) > avs(tone, rain, encoders)
    assert tvs(texts["thunder"], thunder, encoders) == pytest.approx(1.0)
    assert tvs(texts["thunder"], rain, encoders) < tvs(texts["thunder"], thunder, encoders)


def test_report_does_not_depend_on_sample_order(encoders):
    triplets = toy_triplets(6)
    edited = [t.before for t in triplets]
    texts = category_embeddings(encoders, {t.category for t in triplets})

    forward = evaluate_edits(triplets, edited, encoders, texts)
    backward = evaluate_edits(triplets[::-1], edited[::-1], encoders, texts)
    assert forward.to_dict() == backward.to_dict()
    assert forward.n_samples == 6


def test_perfect_edits(encoders):
    triplets = toy_triplets(4)
    texts = category_embeddings(encoders, {t.category for t in triplets})
    report = evaluate_edits(triplets, [t.after for t in triplets], encoders, texts)
    assert report.iis == pytest.approx(1.0)
    assert report.fid == pytest.approx(0.0, abs=1e-6)


def test_evaluate_edits_errors(encoders):
    triplets = toy_triplets(2)
    texts = category_embeddings(encoders, {t.category for t in triplets})
    with pytest.raises(InvalidInputError):
        evaluate_edits(triplets, [triplets[0].after], encoders, texts)
    with pytest.raises(InvalidInputError):
        evaluate_edits(triplets, [t.after for t in triplets], encoders, {})


def test_evaluate_dataset(model):
    report = evaluate_dataset(toy_triplets(3), model, steps=2)
    assert report.n_samples == 3
    assert np.isfinite(list(report.to_dict().values())).all()


def test_metrics_report(tmp_path):
    report = MetricsReport(avs=0.1, iis=0.9, tvs=0.2, fid=1.5, n_samples=2)
    report.save(tmp_path / "report.json")
    assert json.loads((tmp_path / "report.json").read_text()) == report.to_dict()

    with pytest.raises(NumericalError):
        MetricsReport(avs=float("nan"), iis=0.9, tvs=0.2, fid=1.5, n_samples=2)
    with pytest.raises(InvalidInputError):
        MetricsReport(avs=0.1, iis=0.9, tvs=0.2, fid=1.5, n_samples=0)


def test_category_embedding_fixture(tmp_path, encoders):
    path = tmp_path / "texts.json"
    path.write_text(json.dumps({"thunder": [1.0, 0.0], "rain": [0.0, 1.0]}))
    loaded = load_category_embeddings(path)
    assert sorted(loaded) == ["rain", "thunder"]
    assert loaded["thunder"].values.dtype == torch.float64


@pytest.mark.parametrize("gains", [[], [0.0, 1.0], [1.0, 0.5], [1.0, 1.0]])
def test_volume_sweep_rejects_bad_gains(model, gains):
    triplet = toy_triplets(1)[0]
    with pytest.raises(InvalidInputError):
        volume_sweep(triplet.before, triplet.audio, gains, model)


def test_volume_sweep(model):
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for pair in model.adapter.pairs.values():
            pair.B.copy_(0.05 * torch.randn(pair.B.shape, generator=generator, dtype=torch.float64))

    triplet = toy_triplets(1)[0]
    sweep = volume_sweep(triplet.before, triplet.audio, [0.5, 1.0, 2.0], model, seed=3, steps=3)
    assert sweep.gains == [0.5, 1.0, 2.0]
    assert len(sweep.avs) == 3
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        assert np.abs(sweep.edited[i].pixels - sweep.edited[j].pixels).max() > 0
    assert set(sweep.to_dict()) == {"gains", "avs", "nondecreasing"}

    again = volume_sweep(triplet.before, triplet.audio, [0.5, 1.0, 2.0], model, seed=3, steps=3)
    assert again.avs == sweep.avs
    for a, b in zip(again.edited, sweep.edited):
        assert a.pixels.tobytes() == b.pixels.tobytes()


MOS_CSV = """rater_id,sample_id,method,question,rating
r1,s1,soundbrush,quality,4
r2,s1,soundbrush,quality,5
r1,s1,soundbrush,relevance,3
r1,s2,baseline,quality,2
r2,s2,baseline,quality,7
"""


def test_mos_aggregate():
    table = mos_aggregate(io.StringIO(MOS_CSV))
    assert table.mean("soundbrush", "quality") == pytest.approx(4.5)
    assert table.count("soundbrush", "quality") == 2
    assert table.mean("soundbrush", "relevance") == 3.0
    assert table.mean("baseline", "quality") == 2.0
    assert table.rejected == 1
    assert table.errors == [{"line": 6, "rating": 7, "reason": "rating outside 1..5"}]
    assert table.to_dict()["methods"]["baseline"]["quality"]["count"] == 1


def test_mos_aggregate_from_file(tmp_path):
    path = tmp_path / "mos.csv"
    path.write_text(MOS_CSV)
    assert mos_aggregate(path).to_dict() == mos_aggregate(io.StringIO(MOS_CSV)).to_dict()


@pytest.mark.parametrize(
    "text,line",
    [
        ("rater_id,sample_id,method\nr1,s1,a\n", 1),
        ("rater_id,sample_id,method,question,rating\nr1,s1,a,q,4\nr1,s1,a,q,good\n", 3),
        ("rater_id,sample_id,method,question,rating\nr1,s1,a,q\n", 2),
    ],
)
def test_mos_format_errors(text, line):
    with pytest.raises(MOSFormatError) as error:
        mos_aggregate(io.StringIO(text))
    assert error.value.line == line
