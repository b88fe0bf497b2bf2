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

import pytest

from conftest import small_config, toy_triplets
from sound_brush import __version__, media
from sound_brush.checkpoint import save_checkpoint
from sound_brush.cli import main
from sound_brush.config import config_to_dict
from sound_brush.dataset_builder import write_manifest
from sound_brush.errors import InvalidInputError
from sound_brush.evaluation import load_category_embeddings
from sound_brush.trainer import Trainer


def error_line(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config_to_dict(small_config())))
    return path


@pytest.fixture
def checkpoint(tmp_path):
    return save_checkpoint(tmp_path / "ckpt" / "last.pt", Trainer(small_config()).payload())


@pytest.fixture
def media_files(tmp_path):
    triplet = toy_triplets(1)[0]
    media.write_image(tmp_path / "src.png", triplet.before)
    media.write_audio(tmp_path / "tone.wav", triplet.audio)
    return tmp_path / "src.png", tmp_path / "tone.wav"


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["paint"]) == 2
    assert main(["edit", "--src", "a.png"]) == 2


def test_missing_config(tmp_path, capsys):
    assert main(["train", "--manifest", "m.jsonl", "--out", str(tmp_path)]) == 3
    error = error_line(capsys)
    assert error["key_path"] == "config"
    assert error["exit_code"] == 3


def test_invalid_config_key(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"train": {"batch_size": 0}}))
    code = main(["train", "--config", str(path), "--manifest", "m.jsonl", "--out", str(tmp_path)])
    assert code == 3
    assert error_line(capsys)["key_path"] == "train.batch_size"


def test_runtime_errors_exit_with_one(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("rater_id,sample_id\nr1,s1\n")
    assert main(["mos", "--csv", str(bad)]) == 1
    error = error_line(capsys)
    assert error["error"] == "MOSFormatError"
    assert "key_path" not in error


def test_missing_files_are_reported_as_json(tmp_path, checkpoint, capsys):
    assert main(["mos", "--csv", str(tmp_path / "absent.csv")]) == 1
    error = error_line(capsys)
    assert error == {
        "error": "InvalidInputError",
        "message": error["message"],
        "exit_code": 1,
    }
    assert "absent.csv" in error["message"]

    eval_args = ["eval", "--ckpt", str(checkpoint), "--out", str(tmp_path / "report.json")]
    assert main(eval_args + ["--manifest", str(tmp_path / "absent.jsonl")]) == 1
    assert error_line(capsys)["error"] == "InvalidInputError"


def test_malformed_text_embeddings(tmp_path, checkpoint, capsys):
    manifest = write_manifest([], tmp_path / "empty.jsonl")
    embeddings = tmp_path / "text.json"
    embeddings.write_text("{\"thunder\": [1.0,")
    code = main(
        ["eval", "--ckpt", str(checkpoint), "--out", str(tmp_path / "report.json"),
         "--manifest", str(manifest), "--text-embeddings", str(embeddings)]
    )
    assert code == 1
    error = error_line(capsys)
    assert error["error"] == "InvalidInputError"
    assert "text.json" in error["message"]

    with pytest.raises(InvalidInputError):
        load_category_embeddings(embeddings)
    with pytest.raises(InvalidInputError):
        load_category_embeddings(tmp_path / "absent.json")


def test_mos(tmp_path, capsys):
    csv_path = tmp_path / "mos.csv"
    csv_path.write_text(
        "rater_id,sample_id,method,question,rating\n"
        "r1,s1,soundbrush,quality,4\n"
        "r2,s1,soundbrush,quality,2\n"
    )
    out = tmp_path / "mos" / "table.json"
    assert main(["mos", "--csv", str(csv_path), "--out", str(out)]) == 0
    table = json.loads(out.read_text())
    assert table["methods"]["soundbrush"]["quality"] == {"mean": 3.0, "count": 2}
    assert json.loads(capsys.readouterr().out) == table


def test_edit_is_deterministic(tmp_path, checkpoint, media_files):
    src, audio = media_files
    common = ["edit", "--src", str(src), "--audio", str(audio), "--ckpt", str(checkpoint)]

    assert main(common + ["--out", str(tmp_path / "a.png"), "--seed", "7"]) == 0
    assert main(common + ["--out", str(tmp_path / "b.png"), "--seed", "7"]) == 0
    # the small config samples with four steps
    assert main(common + ["--out", str(tmp_path / "c.png"), "--seed", "7", "--steps", "4"]) == 0

    a = (tmp_path / "a.png").read_bytes()
    assert a == (tmp_path / "b.png").read_bytes()
    assert a == (tmp_path / "c.png").read_bytes()
    assert media.read_image(tmp_path / "a.png").pixels.shape == (16, 16, 3)


def test_edit_with_a_missing_checkpoint(tmp_path, media_files, capsys):
    src, audio = media_files
    code = main(
        ["edit", "--src", str(src), "--audio", str(audio), "--ckpt", str(tmp_path / "none.pt"),
         "--out", str(tmp_path / "a.png")]
    )
    assert code == 1
    assert error_line(capsys)["error"] == "CheckpointError"


def test_sweep_volume(tmp_path, checkpoint, media_files):
    src, audio = media_files
    out = tmp_path / "sweep"
    code = main(
        ["sweep-volume", "--src", str(src), "--audio", str(audio), "--ckpt", str(checkpoint),
         "--out", str(out), "--gains", "0.5,1,2", "--steps", "2"]
    )
    assert code == 0
    assert json.loads((out / "sweep.json").read_text())["gains"] == [0.5, 1.0, 2.0]
    assert sorted(p.name for p in out.glob("*.png")) == ["gain_0.5.png", "gain_1.png", "gain_2.png"]


def test_build_train_and_eval(tmp_path, config_path, capsys):
    thresholds = tmp_path / "thresholds.json"
    thresholds.write_text(
        json.dumps(
            {
                "directional_min": -1.0,
                "iis_min": -1.0,
                "avs_min": -1.0,
                "real_iis_discard_above": 1.0,
                "real_audio_rule": "absolute",
            }
        )
    )
    manifest = tmp_path / "data" / "train.jsonl"
    for subset, kept in (("synthetic", 12), ("real", 4)):
        assert main(
            ["build-dataset", "--config", str(config_path), "--subset", subset,
             "--thresholds", str(thresholds), "--out", str(manifest)]
        ) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["manifest"] == str(manifest)
        assert summary["kept"] == summary["candidates"] == kept
    assert len(manifest.read_text().splitlines()) == 16

    run_dir = tmp_path / "run"
    assert main(
        ["train", "--config", str(config_path), "--manifest", summary["manifest"], "--out", str(run_dir)]
    ) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["step"] == 20
    assert (run_dir / "last.pt").exists()

    assert main(
        ["train", "--resume", str(run_dir / "last.pt"), "--manifest", summary["manifest"],
         "--out", str(run_dir)]
    ) == 0
    assert json.loads(capsys.readouterr().out)["step"] == 20

    report_path = tmp_path / "report" / "union.json"
    assert main(
        ["eval", "--manifest", summary["manifest"], "--ckpt", str(run_dir / "last.pt"),
         "--out", str(report_path), "--steps", "2"]
    ) == 0
    report = json.loads(report_path.read_text())
    assert report["n_samples"] == 16
