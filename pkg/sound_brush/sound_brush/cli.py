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


"""``sound_brush`` command line.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 configuration error.
Errors are reported on standard error as one JSON line.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

from sound_brush import __version__, media
from sound_brush.checkpoint import load_checkpoint, restore_model
from sound_brush.config import GlobalConfig, load_config
from sound_brush.dataset_builder import build_dataset, load_thresholds, load_triplets
from sound_brush.encoders import build_encoders
from sound_brush.errors import ConfigError, SoundBrushError
from sound_brush.evaluation import evaluate_dataset, load_category_embeddings, mos_aggregate, volume_sweep
from sound_brush.model import SoundBrush
from sound_brush.trainer import resume, run, run_ablation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def _require_config(args: argparse.Namespace) -> GlobalConfig:
    if args.config is None:
        raise ConfigError("config", f"'{args.command}' needs --config <json>")
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def _load_model(args: argparse.Namespace) -> SoundBrush:
    return restore_model(load_checkpoint(args.ckpt), str(args.ckpt))


def _parse_gains(text: str) -> List[float]:
    try:
        return [float(g) for g in text.split(",") if g.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"gains must be comma-separated numbers, got '{text}'")


def _print_json(data: Dict) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_build_dataset(args: argparse.Namespace) -> int:
    config = _require_config(args)
    thresholds = load_thresholds(args.thresholds, config.thresholds)
    encoders = build_encoders(config)
    summary = build_dataset(args.subset, config, args.out, encoders, thresholds, args.progress)
    _print_json({k: str(v) if isinstance(v, Path) else v for k, v in vars(summary).items()})
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    if args.resume is not None:
        triplets = load_triplets(args.manifest)
        if not triplets:
            raise ConfigError("manifest", f"'{args.manifest}' has no kept triplets")
        _, result = resume(args.resume, triplets, args.out)
    else:
        config = _require_config(args)
        result = run(config, args.manifest, args.out, args.progress)

    _print_json(
        {
            "checkpoint": str(result.checkpoint),
            "step": result.step,
            "stopped_early": result.stopped_early,
            "best_val": result.best_val,
        }
    )
    return EXIT_OK


def cmd_edit(args: argparse.Namespace) -> int:
    model = _load_model(args)
    src = media.read_image(args.src)
    audio = media.read_audio(args.audio, args.gain)
    guidance = model.guidance(args.guidance_cond, args.guidance_img)

    edited = model.edit(src, audio, args.steps, args.seed, guidance, args.progress)
    media.write_image(args.out, edited)
    logger.info(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = _load_model(args)
    path = args.text_embeddings or model.config.paths.category_text_embeddings
    embeddings = load_category_embeddings(path) if path else None

    triplets = load_triplets(args.manifest)
    if not triplets:
        raise ConfigError("manifest", f"'{args.manifest}' has no kept triplets")

    report = evaluate_dataset(triplets, model, embeddings, args.steps)
    report.save(args.out)
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_sweep_volume(args: argparse.Namespace) -> int:
    model = _load_model(args)
    src = media.read_image(args.src)
    audio = media.read_audio(args.audio)

    sweep = volume_sweep(src, audio, args.gains, model, args.seed, args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for gain, image in zip(sweep.gains, sweep.edited):
        media.write_image(out / f"gain_{gain:g}.png", image)
    with open(out / "sweep.json", "w", encoding="utf-8") as f:
        json.dump(sweep.to_dict(), f, indent=2, sort_keys=True)
    _print_json(sweep.to_dict())
    return EXIT_OK


def cmd_mos(args: argparse.Namespace) -> int:
    table = mos_aggregate(args.csv)
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(table.to_dict(), f, indent=2, sort_keys=True)
    _print_json(table.to_dict())
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _require_config(args)
    results = run_ablation(config, args.manifest, args.out, args.progress)
    _print_json({tag: report.to_dict() for tag, (_, report) in results.items()})
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "sweep-volume": cmd_sweep_volume,
    "mos": cmd_mos,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sound_brush", description="Sound-guided image editing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    parser.add_argument("--progress", action="store_true", help="show progress bars")

    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    p = commands.add_parser("build-dataset", help="generate and filter a training subset")
    p.add_argument("--config")
    p.add_argument("--subset", choices=["synthetic", "real"], required=True)
    p.add_argument("--thresholds", help="JSON overriding the config thresholds")
    p.add_argument(
        "--out", required=True, help="manifest .jsonl (or a directory); records of the other subset are kept"
    )
    p.add_argument("--seed", type=int)

    p = commands.add_parser("train", help="train the mapping network and the LoRA adapter")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from; its config snapshot is used")

    p = commands.add_parser("edit", help="edit one image with one audio clip")
    p.add_argument("--src", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="sampler steps (default: diffusion.sampler.steps)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gain", type=float, default=1.0)
    p.add_argument("--guidance-cond", type=float)
    p.add_argument("--guidance-img", type=float)

    p = commands.add_parser("eval", help="AVS / IIS / TVS / FID over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--steps", type=int)
    p.add_argument("--text-embeddings", help="JSON {category: [floats]}")

    p = commands.add_parser("sweep-volume", help="edits of one clip at several gains")
    p.add_argument("--src", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gains", type=_parse_gains, default=[0.25, 0.5, 1.0, 2.0])
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = commands.add_parser("mos", help="aggregate 1-5 opinion scores")
    p.add_argument("--csv", required=True)
    p.add_argument("--out")

    p = commands.add_parser("ablate", help="train and evaluate the token-count / InfoNCE matrix")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    return parser


def _report_error(error: Exception, code: int) -> int:
    entry = {"error": type(error).__name__, "message": str(error), "exit_code": code}
    if isinstance(error, ConfigError):
        entry["key_path"] = error.key_path
    print(json.dumps(entry), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help / --version exit 0, usage errors exit 2
        return int(e.code or 0)

    logging.basicConfig(
        level=args.log_level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        return _report_error(e, EXIT_CONFIG)
    except SoundBrushError as e:
        return _report_error(e, EXIT_ERROR)
    except OSError as e:
        return _report_error(e, EXIT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
