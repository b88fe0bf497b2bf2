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


"""Joint optimization of the mapping network and the LoRA adapter.

Encoders, autoencoder and base denoiser stay frozen; their outputs for each
triplet (audio embedding, before/after latents, image embedding of the
after image) are computed once and cached.
"""

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from tqdm import tqdm

from sound_brush.checkpoint import (
    checkpoint_payload,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from sound_brush.config import GlobalConfig, config_from_dict, config_to_dict
from sound_brush.dataset_builder import load_triplets
from sound_brush.errors import ConfigError, ShapeError, TrainingDivergedError
from sound_brush.evaluation import MetricsReport, evaluate_dataset
from sound_brush.losses import (
    LossReport,
    LossWeights,
    info_nce,
    l1_token_reg,
    ldm_loss,
    objective,
)
from sound_brush.model import SoundBrush
from sound_brush.structures import EditTriplet

logger = logging.getLogger(__name__)

LOG_TAIL = 20


@dataclass
class PreparedSet:
    """Frozen-encoder outputs for N triplets."""

    f_a: torch.Tensor
    z_before: torch.Tensor
    z_after: torch.Tensor
    q_i: torch.Tensor

    def __len__(self) -> int:
        return self.f_a.shape[0]

    def subset(self, idx: torch.Tensor) -> "PreparedSet":
        return PreparedSet(self.f_a[idx], self.z_before[idx], self.z_after[idx], self.q_i[idx])


@dataclass
class RunResult:
    checkpoint: Optional[Path]
    step: int
    stopped_early: bool
    best_val: float
    history: List[LossReport] = field(default_factory=list)
    val_history: List[Tuple[int, float]] = field(default_factory=list)


class Trainer:

    def __init__(self, config: GlobalConfig, model: Optional[SoundBrush] = None) -> None:
        self.name = "trainer"
        logger.info(f"[{self.name}] Configuring...")

        self.config = config
        self.train_config = config.train
        self.model = model or SoundBrush(config)
        self.dtype = config.torch_dtype

        losses = config.losses
        self.weights = LossWeights(
            losses.lambda_nce if self.train_config.use_nce else 0.0, losses.lambda_l1
        )
        self.optimizer = torch.optim.Adam(
            self.model.trainable_parameters(), lr=self.train_config.learning_rate
        )
        self.generator = torch.Generator().manual_seed(config.seed)

        self.step = 0
        self.best_val = math.inf
        self.stale_evals = 0
        self.log_tail: List[Dict[str, Any]] = []
        self.order: List[int] = []
        self.cursor = 0
        self.null_context = self.model.null_condition()

        logger.info(
            f"[{self.name}] Configured: lr={self.train_config.learning_rate}, "
            f"weights={self.weights}, batch={self.train_config.batch_size}"
        )

    def prepare(self, triplets: Sequence[EditTriplet]) -> PreparedSet:
        if not triplets:
            raise ConfigError("manifest", "no triplets to train on")
        sizes = {t.before.pixels.shape for t in triplets}
        if len(sizes) != 1:
            raise ShapeError(f"all triplets must share one image size, got {sorted(sizes)}")

        encoders, autoencoder = self.model.encoders, self.model.autoencoder
        with torch.no_grad():
            f_a = encoders.audio.encode_audio_batch([t.audio for t in triplets])
            before = torch.cat([t.before.to_tensor(self.dtype) for t in triplets])
            after = torch.cat([t.after.to_tensor(self.dtype) for t in triplets])
            z_before = autoencoder.encode_tensor(before)
            z_after = autoencoder.encode_tensor(after)
            q_i = encoders.image.encode_image_batch([t.after for t in triplets])

        return PreparedSet(
            f_a.to(self.dtype), z_before.to(self.dtype), z_after.to(self.dtype), q_i.to(self.dtype)
        )

    def compute_losses(
        self,
        data: PreparedSet,
        t: torch.Tensor,
        eps: torch.Tensor,
        drop_condition: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, LossReport]:
        """Objective for one batch with fixed timesteps and noise."""
        model = self.model
        condition = model.encoders.condition

        tokens = model.mapping(data.f_a)
        cond = condition(tokens)
        q_v = condition.project(cond)

        context = cond
        if drop_condition is not None and bool(drop_condition.any()):
            null = self.null_context.to(cond.dtype).expand_as(cond)
            context = torch.where(drop_condition.view(-1, 1, 1), null, cond)

        z_t = model.schedule.noise(data.z_after, t, eps)
        eps_pred = model.denoiser(z_t, t.double(), data.z_before, context, model.adapter)

        l_ldm = ldm_loss(eps, eps_pred)
        l_nce = info_nce(q_v, data.q_i, self.config.losses.temperature)
        l_l1 = l1_token_reg(tokens, self.config.losses.l1_reduction)
        return objective(l_ldm, l_nce, l_l1, self.weights)

    def _next_batch(self, n: int) -> torch.Tensor:
        size = min(self.train_config.batch_size, n)
        batch = []
        while len(batch) < size:
            if self.cursor >= len(self.order) or len(self.order) != n:
                self.order = torch.randperm(n, generator=self.generator).tolist()
                self.cursor = 0
            batch.append(self.order[self.cursor])
            self.cursor += 1
        return torch.tensor(batch, dtype=torch.long)

    def _draw(
        self, latents: torch.Tensor, generator: torch.Generator
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        n = latents.shape[0]
        t = torch.randint(0, self.model.schedule.timesteps, (n,), generator=generator)
        eps = torch.randn(latents.shape, generator=generator, dtype=torch.float64).to(self.dtype)
        return t, eps

    def train_step(self, data: PreparedSet) -> LossReport:
        """One Adam step on the mapping network and LoRA factors."""
        batch = data.subset(self._next_batch(len(data)))
        t, eps = self._draw(batch.z_after, self.generator)

        drop = None
        if self.train_config.cond_dropout > 0:
            drop = torch.rand(len(batch), generator=self.generator) < self.train_config.cond_dropout

        self.model.train()
        total, report = self.compute_losses(batch, t, eps, drop)
        if not report.is_finite() or not torch.isfinite(total):
            raise TrainingDivergedError(self.step + 1, report.to_dict())

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.step += 1
        return report

    def evaluate_loss(self, data: PreparedSet) -> LossReport:
        """Loss over ``data`` in one batch with noise fixed by the config seed."""
        generator = torch.Generator().manual_seed(self.config.seed + 1)
        t, eps = self._draw(data.z_after, generator)

        self.model.eval()
        with torch.no_grad():
            _, report = self.compute_losses(data, t, eps)
        return report

    def split(self, n: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Seeded train / validation indices; with fewer than two samples both are everything."""
        fraction = self.train_config.val_fraction
        if n < 2 or fraction == 0:
            everything = torch.arange(n)
            return everything, everything
        perm = torch.randperm(n, generator=torch.Generator().manual_seed(self.config.seed))
        n_val = max(1, int(round(fraction * n)))
        return perm[n_val:], perm[:n_val]

    def payload(self) -> Dict[str, Any]:
        return checkpoint_payload(
            self.model,
            self.step,
            self.optimizer,
            self.log_tail,
            self.generator.get_state(),
            extra={
                "best_val": self.best_val,
                "stale_evals": self.stale_evals,
                "order": self.order,
                "cursor": self.cursor,
            },
        )

    def load_state(self, payload: Dict[str, Any]) -> None:
        """Restores trainable weights, optimizer, counters and the RNG from a checkpoint."""
        self.model.mapping.load_state_dict(payload["mapping_network"])
        self.model.adapter.load_state_dict(payload["lora"]["state"])
        if payload["optimizer"] is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        if payload.get("rng") is not None:
            self.generator.set_state(payload["rng"])
        self.step = int(payload["step"])
        self.log_tail = list(payload["log_tail"])
        extra = payload.get("extra", {})
        self.best_val = float(extra.get("best_val", math.inf))
        self.stale_evals = int(extra.get("stale_evals", 0))
        self.order = list(extra.get("order", []))
        self.cursor = int(extra.get("cursor", 0))

    def _log(self, log_file: Optional[Any], report: LossReport, t0: float) -> None:
        entry = {"step": self.step, **report.to_dict(), "wall_time": time.time() - t0}
        self.log_tail = (self.log_tail + [entry])[-LOG_TAIL:]
        if log_file is not None:
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()

    def fit(
        self,
        triplets: Sequence[EditTriplet],
        out_dir: Optional[Union[str, Path]] = None,
        progress: bool = False,
    ) -> RunResult:
        data = self.prepare(triplets)
        train_idx, val_idx = self.split(len(data))
        train_data, val_data = data.subset(train_idx), data.subset(val_idx)
        cfg = self.train_config

        out = Path(out_dir) if out_dir is not None else None
        log_file = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_file = open(out / "train_log.jsonl", "a", encoding="utf-8")

        logger.info(
            f"[{self.name}] training on {len(train_data)} triplets, validating on {len(val_data)}, "
            f"{cfg.steps} steps"
        )

        result = RunResult(None, self.step, False, self.best_val)
        t0 = time.time()
        try:
            for _ in tqdm(range(self.step, cfg.steps), desc="Steps", disable=not progress):
                report = self.train_step(train_data)
                result.history.append(report)
                self._log(log_file, report, t0)

                if self.step % cfg.log_every == 0:
                    logger.info(
                        f"step {self.step}: l_total={report.l_total:.4f}, l_ldm={report.l_ldm:.4f}, "
                        f"l_nce={report.l_nce:.4f}, l_l1={report.l_l1:.4f}, time={time.time() - t0:.2f}s"
                    )

                if out is not None and self.step % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint_{self.step}.pt", self.payload())

                if self.step % cfg.eval_every == 0:
                    val = self.evaluate_loss(val_data).l_total
                    result.val_history.append((self.step, val))
                    if val < self.best_val:
                        self.best_val = val
                        self.stale_evals = 0
                    else:
                        self.stale_evals += 1
                    logger.info(f"step {self.step}: val l_total={val:.4f}, best={self.best_val:.4f}")
                    if self.stale_evals >= cfg.early_stop_patience:
                        logger.info(f"[{self.name}] early stop at step {self.step}")
                        result.stopped_early = True
                        break
        finally:
            if log_file is not None:
                log_file.close()

        result.step = self.step
        result.best_val = self.best_val
        if out is not None:
            result.checkpoint = save_checkpoint(out / "last.pt", self.payload())
        return result


def run(
    config: GlobalConfig,
    manifest: Union[str, Path],
    out_dir: Union[str, Path],
    progress: bool = False,
) -> RunResult:
    triplets = load_triplets(manifest)
    if not triplets:
        raise ConfigError("manifest", f"'{manifest}' has no kept triplets")
    return Trainer(config).fit(triplets, out_dir, progress)


def resume(
    checkpoint: Union[str, Path],
    triplets: Sequence[EditTriplet],
    out_dir: Optional[Union[str, Path]] = None,
    steps: Optional[int] = None,
) -> Tuple[Trainer, RunResult]:
    """Continues training from a checkpoint up to ``steps`` (default: the configured total)."""
    payload = load_checkpoint(checkpoint)
    model = restore_model(payload, str(checkpoint))
    config = model.config
    if steps is not None:
        config = replace(config, train=replace(config.train, steps=steps))
    trainer = Trainer(config, model)
    trainer.load_state(payload)
    return trainer, trainer.fit(triplets, out_dir)


ABLATION_ROWS = {
    "A": (1, True),
    "B": (5, False),
    "C": (5, True),
    "D": (10, True),
}


def ablation_config(config: GlobalConfig, n_tokens: int, use_nce: bool) -> GlobalConfig:
    data = copy.deepcopy(config_to_dict(config))
    data["mapping"]["n_tokens"] = n_tokens
    data["train"]["use_nce"] = use_nce
    return config_from_dict(data)


def run_ablation(
    config: GlobalConfig,
    dataset: Union[str, Path, Sequence[EditTriplet]],
    out_dir: Union[str, Path],
    progress: bool = False,
) -> Dict[str, Tuple[Path, MetricsReport]]:
    """Token-count / InfoNCE matrix; one checkpoint and one metrics report per row."""
    triplets = load_triplets(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not triplets:
        raise ConfigError("manifest", "no kept triplets for the ablation")
    out = Path(out_dir)
    results: Dict[str, Tuple[Path, MetricsReport]] = {}

    for tag, (n_tokens, use_nce) in ABLATION_ROWS.items():
        row_config = ablation_config(config, n_tokens, use_nce)
        logger.info(f"ablation row {tag}: n_tokens={n_tokens}, use_nce={use_nce}")

        trainer = Trainer(row_config)
        result = trainer.fit(triplets, out / f"row_{tag}", progress)
        _, val_idx = trainer.split(len(triplets))
        val_triplets = [triplets[i] for i in val_idx.tolist()]
        # FID needs two samples per side
        if len(val_triplets) < 2:
            val_triplets = list(triplets)

        trainer.model.eval()
        report = evaluate_dataset(val_triplets, trainer.model)
        report.save(out / f"row_{tag}" / "report.json")
        results[tag] = (result.checkpoint, report)

    summary = {
        tag: {"checkpoint": str(path), "n_tokens": ABLATION_ROWS[tag][0],
              "use_nce": ABLATION_ROWS[tag][1], **report.to_dict()}
        for tag, (path, report) in results.items()
    }
    with open(out / "ablation.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return results
