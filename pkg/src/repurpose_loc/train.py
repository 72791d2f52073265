"""Adam training with linear warm-up and cosine decay, selected by val mAP."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import ReproError, VideoSample, crop_video
from .evaluation import TIOU_THRESHOLDS, evaluate
from .losses import FocalParams, LossOptions, LossWeights, NonFiniteLoss, total_loss
from .model import ModelConfig, RepurposeModel, build_model, collate, parameter_checksum, save_checkpoint

logger = logging.getLogger(__name__)


class InvalidSchedule(ReproError, ValueError):
    pass


class CheckpointWriteError(ReproError, OSError):
    pass


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up to ``base_lr`` then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= warmup_steps < total_steps:
        raise InvalidSchedule(f"need 0 <= warmup_steps ({warmup_steps}) < total_steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise InvalidSchedule(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Ablation:
    modalities: tuple[str, ...] = ("A", "V", "C")
    uni_focal_on: bool = True
    alignment_on: bool = True


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    warmup_epochs: int = 5
    batch_size: int = 4
    seed: int = 0
    grad_clip_norm: float = 1.0
    weight_decay: float = 0.0
    # chance per video and epoch of training on a random clip-preserving crop
    crop_prob: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    ablation: Ablation = field(default_factory=Ablation)
    detach_fused_target: bool = False
    eval_every: int = 1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.focal, dict):
            self.focal = FocalParams(**self.focal)
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        from .model import normalize_modalities

        self.ablation.modalities = normalize_modalities(self.ablation.modalities)
        # the model is built for the ablated modality set
        if tuple(self.model.modalities) != self.ablation.modalities:
            self.model = ModelConfig.from_dict({**self.model.to_dict(), "modalities": list(self.ablation.modalities)})
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if not 0 <= self.crop_prob <= 1:
            raise ValueError("crop_prob must lie in [0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["ablation"]["modalities"] = list(self.ablation.modalities)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return cls(**raw)

    def loss_options(self) -> LossOptions:
        return LossOptions(self.ablation.uni_focal_on, self.ablation.alignment_on, self.detach_fused_target)


def batch_order(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Length-bucketed batches in a seed-determined order.

    Shuffle, sort within windows of ``4 * batch_size`` by length, cut into
    batches, shuffle the batches.
    """
    idx = rng.permutation(len(lengths))
    window = 4 * batch_size
    batches = []
    for w in range(0, len(idx), window):
        chunk = sorted(idx[w : w + window], key=lambda i: (lengths[i], i))
        batches += [list(map(int, chunk[b : b + batch_size])) for b in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def random_crop(sample: VideoSample, rng: np.random.Generator) -> VideoSample:
    """Crop around one randomly chosen clip, cutting only between clips."""
    if not sample.clips:
        return sample
    seg = sample.segment_length
    t = sample.num_segments
    keep = sample.clips[int(rng.integers(len(sample.clips)))]
    # cut c sits at c * seg, except the last one, which is the true video end
    at = np.arange(t + 1) * seg
    at[t] = sample.duration
    inside = np.zeros(t + 1, dtype=bool)
    for c in sample.clips:
        inside |= (at > c.start) & (at < c.end)
    starts = np.flatnonzero(~inside & (at <= keep.start))
    stops = np.flatnonzero(~inside & (at >= keep.end))
    first = int(rng.choice(starts))
    stop = int(rng.choice(stops[stops > first]))
    return crop_video(sample, first, stop)


def batch_loss(model: RepurposeModel, batch, config: TrainConfig, segment_length: float = 1.0):
    out = model(batch)
    return total_loss(
        out, batch, config.weights, config.focal,
        options=config.loss_options(), segment_length=segment_length, mask=batch.mask,
    )


@dataclass
class TrainResult:
    model: RepurposeModel
    best_state: dict
    best_epoch: int
    best_val_map: float
    step_log: list[dict]
    epoch_log: list[dict]
    checksum: str

    @property
    def epoch_losses(self) -> list[float]:
        return [e["train_loss"] for e in self.epoch_log]


def train(
    config: TrainConfig,
    train_videos: Sequence[VideoSample],
    val_videos: Sequence[VideoSample] = (),
    *,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a model from scratch.

    Fully deterministic for a given ``config.seed`` on CPU. When ``out_dir``
    is given, writes ``train_log.jsonl``, ``epochs.jsonl`` and the best
    checkpoint ``checkpoint.npz`` there.
    """
    if not train_videos:
        raise ValueError("no training videos")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = build_model(config.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)

    seg = train_videos[0].segment_length
    lengths = [v.num_segments for v in train_videos]
    steps_per_epoch = math.ceil(len(train_videos) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch

    out_path = Path(out_dir) if out_dir is not None else None
    step_fh = epoch_fh = None
    if out_path is not None:
        try:
            out_path.mkdir(parents=True, exist_ok=True)
            step_fh = open(out_path / "train_log.jsonl", "w")
            epoch_fh = open(out_path / "epochs.jsonl", "w")
        except OSError as exc:
            raise CheckpointWriteError(f"cannot write logs under {out_path}: {exc}") from exc

    step_log, epoch_log = [], []
    best_state = copy.deepcopy(model.state_dict())
    best_map, best_epoch = -1.0, -1
    step = 0
    try:
        for epoch in range(config.epochs):
            model.train()
            t0 = time.perf_counter()
            losses = []
            for batch_ids in batch_order(lengths, config.batch_size, rng):
                lr = lr_at(step, total_steps, warmup_steps, config.learning_rate)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                videos = [train_videos[i] for i in batch_ids]
                if config.crop_prob > 0:
                    videos = [random_crop(v, rng) if rng.random() < config.crop_prob else v for v in videos]
                batch = collate(videos)
                loss, parts = batch_loss(model, batch, config, seg)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(
                        f"non-finite loss at epoch {epoch} step {step}, batch {batch.video_ids}: {parts}"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if config.grad_clip_norm and config.grad_clip_norm > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
                optimizer.step()
                record = {"step": step, **parts, "lr": lr}
                step_log.append(record)
                losses.append(parts["total"])
                if step_fh:
                    step_fh.write(json.dumps(record) + "\n")
                step += 1

            entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr, "seconds": time.perf_counter() - t0}
            if val_videos and ((epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1):
                report = evaluate(model, val_videos, batch_size=config.batch_size)
                entry["val_mAP_per_threshold"] = {f"{t:.1f}": report.ap_per_threshold[t] for t in TIOU_THRESHOLDS}
                entry["val_avg_mAP"] = report.average
                if report.average > best_map:
                    best_map, best_epoch = report.average, epoch
                    best_state = copy.deepcopy(model.state_dict())
            elif not val_videos:
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
            epoch_log.append(entry)
            if epoch_fh:
                epoch_fh.write(json.dumps(entry) + "\n")
                epoch_fh.flush()
            logger.info("epoch %d loss %.4f val mAP %s", epoch, entry["train_loss"], entry.get("val_avg_mAP"))
            if on_epoch:
                on_epoch(entry)
    finally:
        for fh in (step_fh, epoch_fh):
            if fh:
                fh.close()

    model.load_state_dict(best_state)
    model.eval()
    if out_path is not None:
        try:
            save_checkpoint(out_path / "checkpoint.npz", model, {"best_epoch": best_epoch, "best_val_avg_mAP": best_map})
        except OSError as exc:
            raise CheckpointWriteError(f"cannot write checkpoint under {out_path}: {exc}") from exc
    return TrainResult(model, best_state, best_epoch, best_map, step_log, epoch_log, parameter_checksum(model))


__all__ = [
    "Ablation",
    "CheckpointWriteError",
    "InvalidSchedule",
    "TrainConfig",
    "TrainResult",
    "batch_loss",
    "batch_order",
    "lr_at",
    "random_crop",
    "train",
]
