"""Dataset access, the alternating D/G update and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..raster_io import BandImage, ManifestRecord, RasterError, load_group_images, normalize, read_manifest
from .losses import discriminator_loss, generator_adversarial_loss, l1_loss
from .networks import Discriminator, Generator, build_discriminator, build_generator
from .spec import INPUT_MODES, ModelSpec

logger = logging.getLogger(__name__)


class DatasetError(Exception):
    """Manifest and files on disk disagree."""


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, losses: dict):
        super().__init__(f"non-finite loss at iteration {iteration}: {losses}")
        self.iteration = iteration
        self.losses = losses


@dataclass
class ModelConfig:
    levels: int = 8
    width: int = 64
    max_filters: int = 512
    dropout_layers: int = 3
    dropout: float = 0.5
    disc_layers: int = 4
    slope: float = 0.2


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 500
    l1_weight: float = 100.0
    channel_weights: list[float] | None = None  # None -> 1 for every output channel
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    input_mode: str = "rgbn"
    with_mask: bool | None = None  # None -> mask output only in rgbn mode
    disc_sees_mask: bool = True
    checkpoint_every: int = 10
    max_steps: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.learning_rate < 0 or self.l1_weight < 0:
            raise ValueError("learning_rate and l1_weight must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        weights = self.resolved_channel_weights()
        if len(weights) != self.output_channels or min(weights) < 0:
            raise ValueError(f"channel_weights must be {self.output_channels} non-negative values")

    @property
    def output_channels(self) -> int:
        if self.with_mask is None:
            return INPUT_MODES[self.input_mode][1]
        return 4 if self.with_mask else 3

    def resolved_channel_weights(self) -> list[float]:
        if self.channel_weights is None:
            return [1.0] * self.output_channels
        return [float(w) for w in self.channel_weights]

    def model_spec(self) -> ModelSpec:
        return ModelSpec.for_mode(self.input_mode, self.output_channels == 4,
                                  disc_sees_mask=self.disc_sees_mask, **asdict(self.model))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def stack_inputs(mode: str, cloudy_rgb: BandImage | None, nir: BandImage | None) -> np.ndarray:
    """Normalized (C, H, W) condition tensor for an input mode."""
    parts = []
    if mode in ("rgbn", "rgb"):
        if cloudy_rgb is None or cloudy_rgb.bands != 3:
            raise ValueError(f"mode {mode} needs a 3-band RGB image")
        parts.append(normalize(cloudy_rgb))
    if mode in ("rgbn", "nir"):
        if nir is None or nir.bands != 1:
            raise ValueError(f"mode {mode} needs a 1-band NIR image")
        parts.append(normalize(nir))
    return np.concatenate(parts, axis=2).transpose(2, 0, 1).copy()


def stack_targets(target_rgb: BandImage, mask: BandImage | None, with_mask: bool) -> np.ndarray:
    parts = [normalize(target_rgb)]
    if with_mask:
        parts.append(normalize(mask))
    return np.concatenate(parts, axis=2).transpose(2, 0, 1).copy()


class GroupDataset:
    """Indexed (condition, target) pairs read from a dataset manifest."""

    def __init__(self, root: str | os.PathLike, input_mode: str = "rgbn", with_mask: bool | None = None,
                 ids: Sequence[str] | None = None, cache: bool = True):
        self.root = Path(root)
        _, records = read_manifest(self.root)
        by_id = {r.group_id: r for r in records}
        if ids is not None:
            missing = [i for i in ids if i not in by_id]
            if missing:
                raise DatasetError(f"selected ids not in manifest: {missing[:5]}")
            records = [by_id[i] for i in ids]
        self.records: list[ManifestRecord] = records
        self.input_mode = input_mode
        self.with_mask = INPUT_MODES[input_mode][1] == 4 if with_mask is None else with_mask
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] | None = {} if cache else None
        for rec in records:
            for rel in rec.paths.values():
                if not (self.root / rel).is_file():
                    raise DatasetError(f"group {rec.group_id}: missing file {rel}")

    def __len__(self) -> int:
        return len(self.records)

    def images(self, index: int) -> dict[str, BandImage]:
        try:
            return load_group_images(self.root, self.records[index])
        except RasterError as exc:
            raise DatasetError(str(exc)) from exc

    def __getitem__(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        imgs = self.images(index)
        item = (stack_inputs(self.input_mode, imgs["cloudy_rgb"], imgs["nir"]),
                stack_targets(imgs["target_rgb"], imgs["mask"], self.with_mask))
        if self._cache is not None:
            self._cache[index] = item
        return item

    def batch(self, indices: Sequence[int], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        xs, ys = zip(*(self[i] for i in indices))
        return torch.from_numpy(np.stack(xs)).to(dtype), torch.from_numpy(np.stack(ys)).to(dtype)


@dataclass
class TrainState:
    config: TrainConfig
    spec: ModelSpec
    generator: Generator
    discriminator: Discriminator
    g_optimizer: torch.optim.Optimizer
    d_optimizer: torch.optim.Optimizer
    epoch: int = 0
    iteration: int = 0

    @property
    def channel_weights(self) -> list[float]:
        return self.config.resolved_channel_weights()


def _adam(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.learning_rate, betas=(config.beta1, config.beta2))


def init_state(config: TrainConfig, dtype=torch.float32) -> TrainState:
    config.validate()
    spec = config.model_spec()
    gen = build_generator(spec, config.seed).to(dtype)
    disc = build_discriminator(spec, config.seed).to(dtype)
    return TrainState(config, spec, gen, disc, _adam(gen.parameters(), config), _adam(disc.parameters(), config))


def discriminator_step(state: TrainState, x: torch.Tensor, y: torch.Tensor,
                       fake: torch.Tensor) -> torch.Tensor:
    state.d_optimizer.zero_grad(set_to_none=True)
    d_real = state.discriminator(x, y)
    d_fake = state.discriminator(x, fake.detach())
    d_loss = discriminator_loss(d_real, d_fake, from_logits=True)
    d_loss.backward()
    state.d_optimizer.step()
    return d_loss.detach()


def generator_step(state: TrainState, x: torch.Tensor, y: torch.Tensor,
                   fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    state.g_optimizer.zero_grad(set_to_none=True)
    g_adv = generator_adversarial_loss(state.discriminator(x, fake), from_logits=True)
    l1 = l1_loss(y, fake, state.channel_weights)
    g_loss = g_adv + state.config.l1_weight * l1
    g_loss.backward()
    state.g_optimizer.step()
    return g_adv.detach(), l1.detach(), g_loss.detach()


def generator_objective(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """The generator's combined loss (adversarial + weighted L1), differentiable."""
    fake = state.generator(x)
    g_adv = generator_adversarial_loss(state.discriminator(x, fake), from_logits=True)
    return g_adv + state.config.l1_weight * l1_loss(y, fake, state.channel_weights)


def discriminator_objective(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    fake = state.generator(x).detach()
    return discriminator_loss(state.discriminator(x, y), state.discriminator(x, fake), from_logits=True)


def train_step(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> dict:
    """One discriminator update on (x, y) vs (x, G(x)), then one generator update."""
    state.generator.train()
    state.discriminator.train()
    fake = state.generator(x)
    d_loss = discriminator_step(state, x, y, fake)
    g_adv, l1, g_loss = generator_step(state, x, y, fake)
    record = {
        "epoch": state.epoch,
        "iteration": state.iteration,
        "d_loss": float(d_loss),
        "g_adv": float(g_adv),
        "l1": float(l1),
        "g_loss": float(g_loss),
    }
    if not all(math.isfinite(record[k]) for k in ("d_loss", "g_adv", "l1", "g_loss")):
        raise TrainingDiverged(state.iteration, record)
    state.iteration += 1
    return record


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def run_epoch(state: TrainState, dataset: GroupDataset, metrics=None) -> list[dict]:
    """Train on one seeded permutation of ``dataset``; stops early at ``max_steps``."""
    cfg = state.config
    seed = epoch_seed(cfg.seed, state.epoch)
    order = np.random.default_rng(seed).permutation(len(dataset))
    torch.manual_seed(seed)  # dropout masks
    records = []
    for start in range(0, len(order), cfg.batch_size):
        if cfg.max_steps is not None and state.iteration >= cfg.max_steps:
            break
        x, y = dataset.batch(order[start:start + cfg.batch_size],
                             next(state.generator.parameters()).dtype)
        rec = train_step(state, x, y)
        records.append(rec)
        if metrics is not None:
            metrics.write(json.dumps(rec) + "\n")
    return records


@dataclass
class TrainResult:
    state: TrainState
    checkpoints: list[Path]
    history: list[dict]


def _resume_key(config: TrainConfig) -> dict:
    # run length and checkpoint cadence may change across a resume
    d = config.to_dict()
    for key in ("epochs", "max_steps", "checkpoint_every"):
        d.pop(key)
    return d


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.ckpt"


def train(dataset: GroupDataset, config: TrainConfig, out_dir: str | os.PathLike,
          resume: str | os.PathLike | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs, checkpointing every ``checkpoint_every``.

    A fresh run writes an epoch-0 checkpoint first; resuming continues from
    the stored epoch with identical per-epoch seeds, so the loss trace
    matches an uninterrupted run. Per-iteration losses go to
    ``metrics.jsonl`` in ``out_dir``.
    """
    from .checkpoint import load_checkpoint, restore_state, save_checkpoint

    config.validate()
    if len(dataset) == 0 and config.epochs > 0:
        raise DatasetError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoints: list[Path] = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if _resume_key(ckpt.config) != _resume_key(config):
            raise ValueError("resume config differs from the checkpoint snapshot")
        state = restore_state(ckpt, config)
        mode = "a"
    else:
        state = init_state(config)
        checkpoints.append(save_checkpoint(out / checkpoint_name(0), state))
        mode = "w"
    history: list[dict] = []
    with open(out / "metrics.jsonl", mode) as metrics:
        while state.epoch < config.epochs:
            if config.max_steps is not None and state.iteration >= config.max_steps:
                break
            history += run_epoch(state, dataset, metrics)
            metrics.flush()
            state.epoch += 1
            last = state.epoch == config.epochs or (
                config.max_steps is not None and state.iteration >= config.max_steps)
            if state.epoch % config.checkpoint_every == 0 or last:
                checkpoints.append(save_checkpoint(out / checkpoint_name(state.epoch), state))
            if history:
                logger.info("epoch %d: g_loss %.4f d_loss %.4f", state.epoch,
                            history[-1]["g_loss"], history[-1]["d_loss"])
    return TrainResult(state, checkpoints, history)
