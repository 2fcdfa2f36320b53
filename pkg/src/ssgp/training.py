"""Losses, the staircase learning-rate schedule and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as cfgio
from .checkpoint import save_checkpoint
from .data.sample import TASK_CHANNELS, Sample, canonical_task
from .data.transforms import add_noise, normalize, photometric_augment, prepare_input
from .network import Model
from .optim import adam_step
from .sparse import MaskedFeature
from .tensor import Graph, Tensor, make_output

EPE_EPS = 1e-9


def _mask_array(gt_mask) -> np.ndarray:
    m = np.asarray(gt_mask.data if isinstance(gt_mask, Tensor) else gt_mask)
    if m.ndim == 2:
        m = m[None]
    return m > 0


def _gt_array(gt) -> np.ndarray:
    return np.asarray(gt.data if isinstance(gt, Tensor) else gt)


def loss_epe(pred: Tensor, gt, gt_mask) -> Tensor:
    """Mean Euclidean distance between predicted and gt vectors over valid pixels."""
    if pred.shape[0] < 2:
        raise ValueError(f"EPE needs at least 2 channels, got {pred.shape[0]}")
    valid = _mask_array(gt_mask)[0]
    n = int(valid.sum())
    if n == 0:
        raise ValueError("loss over an empty gt mask")
    dt = pred.data.dtype
    diff = (pred.data - _gt_array(gt).astype(dt)) * valid
    norm = np.sqrt((diff.astype(np.float64) ** 2).sum(axis=0) + EPE_EPS)
    value = np.asarray((norm * valid).sum() / n, dtype=dt)

    def backward(g):
        return ((g * diff / norm / n * valid).astype(dt),)

    return make_output(value, (pred,), backward)


def loss_mse(pred: Tensor, gt, gt_mask) -> Tensor:
    """Mean squared residual over valid pixels."""
    valid = _mask_array(gt_mask)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("loss over an empty gt mask")
    dt = pred.data.dtype
    diff = (pred.data - _gt_array(gt).astype(dt)) * valid
    value = np.asarray((diff.astype(np.float64) ** 2).sum() / (n * pred.shape[0]), dtype=dt)

    def backward(g):
        return ((g * 2 * diff / (n * pred.shape[0])).astype(dt),)

    return make_output(value, (pred,), backward)


def task_loss(task: str, pred: Tensor, gt, gt_mask) -> Tensor:
    return loss_mse(pred, gt, gt_mask) if canonical_task(task) == "depth" else \
        loss_epe(pred, gt, gt_mask)


@dataclass
class TrainConfig:
    total_steps: int = 2000
    initial_lr: float = 1e-4
    decay_rate: float = 0.8
    decay_every_fraction: float = 0.1
    task: str = "optical_flow"
    seed: int = 0
    checkpoint_every: int = 0
    augment: bool = False
    # input simulation; resparsify draws a fresh sparse input from the gt each step
    resparsify: bool = True
    density: float = 0.05
    pattern: str = "uniform"
    noise_kind: str = "gaussian"
    noise_scale: float = 0.0
    reset_optimizer: bool = False

    def __post_init__(self):
        self.task = canonical_task(self.task)
        if self.total_steps <= 0:
            raise cfgio.ConfigError(f"total_steps must be > 0, got {self.total_steps}")
        if not 0 < self.decay_rate <= 1:
            raise cfgio.ConfigError(f"decay_rate must be in (0, 1], got {self.decay_rate}")
        if not 0 < self.decay_every_fraction <= 1:
            raise cfgio.ConfigError("decay_every_fraction must be in (0, 1]")
        if self.initial_lr <= 0:
            raise cfgio.ConfigError("initial_lr must be positive")
        if not 0 < self.density <= 1:
            raise cfgio.ConfigError(f"density must be in (0, 1], got {self.density}")
        if self.checkpoint_every < 0:
            raise cfgio.ConfigError("checkpoint_every must be >= 0")

    def to_text(self) -> str:
        return cfgio.format_items(asdict(self))

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "TrainConfig":
        return cfgio.build(cls, values)


def lr_at(step: int, config: TrainConfig) -> float:
    """``initial_lr * decay_rate ** floor(step / (fraction * total_steps))``."""
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    period = Fraction(str(config.decay_every_fraction)) * config.total_steps
    return config.initial_lr * config.decay_rate ** math.floor(step / period)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    log_path: Path | None
    checkpoints: list[Path]


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def prepare_training_sample(sample: Sample, config: TrainConfig, step: int) -> Sample:
    """Input simulation and augmentation for one step (before normalization)."""
    seed = _step_seed(config.seed, step)
    if config.resparsify:
        sample = prepare_input(sample, config.density, config.pattern, config.noise_kind,
                               config.noise_scale, seed)
    elif config.noise_scale > 0:
        noisy = add_noise(MaskedFeature(Tensor(sample.sparse_values), Tensor(sample.sparse_mask)),
                          config.noise_kind, config.noise_scale, seed)
        sample = sample.with_sparse(noisy.features.data, noisy.mask.data)
    if config.augment:
        aug = photometric_augment(sample.image, seed ^ 0x5A5A)
        sample = Sample(aug, sample.sparse_values, sample.sparse_mask, sample.gt_values,
                        sample.gt_mask, sample.task)
    return sample


def sample_loss(model: Model, sample: Sample) -> Tensor:
    """Normalize, run the model and return the task loss in normalized space."""
    norm, _ = normalize(sample)
    inp = MaskedFeature(Tensor(norm.sparse_values), Tensor(norm.sparse_mask))
    out = model(Tensor(norm.image), inp)
    return task_loss(sample.task, out.dense, norm.gt_values, norm.gt_mask)


def train(model: Model, data: Sequence[Sample] | Callable[[int], Sample], config: TrainConfig,
          out_dir=None, progress: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Batch-size-one Adam training.

    ``data`` is a sequence of samples (one is drawn uniformly per step from
    a seeded stream) or a callable mapping the step index to a sample. With
    ``out_dir`` set, the loss log goes to ``loss.csv`` and checkpoints to
    ``step-NNNNNN`` files plus ``final``. A non-finite loss or gradient
    raises :class:`TrainingAborted`; checkpoints already written are kept.
    """
    if model.config.out_channels != TASK_CHANNELS[config.task]:
        raise ValueError(f"model predicts {model.config.out_channels} channels, "
                         f"task {config.task} has {TASK_CHANNELS[config.task]}")
    if callable(data):
        draw = data
    else:
        samples = list(data)
        if not samples:
            raise ValueError("empty training set")
        picks = np.random.default_rng([config.seed, 1]).integers(len(samples), size=config.total_steps)
        draw = lambda step: samples[picks[step]]  # noqa: E731

    out = Path(out_dir) if out_dir is not None else None
    writer = log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "loss.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(["step", "lr", "loss"])
    losses: list[float] = []
    ckpts: list[Path] = []
    try:
        for step in range(config.total_steps):
            sample = draw(step)
            if sample.task != config.task:
                raise ValueError(f"sample task {sample.task} does not match {config.task}")
            sample = prepare_training_sample(sample, config, step)
            lr = lr_at(step, config)
            try:
                with Graph() as g:
                    loss = sample_loss(model, sample)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise FloatingPointError("non-finite loss")
                    g.backward(loss)
                adam_step(model.params, lr)
            except FloatingPointError as exc:
                for p in model.params:
                    p.zero_grad()
                raise TrainingAborted(step, str(exc)) from exc
            losses.append(value)
            if writer is not None:
                writer.writerow([step, repr(lr), repr(value)])
            if progress is not None:
                progress(step, lr, value)
            if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                path = out / f"step-{step + 1:06d}"
                save_checkpoint(path, model.params)
                ckpts.append(path)
        if out is not None:
            path = out / "final"
            save_checkpoint(path, model.params)
            ckpts.append(path)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, losses, out / "loss.csv" if out is not None else None, ckpts)
