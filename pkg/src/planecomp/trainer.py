"""Deterministic training loop: adaptive-moment updates with decoupled weight
decay, stepped learning-rate decay, checkpointing with exact resume.

Epoch shuffling is stateless (derived from seed and epoch index), so resuming
from a checkpoint reproduces the uninterrupted trajectory bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffkit as dk
from .diffkit import ParamStore
from .matchloss import LossWeights, total_loss
from .model import CompletionModel, ModelConfig
from .segment import Segmentation, detect_planes
from .synth import Sample


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 20
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    checkpoint_interval: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.learning_rate, self.weight_decay, self.epochs + 1, self.batch_size) < 0:
            raise ValueError("config values must be nonnegative")
        if not (0.0 < self.lr_decay < 1.0):
            raise ValueError(f"lr_decay must be in (0, 1), got {self.lr_decay}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradients; carries the last good checkpoint path."""

    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message + (f" (last good checkpoint: {checkpoint})" if checkpoint else ""))
        self.checkpoint = checkpoint


class AdamW:
    """Adaptive-moment estimation with decoupled weight decay."""

    def __init__(self, store: ParamStore, config: TrainConfig):
        self.store = store
        self.config = config
        self.step_count = 0
        self.m = {name: np.zeros_like(store[name].values) for name in store.names()}
        self.v = {name: np.zeros_like(store[name].values) for name in store.names()}

    def step(self, lr: float) -> None:
        c = self.config
        self.step_count += 1
        bc1 = 1.0 - c.beta1 ** self.step_count
        bc2 = 1.0 - c.beta2 ** self.step_count
        for name in self.store.names():
            p = self.store[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + c.eps)
            p.values -= lr * update + lr * c.weight_decay * p.values

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.store.names():
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        out["opt.step"] = np.asarray(float(self.step_count))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.store.names():
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()
        self.step_count = int(float(arrays["opt.step"]))


@dataclass
class TrainItem:
    sample: Sample
    seg: Segmentation


def prepare_items(samples: list[Sample], angle_tol: float = 10.0, dist_tol: float = 0.01,
                  min_support: int = 20) -> list[TrainItem]:
    """Segment every input cloud once up front (the expensive, model-free part)."""
    return [
        TrainItem(sample=s, seg=detect_planes(s.input_cloud, angle_tol=angle_tol,
                                              dist_tol=dist_tol, min_support=min_support))
        for s in samples
    ]


def _mean_breakdown(records: list[dict]) -> dict:
    keys = ("cls", "norm", "cp", "co", "rep", "total")
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


def train_epoch(model: CompletionModel, items: list[TrainItem], config: TrainConfig,
                optimizer: AdamW, epoch: int = 0, loss_weights: LossWeights | None = None,
                step_log=None) -> dict:
    """One pass over the items: forward, match, loss, backward, update.

    Returns the mean loss breakdown.  Raises TrainingAborted on non-finite
    numerics (callers decide which checkpoint to fall back to).
    """
    if not items:
        raise ValueError("empty training set")
    w = loss_weights or LossWeights()
    lr = config.lr_at(epoch)
    rng = np.random.default_rng(np.random.SeedSequence([0x7EA1, config.seed, epoch]))
    order = rng.permutation(len(items))
    records = []
    for start in range(0, len(order), config.batch_size):
        batch = order[start:start + config.batch_size]
        model.store.zero_grad()
        for oi in batch:
            item = items[oi]
            out = model.forward(item.sample.input_cloud, item.seg)
            breakdown, _ = total_loss(item.sample.gt_primitives, out.prediction_set(), weights=w)
            if not np.isfinite(breakdown.total):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", None)
            dk.backward(dk.mul(breakdown.tensor, 1.0 / len(batch)))
            rec = breakdown.as_dict()
            rec.update({"epoch": epoch, "sample": int(oi), "lr": lr})
            records.append(rec)
            if step_log is not None:
                step_log.write(json.dumps(rec, sort_keys=True) + "\n")
        if lr > 0.0:
            optimizer.step(lr)
    stats = _mean_breakdown(records)
    stats["epoch"] = epoch
    stats["lr"] = lr
    return stats


def save_checkpoint(model: CompletionModel, optimizer: AdamW, epoch: int, path) -> None:
    store = ParamStore()
    for name in model.store.names():
        store.create(name, model.store[name].values)
    for name, arr in optimizer.state_arrays().items():
        store.create(name, arr)
    store.create("trainer.epoch", np.asarray(float(epoch)))
    store.save(path)


def load_checkpoint(model: CompletionModel, optimizer: AdamW | None, path) -> int:
    """Restore weights (and optimizer state when given); returns the stored epoch."""
    arrays = ParamStore.read_arrays(path)
    for name in model.store.names():
        if name not in arrays:
            raise dk.FormatError(f"missing parameter '{name}' in {path}")
        if arrays[name].shape != model.store[name].values.shape:
            raise dk.FormatError(
                f"shape mismatch for parameter '{name}': "
                f"file {arrays[name].shape} vs model {model.store[name].values.shape}"
            )
    for name in model.store.names():
        model.store[name].values[...] = arrays[name]
    if optimizer is not None and "opt.step" in arrays:
        optimizer.load_state_arrays(arrays)
    return int(float(arrays.get("trainer.epoch", np.asarray(-1.0))))


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    final_checkpoint: str | None = None


def fit(model: CompletionModel, samples: list[Sample], config: TrainConfig,
        out_dir=None, loss_weights: LossWeights | None = None,
        resume_from=None, items: list[TrainItem] | None = None) -> FitResult:
    """Full training run with learning-rate schedule, checkpoints, and history."""
    if items is None:
        items = prepare_items(samples)
    optimizer = AdamW(model.store, config)
    start_epoch = 0
    if resume_from is not None:
        start_epoch = load_checkpoint(model, optimizer, resume_from) + 1
    out_path = Path(out_dir) if out_dir is not None else None
    history_fh = step_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume_from is not None else "w"
        history_fh = open(out_path / "history.jsonl", mode, encoding="utf-8")
        step_fh = open(out_path / "steps.jsonl", mode, encoding="utf-8")
    result = FitResult()
    last_ckpt = str(resume_from) if resume_from is not None else None
    try:
        for epoch in range(start_epoch, config.epochs):
            try:
                stats = train_epoch(model, items, config, optimizer, epoch=epoch,
                                    loss_weights=loss_weights, step_log=step_fh)
            except (TrainingAborted, dk.NonFinite) as e:
                raise TrainingAborted(f"aborted at epoch {epoch}: {e}", last_ckpt) from e
            result.history.append(stats)
            if history_fh is not None:
                history_fh.write(json.dumps(stats, sort_keys=True) + "\n")
                history_fh.flush()
            if out_path is not None and (
                (epoch + 1) % config.checkpoint_interval == 0 or epoch + 1 == config.epochs
            ):
                ckpt = out_path / f"checkpoint_{epoch:04d}.bin"
                save_checkpoint(model, optimizer, epoch, ckpt)
                last_ckpt = str(ckpt)
        if out_path is not None and config.epochs == 0:
            ckpt = out_path / "checkpoint_init.bin"
            save_checkpoint(model, optimizer, -1, ckpt)
            last_ckpt = str(ckpt)
    finally:
        if history_fh is not None:
            history_fh.close()
        if step_fh is not None:
            step_fh.close()
    result.final_checkpoint = last_ckpt
    return result


def train_run_config_json(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    return {
        "format_version": 1,
        "model": asdict(model_config),
        "train": asdict(train_config),
    }
