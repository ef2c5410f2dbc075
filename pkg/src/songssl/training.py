"""Shared training plumbing: plans, learning-rate schedule, seeding, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ResMLPRNN, build_model

CHECKPOINT_FORMAT = "songssl-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainPlan:
    optimizer: str = "adamw"
    weight_decay: float = 1e-3
    epochs: int = 300
    lr_start: float = 1e-6
    lr_peak: float = 1e-3
    lr_min: float = 1e-6
    warmup_epochs: float = 30
    hold_epochs: float = 0
    batch_size: int = 8
    crop_window_s: float | None = 10.0
    # crops drawn from every recording per epoch
    crops_per_recording: int = 1

    def __post_init__(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.warmup_epochs + self.hold_epochs > self.epochs:
            raise ValueError("warmup + hold exceeds epochs")

    def lr_at(self, epoch: float) -> float:
        """Linear warmup, constant hold, cosine decay to ``lr_min`` at ``epochs``."""
        w, h = self.warmup_epochs, self.hold_epochs
        if epoch < w:
            return self.lr_start + (self.lr_peak - self.lr_start) * epoch / w
        if epoch < w + h:
            return self.lr_peak
        span = self.epochs - w - h
        if span <= 0:
            return self.lr_peak
        progress = min(max((epoch - w - h) / span, 0.0), 1.0)
        return self.lr_min + (self.lr_peak - self.lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))

    def scaled(self, epochs: int) -> "TrainPlan":
        """Same schedule shape compressed (or stretched) to ``epochs``."""
        f = epochs / self.epochs
        return replace(self, epochs=epochs, warmup_epochs=self.warmup_epochs * f, hold_epochs=self.hold_epochs * f)


def mae_plan() -> TrainPlan:
    return TrainPlan(optimizer="adam", weight_decay=0.0, epochs=200, lr_start=1e-5, lr_peak=1e-3, lr_min=1e-5,
                     warmup_epochs=20, hold_epochs=10, batch_size=16, crop_window_s=3.0)


def osc_plan() -> TrainPlan:
    return TrainPlan(optimizer="adamw", weight_decay=5e-2, epochs=200, lr_start=1e-6, lr_peak=5e-4, lr_min=1e-6,
                     warmup_epochs=20, hold_epochs=10, batch_size=16, crop_window_s=3.0)


def supervised_plan() -> TrainPlan:
    return TrainPlan(optimizer="adamw", weight_decay=1e-3, epochs=300, lr_start=1e-6, lr_peak=1e-3, lr_min=1e-6,
                     warmup_epochs=30, hold_epochs=0, batch_size=8, crop_window_s=10.0)


def semi_plan() -> TrainPlan:
    return TrainPlan(optimizer="adamw", weight_decay=1e-3, epochs=30, lr_start=1e-7, lr_peak=1e-4, lr_min=1e-7,
                     warmup_epochs=3, hold_epochs=0, batch_size=8, crop_window_s=10.0)


def make_optimizer(params, plan: TrainPlan) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if plan.optimizer == "adam":
        return torch.optim.Adam(params, lr=plan.lr_start, weight_decay=plan.weight_decay)
    return torch.optim.AdamW(params, lr=plan.lr_start, weight_decay=plan.weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return np.random.default_rng(seed)


def check_finite(loss, where: str):
    value = float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss ({value}) at {where}")
    return value


def steps_per_epoch(n_items: int, plan: TrainPlan) -> int:
    return max(1, math.ceil(n_items * plan.crops_per_recording / plan.batch_size))


class CsvLog:
    def __init__(self, path, columns):
        self.rows: list[dict] = []
        self.columns = list(columns)
        self.path = None if path is None else Path(path)

    def append(self, **row):
        self.rows.append(row)
        if self.path is not None:
            self.write()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def column(self, name):
        return [r[name] for r in self.rows]


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(path, model: ResMLPRNN, *, stage: str, epoch: int, optimizer=None, rng=None,
                    extra: dict | None = None) -> str:
    """Write a checkpoint and return its sha256."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "epoch": epoch,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "numpy_rng": None if rng is None else rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, expect: ModelConfig | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ckpt.get('version')}")
    if expect is not None:
        got = ModelConfig(**ckpt["model_config"])
        if got != expect:
            diff = {k: (v, getattr(expect, k)) for k, v in asdict(got).items() if getattr(expect, k) != v}
            raise CheckpointError(f"model config mismatch (checkpoint, expected): {diff}")
    return ckpt


def model_from_checkpoint(ckpt: dict) -> ResMLPRNN:
    cfg = ModelConfig(**ckpt["model_config"])
    model = build_model(cfg)
    model.load_state_dict(ckpt["state_dict"])
    return model


def load_backbone(model: ResMLPRNN, ckpt: dict) -> ResMLPRNN:
    """Copy backbone weights from ``ckpt`` into ``model``; SSL heads are discarded."""
    src = ModelConfig(**ckpt["model_config"])
    if src.backbone_signature() != model.cfg.backbone_signature():
        raise CheckpointError(
            f"backbone mismatch: checkpoint {src.backbone_signature()} vs model {model.cfg.backbone_signature()}"
        )
    state = {k[len("backbone."):]: v for k, v in ckpt["state_dict"].items() if k.startswith("backbone.")}
    model.backbone.load_state_dict(state)
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
