"""Frame-level syllable classification: finetuning, linear probing, inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dataio
from .analysis import frame_metrics
from .dsp import AugmentConfig, SpectrogramConfig, compute_spectrogram
from .model import ModelConfig, ResMLPRNN, build_model
from .training import (
    CsvLog,
    TrainPlan,
    check_finite,
    load_backbone,
    make_optimizer,
    save_checkpoint,
    set_lr,
    steps_per_epoch,
    supervised_plan,
)

log = logging.getLogger(__name__)

EPS = 1e-12


def _check_labels(y, n_classes):
    if y.numel() and (int(y.max()) >= n_classes or int(y.min()) < 0):
        raise ValueError(f"labels out of range for {n_classes} classes")


def frame_ce(p, y, valid=None):
    """Mean ``-log p[y]`` over valid frames; ``p`` holds probabilities ``(B, T, C)``."""
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=torch.long)
    _check_labels(y, p.shape[-1])
    valid = torch.ones(y.shape, dtype=torch.bool) if valid is None else torch.as_tensor(valid, dtype=torch.bool)
    picked = p.gather(-1, y.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked + EPS)[valid].mean()


def frame_ce_logits(z, y, valid=None):
    """:func:`frame_ce` evaluated from logits (softmax at temperature 1)."""
    z = torch.as_tensor(z)
    y = torch.as_tensor(y, dtype=torch.long)
    _check_labels(y, z.shape[-1])
    valid = torch.ones(y.shape, dtype=torch.bool) if valid is None else torch.as_tensor(valid, dtype=torch.bool)
    nll = -F.log_softmax(z, dim=-1).gather(-1, y.unsqueeze(-1)).squeeze(-1)
    return nll[valid].mean()


@dataclass
class TrainResult:
    model: ResMLPRNN
    log: CsvLog
    checkpoint_sha256: str | None = None


def classifier_from(init, num_classes: int, model_cfg: ModelConfig | None = None, seed: int = 0) -> ResMLPRNN:
    """Fresh classifier; ``init`` is ``None``/``"random"`` or a loaded checkpoint dict."""
    if init is None or (isinstance(init, str) and init == "random"):
        cfg = replace(model_cfg or ModelConfig(), head="classifier", num_classes=num_classes)
        return build_model(cfg, seed=seed)
    src = ModelConfig(**init["model_config"])
    cfg = replace(src, head="classifier", num_classes=num_classes)
    if model_cfg is not None:
        cfg = replace(cfg, dropout=model_cfg.dropout)
    model = build_model(cfg, seed=seed)
    return load_backbone(model, init)


def train_supervised(train_recs, num_classes: int, plan: TrainPlan | None = None, rng=None, *, init=None,
                     model_cfg: ModelConfig | None = None, spec_cfg: SpectrogramConfig | None = None,
                     aug: AugmentConfig | None = None, freeze_backbone: bool = False, out_dir=None,
                     seed: int = 0, model: ResMLPRNN | None = None) -> TrainResult:
    plan = plan or supervised_plan()
    rng = rng if rng is not None else np.random.default_rng(seed)
    spec_cfg = spec_cfg or SpectrogramConfig()
    aug = AugmentConfig.off() if freeze_backbone else (aug or AugmentConfig())
    for r in train_recs:
        if r.classes and max(r.classes) >= num_classes:
            raise ValueError(f"recording {r.id} has label {max(r.classes)} >= num_classes {num_classes}")
    if model is None:
        model = classifier_from(init, num_classes, model_cfg, seed)
    if model.cfg.num_classes != num_classes:
        raise ValueError(f"head has {model.cfg.num_classes} classes, split has {num_classes}")
    if freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    torch.manual_seed(seed)
    opt = make_optimizer(model.parameters(), plan)
    out_dir = None if out_dir is None else Path(out_dir)
    history = CsvLog(None if out_dir is None else out_dir / "train_loss.csv", ["epoch", "lr", "loss"])
    n_steps = steps_per_epoch(len(train_recs), plan)

    for epoch in range(plan.epochs):
        model.train()
        if freeze_backbone:
            model.backbone.eval()
        total, count = 0.0, 0
        for step, recs in enumerate(dataio.epoch_batches(train_recs, plan.batch_size, rng, repeats=plan.crops_per_recording)):
            set_lr(opt, plan.lr_at(epoch + step / n_steps))
            batch = dataio.make_batch(recs, plan.crop_window_s, True, rng, spec_cfg=spec_cfg, aug=aug)
            z = model(torch.from_numpy(batch.x))
            loss = frame_ce_logits(z, torch.from_numpy(batch.y), torch.from_numpy(batch.valid))
            total += check_finite(loss, f"train epoch {epoch} step {step}")
            count += 1
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        history.append(epoch=epoch, lr=plan.lr_at(epoch), loss=total / max(count, 1))
        log.info("train epoch %d loss %.5f", epoch, total / max(count, 1))

    sha = None
    if out_dir is not None:
        stage = "probe" if freeze_backbone else "train"
        sha = save_checkpoint(out_dir / "checkpoint.pt", model, stage=stage, epoch=plan.epochs, optimizer=opt, rng=rng)
    return TrainResult(model, history, sha)


def predict_full(model: ResMLPRNN, rec, spec_cfg: SpectrogramConfig | None = None):
    """Full-length inference; returns ``(labels (T,), probabilities (T, C))``."""
    spec_cfg = spec_cfg or SpectrogramConfig()
    x = compute_spectrogram(rec.samples, spec_cfg)
    model.eval()
    with torch.no_grad():
        z = model(torch.from_numpy(x)[None])[0]
    probs = torch.softmax(z.double(), dim=-1).numpy()
    return probs.argmax(axis=-1), probs


def evaluate(model: ResMLPRNN, recs, spec_cfg: SpectrogramConfig | None = None, *, include_background=True):
    """Frame metrics pooled over all frames of ``recs``."""
    spec_cfg = spec_cfg or SpectrogramConfig()
    preds, trues = [], []
    for r in recs:
        pred, _ = predict_full(model, r, spec_cfg)
        preds.append(pred)
        trues.append(r.frame_labels(spec_cfg))
    pred = np.concatenate(preds)
    true = np.concatenate(trues)
    return frame_metrics(pred, true, None, model.cfg.num_classes, include_background=include_background)
