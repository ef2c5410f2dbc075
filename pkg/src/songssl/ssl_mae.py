"""Masked-prediction pretraining on spectrogram frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import dataio
from .dsp import AugmentConfig, SpectrogramConfig
from .model import ModelConfig, ResMLPRNN, build_model
from .training import CsvLog, TrainPlan, check_finite, make_optimizer, mae_plan, save_checkpoint, set_lr, steps_per_epoch

log = logging.getLogger(__name__)


@dataclass
class MaeMaskSpec:
    block_len: int = 200
    start_max: int = 100
    min_len: int = 50
    max_len: int = 200


def sample_mask_runs(n_frames: int, rng, spec: MaeMaskSpec | None = None):
    """One ``(start, length)`` draw per block; lengths are pre-clipping."""
    spec = spec or MaeMaskSpec()
    n_blocks = -(-n_frames // spec.block_len)
    starts = rng.integers(0, spec.start_max, size=n_blocks)
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n_blocks)
    offsets = np.arange(n_blocks) * spec.block_len + starts
    return offsets, lengths


def runs_to_mask(n_frames: int, offsets, lengths) -> np.ndarray:
    mask = np.zeros(n_frames, dtype=bool)
    for s, n in zip(offsets, lengths):
        mask[s : min(s + n, n_frames)] = True
    return mask


def make_masked_view(x, rng, spec: MaeMaskSpec | None = None):
    """Zero masked runs of frames in ``x`` (B, T, F); returns ``(x_masked, mask)``."""
    x = np.asarray(x)
    b, t = x.shape[:2]
    mask = np.zeros((b, t), dtype=bool)
    for i in range(b):
        mask[i] = runs_to_mask(t, *sample_mask_runs(t, rng, spec))
    out = x.copy()
    out[mask] = 0
    return out, mask


def mae_loss(z, x, valid) -> torch.Tensor:
    """Squared error summed over valid frames and bins, divided by ``n_valid * F``."""
    z = torch.as_tensor(z)
    x = torch.as_tensor(x, dtype=z.dtype)
    valid = torch.as_tensor(valid, dtype=torch.bool)
    if z.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(z.shape)} vs {tuple(x.shape)}")
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid frames")
    diff = (z - x)[valid]
    return diff.pow(2).sum() / (n * z.shape[-1])


@dataclass
class PretrainResult:
    model: ResMLPRNN
    log: CsvLog
    checkpoint_sha256: str | None = None


def mae_views(recs, window_s, rng, aug: AugmentConfig, spec_cfg: SpectrogramConfig):
    """Clean target batch, plus the augmented and block-masked input for the same crops."""
    crops = dataio.crop_recordings(recs, window_s, rng, with_labels=False, spec_cfg=spec_cfg)
    clean = dataio.batch_from_crops(crops, spec_cfg)
    wave_aug = replace(aug, bernoulli=False, tf_mask=False)
    noisy = dataio.batch_from_crops(crops, spec_cfg, aug=wave_aug, rng=rng)
    masked, mask = make_masked_view(noisy.x, rng)
    return clean, masked, mask


def pretrain_mae(corpus, plan: TrainPlan | None = None, rng=None, *, model_cfg: ModelConfig | None = None,
                 spec_cfg: SpectrogramConfig | None = None, aug: AugmentConfig | None = None,
                 out_dir=None, plot_every: int = 0, seed: int = 0) -> PretrainResult:
    plan = plan or mae_plan()
    rng = rng if rng is not None else np.random.default_rng(seed)
    spec_cfg = spec_cfg or SpectrogramConfig()
    aug = aug or AugmentConfig()
    model_cfg = replace(model_cfg or ModelConfig(), head="masked_prediction", input_bins=spec_cfg.freq_bins)
    model = build_model(model_cfg, seed=seed)
    torch.manual_seed(seed)
    opt = make_optimizer(model.parameters(), plan)
    out_dir = None if out_dir is None else Path(out_dir)
    history = CsvLog(None if out_dir is None else out_dir / "loss.csv", ["epoch", "lr", "loss"])
    n_steps = steps_per_epoch(len(corpus), plan)

    for epoch in range(plan.epochs):
        model.train()
        total, count = 0.0, 0
        for step, recs in enumerate(dataio.epoch_batches(corpus, plan.batch_size, rng, repeats=plan.crops_per_recording)):
            lr = plan.lr_at(epoch + step / n_steps)
            set_lr(opt, lr)
            clean, masked, _ = mae_views(recs, plan.crop_window_s, rng, aug, spec_cfg)
            z = model(torch.from_numpy(masked))
            loss = mae_loss(z, torch.from_numpy(clean.x), torch.from_numpy(clean.valid))
            value = check_finite(loss, f"mae epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += value
            count += 1
        history.append(epoch=epoch, lr=plan.lr_at(epoch), loss=total / max(count, 1))
        log.info("mae epoch %d loss %.5f", epoch, total / max(count, 1))
        if out_dir is not None and plot_every and (epoch + 1) % plot_every == 0:
            from .plots import reconstruction_triptych

            clean, masked, _ = mae_views(corpus[:1], plan.crop_window_s, np.random.default_rng(epoch), aug, spec_cfg)
            model.eval()
            with torch.no_grad():
                pred = model(torch.from_numpy(masked)).numpy()
            reconstruction_triptych(clean.x[0], masked[0], pred[0], out_dir / f"recon_epoch{epoch + 1:04d}.png")

    sha = None
    if out_dir is not None:
        sha = save_checkpoint(out_dir / "checkpoint.pt", model, stage="pretrain-mae", epoch=plan.epochs,
                              optimizer=opt, rng=rng)
    return PretrainResult(model, history, sha)
