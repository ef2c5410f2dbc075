"""Teacher-student post-training on unlabeled recordings of the same bird."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dataio
from .dsp import AugmentConfig, SpectrogramConfig
from .model import ResMLPRNN, ema_decay_schedule, ema_update, make_teacher
from .supervised import TrainResult, frame_ce_logits
from .training import CsvLog, TrainPlan, check_finite, make_optimizer, save_checkpoint, semi_plan, set_lr, steps_per_epoch

log = logging.getLogger(__name__)

EPS = 1e-12


@dataclass
class SemiConfig:
    confidence_threshold: float = 0.95
    ema_start: float = 0.995
    ema_end: float = 0.99998
    ema_ramp_fraction: float = 0.25
    unlabeled_weight: float = field(default=1.0, metadata={"deviation": True})
    # "gated": mean over frames passing the gate; "all": literal 1/BT over valid frames
    normalize: str = field(default="gated", metadata={"deviation": True})

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in (0, 1]")
        if self.normalize not in ("gated", "all"):
            raise ValueError("normalize must be 'gated' or 'all'")


def pseudo_label(teacher, x):
    """Hard labels and their probabilities from the teacher on clean input."""
    teacher.eval()
    with torch.no_grad():
        p = torch.softmax(teacher(torch.as_tensor(x)), dim=-1)
    conf, labels = p.max(dim=-1)
    return labels, conf


def pseudo_label_from_probs(p):
    conf, labels = torch.as_tensor(p).max(dim=-1)
    return labels, conf


def _gate(confidence, threshold, valid):
    gate = torch.as_tensor(confidence) > threshold
    if valid is not None:
        gate &= torch.as_tensor(valid, dtype=torch.bool)
    return gate


def _reduce(nll, gate, valid, normalize):
    if normalize == "all":
        denom = int(torch.as_tensor(valid, dtype=torch.bool).sum()) if valid is not None else nll.numel()
        return (nll * gate).sum() / max(denom, 1)
    n = int(gate.sum())
    if n == 0:
        return (nll * 0.0).sum()
    return (nll * gate).sum() / n


def consistency_loss(p, y_pseudo, confidence, threshold=0.95, valid=None, normalize="gated"):
    """Cross-entropy of student probabilities ``p`` against gated pseudo-labels."""
    p = torch.as_tensor(p)
    y = torch.as_tensor(y_pseudo, dtype=torch.long)
    gate = _gate(confidence, threshold, valid)
    nll = -torch.log(p.gather(-1, y.unsqueeze(-1)).squeeze(-1) + EPS)
    return _reduce(nll, gate, valid, normalize)


def consistency_loss_logits(z, y_pseudo, confidence, threshold=0.95, valid=None, normalize="gated"):
    y = torch.as_tensor(y_pseudo, dtype=torch.long)
    gate = _gate(confidence, threshold, valid)
    nll = -F.log_softmax(z, dim=-1).gather(-1, y.unsqueeze(-1)).squeeze(-1)
    return _reduce(nll, gate, valid, normalize)


def _cycle_batches(recs, batch_size, rng, repeats):
    while True:
        yield from dataio.epoch_batches(recs, batch_size, rng, repeats=repeats)


def posttrain(labeled_recs, unlabeled_recs, model: ResMLPRNN, plan: TrainPlan | None = None, rng=None, *,
              cfg: SemiConfig | None = None, spec_cfg: SpectrogramConfig | None = None,
              aug: AugmentConfig | None = None, out_dir=None, seed: int = 0) -> TrainResult:
    """Post-train ``model`` in place; one labeled and one unlabeled batch per step, losses summed.

    Labeled and unlabeled pipelines draw from independent RNG streams, so a run
    whose gate never opens follows the labeled-only trajectory exactly.
    """
    if not unlabeled_recs:
        raise ValueError("empty unlabeled set")
    plan = plan or semi_plan()
    cfg = cfg or SemiConfig()
    rng = rng if rng is not None else np.random.default_rng(seed)
    rng_lab, rng_unl = rng.spawn(2)
    spec_cfg = spec_cfg or SpectrogramConfig()
    aug = aug or AugmentConfig()
    unl_aug = replace(aug, gain=True, color_noise=True, bernoulli=True, tf_mask=False)
    teacher = make_teacher(model)
    torch.manual_seed(seed)
    opt = make_optimizer(model.parameters(), plan)
    out_dir = None if out_dir is None else Path(out_dir)
    history = CsvLog(None if out_dir is None else out_dir / "posttrain_loss.csv",
                     ["epoch", "lr", "lambda", "l_ce", "l_u", "gate_rate"])
    n_steps = steps_per_epoch(len(unlabeled_recs), plan)
    total_steps = n_steps * plan.epochs
    labeled = _cycle_batches(labeled_recs, plan.batch_size, rng_lab, plan.crops_per_recording)
    global_step = 0

    for epoch in range(plan.epochs):
        sums = np.zeros(3)
        count = 0
        decay = cfg.ema_start
        unl_batches = dataio.epoch_batches(unlabeled_recs, plan.batch_size, rng_unl, repeats=plan.crops_per_recording)
        for step, (u_recs, l_recs) in enumerate(zip(unl_batches, labeled)):
            set_lr(opt, plan.lr_at(epoch + step / n_steps))
            model.train()
            lb = dataio.make_batch(l_recs, plan.crop_window_s, True, rng_lab, spec_cfg=spec_cfg, aug=aug)
            loss_l = frame_ce_logits(model(torch.from_numpy(lb.x)), torch.from_numpy(lb.y), torch.from_numpy(lb.valid))

            crops = dataio.crop_recordings(u_recs, plan.crop_window_s, rng_unl, with_labels=False, spec_cfg=spec_cfg)
            clean = dataio.batch_from_crops(crops, spec_cfg)
            y_pseudo, conf = pseudo_label(teacher, torch.from_numpy(clean.x))
            valid = torch.from_numpy(clean.valid)
            gate = _gate(conf, cfg.confidence_threshold, valid)
            noisy = dataio.batch_from_crops(crops, spec_cfg, aug=unl_aug, rng=rng_unl)
            if bool(gate.any()):
                model.train()
                z_u = model(torch.from_numpy(noisy.x))
                loss_u = consistency_loss_logits(z_u, y_pseudo, conf, cfg.confidence_threshold, valid, cfg.normalize)
            else:
                loss_u = torch.zeros((), dtype=loss_l.dtype)
            loss = loss_l + cfg.unlabeled_weight * loss_u
            check_finite(loss, f"posttrain epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            global_step += 1
            decay = ema_decay_schedule(min(global_step, total_steps), total_steps, cfg.ema_start, cfg.ema_end,
                                       cfg.ema_ramp_fraction)
            ema_update(teacher, model, decay)
            sums += [float(loss_l.detach()), float(loss_u.detach()), float(gate.sum()) / max(int(valid.sum()), 1)]
            count += 1
        l_ce, l_u, rate = sums / max(count, 1)
        history.append(epoch=epoch, lr=plan.lr_at(epoch), **{"lambda": decay}, l_ce=l_ce, l_u=l_u, gate_rate=rate)
        log.info("posttrain epoch %d ce %.4f u %.4f gate %.3f", epoch, l_ce, l_u, rate)

    sha = None
    if out_dir is not None:
        sha = save_checkpoint(out_dir / "checkpoint.pt", model, stage="posttrain", epoch=plan.epochs, optimizer=opt,
                              rng=rng)
    return TrainResult(model, history, sha)
