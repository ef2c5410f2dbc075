"""Online syllable clustering: prototype assignment with an EMA teacher."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dataio
from .dsp import AugmentConfig, SpectrogramConfig
from .model import ModelConfig, build_model, ema_decay_schedule, ema_update, make_teacher
from .ssl_mae import PretrainResult
from .training import CsvLog, TrainPlan, check_finite, make_optimizer, osc_plan, save_checkpoint, set_lr, steps_per_epoch

log = logging.getLogger(__name__)

EPS = 1e-12


class CollapseError(RuntimeError):
    pass


@dataclass
class OscConfig:
    num_prototypes: int = 1024
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    sinkhorn_iters: int = field(default=3, metadata={"deviation": True})
    ema_start: float = 0.995
    ema_end: float = 0.99998
    ema_ramp_fraction: float = 0.5
    collapse_share: float = field(default=0.9, metadata={"deviation": True})

    def __post_init__(self):
        if not 0 < self.teacher_temp <= self.student_temp:
            raise ValueError("need 0 < teacher_temp <= student_temp")
        if self.num_prototypes < 1:
            raise ValueError("num_prototypes must be positive")


def tempered_softmax(z, tau: float):
    z = torch.as_tensor(z)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return torch.softmax(z / tau, dim=-1)


@torch.no_grad()
def sinkhorn_assign(logits, tau: float, iters: int = 3):
    """Soft equipartitioned targets for ``(N, K)`` teacher logits.

    Starts from the row-normalised ``exp(logits / tau)``, then alternates
    column scaling to mass ``N / K`` and row scaling to mass 1.
    """
    z = torch.as_tensor(logits).detach()
    if not torch.isfinite(z).all():
        raise ValueError("non-finite logits")
    n, k = z.shape
    q = torch.softmax(z.double() / tau, dim=-1)
    for _ in range(iters):
        q = q * ((n / k) / q.sum(dim=0, keepdim=True).clamp_min(1e-300))
        q = q / q.sum(dim=1, keepdim=True)
    return q.to(z.dtype)


def _view_ce(target, log_p, valid):
    per_frame = -(target * log_p).sum(dim=-1)
    return per_frame[valid].mean()


def swapped_ce(p1, p2, q1, q2, valid=None):
    """``L(p1, q2) + L(p2, q1)`` with ``L`` the mean cross-entropy over valid frames."""
    p1, p2, q1, q2 = (torch.as_tensor(a) for a in (p1, p2, q1, q2))
    valid = _valid_mask(valid, p1)
    return _view_ce(q2, torch.log(p1 + EPS), valid) + _view_ce(q1, torch.log(p2 + EPS), valid)


def swapped_ce_logits(z1, z2, q1, q2, tau, valid=None):
    """As :func:`swapped_ce` but from student logits through ``log_softmax``."""
    valid = _valid_mask(valid, z1)
    return (_view_ce(q2, F.log_softmax(z1 / tau, dim=-1), valid)
            + _view_ce(q1, F.log_softmax(z2 / tau, dim=-1), valid))


def gini_loss(p1, p2, valid=None):
    """``1 - sum_k pbar_k**2`` with ``pbar`` the student mean over both views' valid frames."""
    p1, p2 = torch.as_tensor(p1), torch.as_tensor(p2)
    valid = _valid_mask(valid, p1)
    pbar = torch.cat([p1[valid], p2[valid]]).mean(dim=0)
    return 1.0 - (pbar * pbar).sum()


def _valid_mask(valid, ref):
    if valid is None:
        return torch.ones(ref.shape[:-1], dtype=torch.bool)
    return torch.as_tensor(valid, dtype=torch.bool)


def teacher_targets(teacher, x, valid, cfg: OscConfig):
    with torch.no_grad():
        teacher.eval()
        z = teacher(x)
        q = torch.zeros_like(z)
        q[valid] = sinkhorn_assign(z[valid], cfg.teacher_temp, cfg.sinkhorn_iters)
    return q


@dataclass
class OscStepOutput:
    loss: torch.Tensor
    ce: torch.Tensor
    gini: torch.Tensor
    # student probability mass per prototype over valid frames of both views
    usage: np.ndarray
    # hard argmax counts, view 1
    argmax_usage: np.ndarray


def osc_objective(student, teacher, x1, x2, valid, cfg: OscConfig) -> OscStepOutput:
    """Differentiable ``l_ce - l_gini`` for the student on two views."""
    q1 = teacher_targets(teacher, x1, valid, cfg)
    q2 = teacher_targets(teacher, x2, valid, cfg)
    z1, z2 = student(x1), student(x2)
    ce = swapped_ce_logits(z1, z2, q1, q2, cfg.student_temp, valid)
    p1 = torch.softmax(z1 / cfg.student_temp, dim=-1)
    p2 = torch.softmax(z2 / cfg.student_temp, dim=-1)
    gini = gini_loss(p1, p2, valid)
    with torch.no_grad():
        usage = (p1[valid].sum(dim=0) + p2[valid].sum(dim=0)).double().numpy()
        hard = np.bincount(z1[valid].argmax(dim=-1).numpy(), minlength=z1.shape[-1])
    return OscStepOutput(ce - gini, ce, gini, usage, hard)


def osc_step(student, teacher, x1, x2, valid, cfg: OscConfig, optimizer, decay: float) -> OscStepOutput:
    student.train()
    out = osc_objective(student, teacher, x1, x2, valid, cfg)
    check_finite(out.loss, "osc step")
    optimizer.zero_grad(set_to_none=True)
    out.loss.backward()
    optimizer.step()
    ema_update(teacher, student, decay)
    return out


def osc_views(recs, window_s, rng, aug: AugmentConfig, spec_cfg: SpectrogramConfig):
    crops = dataio.crop_recordings(recs, window_s, rng, with_labels=False, spec_cfg=spec_cfg)
    view_aug = replace(aug, tf_mask=False)
    b1 = dataio.batch_from_crops(crops, spec_cfg, aug=view_aug, rng=rng)
    b2 = dataio.batch_from_crops(crops, spec_cfg, aug=view_aug, rng=rng)
    return torch.from_numpy(b1.x), torch.from_numpy(b2.x), torch.from_numpy(b1.valid)


def pretrain_osc(corpus, cfg: OscConfig | None = None, plan: TrainPlan | None = None, rng=None, *,
                 model_cfg: ModelConfig | None = None, spec_cfg: SpectrogramConfig | None = None,
                 aug: AugmentConfig | None = None, out_dir=None, seed: int = 0) -> PretrainResult:
    cfg = cfg or OscConfig()
    plan = plan or osc_plan()
    rng = rng if rng is not None else np.random.default_rng(seed)
    spec_cfg = spec_cfg or SpectrogramConfig()
    aug = aug or AugmentConfig()
    model_cfg = replace(model_cfg or ModelConfig(), head="clustering", num_prototypes=cfg.num_prototypes,
                        input_bins=spec_cfg.freq_bins)
    student = build_model(model_cfg, seed=seed)
    teacher = make_teacher(student)
    torch.manual_seed(seed)
    opt = make_optimizer(student.parameters(), plan)
    out_dir = None if out_dir is None else Path(out_dir)
    columns = ["epoch", "lr", "lambda", "l_ce", "l_gini", "l_oc", "max_cluster_share", "argmax_share"]
    history = CsvLog(None if out_dir is None else out_dir / "loss.csv", columns)
    n_steps = steps_per_epoch(len(corpus), plan)
    total_steps = n_steps * plan.epochs
    global_step = 0

    for epoch in range(plan.epochs):
        sums = np.zeros(3)
        usage = np.zeros(cfg.num_prototypes)
        hard = np.zeros(cfg.num_prototypes, dtype=np.int64)
        count = 0
        decay = cfg.ema_start
        for step, recs in enumerate(dataio.epoch_batches(corpus, plan.batch_size, rng, repeats=plan.crops_per_recording)):
            set_lr(opt, plan.lr_at(epoch + step / n_steps))
            x1, x2, valid = osc_views(recs, plan.crop_window_s, rng, aug, spec_cfg)
            global_step += 1
            decay = ema_decay_schedule(min(global_step, total_steps), total_steps, cfg.ema_start, cfg.ema_end,
                                       cfg.ema_ramp_fraction)
            out = osc_step(student, teacher, x1, x2, valid, cfg, opt, decay)
            sums += [float(out.ce.detach()), float(out.gini.detach()), float(out.loss.detach())]
            usage += out.usage
            hard += out.argmax_usage
            count += 1
        ce, gini, loss = sums / max(count, 1)
        share = float(usage.max() / max(usage.sum(), 1e-12))
        hard_share = float(hard.max() / max(hard.sum(), 1))
        history.append(epoch=epoch, lr=plan.lr_at(epoch), **{"lambda": decay}, l_ce=ce, l_gini=gini, l_oc=loss,
                       max_cluster_share=share, argmax_share=hard_share)
        log.info("osc epoch %d ce %.4f gini %.4f share %.3f argmax share %.3f", epoch, ce, gini, share, hard_share)
        if share > cfg.collapse_share:
            raise CollapseError(
                f"epoch {epoch}: one prototype took {share:.1%} of the assignment mass (limit {cfg.collapse_share:.0%})"
            )

    sha = None
    if out_dir is not None:
        from .plots import osc_loss_curve

        osc_loss_curve(history, out_dir / "loss.png")
        sha = save_checkpoint(out_dir / "checkpoint.pt", student, stage="pretrain-osc", epoch=plan.epochs,
                              optimizer=opt, rng=rng)
    return PretrainResult(student, history, sha)
