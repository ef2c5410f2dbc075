"""Res-MLP-RNN backbone, task heads and the EMA teacher."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

HEADS = ("masked_prediction", "clustering", "classifier")


@dataclass
class ModelConfig:
    input_bins: int = 256
    hidden: int = 512
    lstm_hidden: int = 512
    num_blocks: int = 2
    # linear+SiLU layers in front of each LSTM
    mlp_layers: int = field(default=1, metadata={"deviation": True})
    dropout: float = field(default=0.1, metadata={"deviation": True})
    residual_from: int = field(default=1, metadata={"deviation": True})
    residual_to: int = field(default=2, metadata={"deviation": True})
    head: str = "classifier"
    num_classes: int = 21
    num_prototypes: int = 1024
    normalize_prototypes: bool = field(default=False, metadata={"deviation": True})

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"invalid head {self.head!r}; expected one of {HEADS}")
        if self.num_blocks < 1 or self.mlp_layers < 1:
            raise ValueError("num_blocks and mlp_layers must be >= 1")
        if self.num_blocks > 1 and not 1 <= self.residual_from < self.residual_to <= self.num_blocks:
            raise ValueError("residual taps must satisfy 1 <= from < to <= num_blocks")

    def backbone_signature(self) -> dict:
        keys = ("input_bins", "hidden", "lstm_hidden", "num_blocks", "mlp_layers", "residual_from", "residual_to")
        return {k: getattr(self, k) for k in keys}


class MLPRNNBlock(nn.Module):
    """LN -> (FC+SiLU)*n -> biLSTM -> FC(2h->d) -> Dropout."""

    def __init__(self, in_dim, hidden, lstm_hidden, mlp_layers, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(in_dim)
        layers = []
        d = in_dim
        for _ in range(mlp_layers):
            layers += [nn.Linear(d, hidden), nn.SiLU()]
            d = hidden
        self.mlp = nn.Sequential(*layers)
        self.lstm = nn.LSTM(hidden, lstm_hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * lstm_hidden, hidden)
        self.drop = nn.Dropout(dropout)
        for name, p in self.lstm.named_parameters():
            if name.startswith("weight_hh"):
                for gate in p.data.chunk(4, dim=0):
                    nn.init.orthogonal_(gate)

    def forward(self, x):
        h = self.mlp(self.norm(x))
        h, _ = self.lstm(h)
        return self.drop(self.proj(h))


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.input_bins] + [cfg.hidden] * (cfg.num_blocks - 1)
        self.blocks = nn.ModuleList(
            MLPRNNBlock(d, cfg.hidden, cfg.lstm_hidden, cfg.mlp_layers, cfg.dropout) for d in dims
        )

    def forward(self, x):
        outs = []
        h = x
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if self.cfg.num_blocks > 1 and i == self.cfg.residual_to:
                h = h + outs[self.cfg.residual_from - 1]
            outs.append(h)
        return h


class PrototypeHead(nn.Module):
    def __init__(self, hidden, num_prototypes, normalize=False):
        super().__init__()
        self.proj = nn.Linear(hidden, hidden)
        self.prototypes = nn.Parameter(torch.empty(num_prototypes, hidden))
        nn.init.kaiming_uniform_(self.prototypes, a=5**0.5)
        self.normalize = normalize

    def forward(self, h):
        h = self.proj(h)
        protos = self.prototypes
        if self.normalize:
            h = F.normalize(h, dim=-1)
            protos = F.normalize(protos, dim=-1)
        return h @ protos.t()


def make_head(cfg: ModelConfig) -> nn.Module:
    if cfg.head == "masked_prediction":
        return nn.Linear(cfg.hidden, cfg.input_bins)
    if cfg.head == "clustering":
        return PrototypeHead(cfg.hidden, cfg.num_prototypes, cfg.normalize_prototypes)
    return nn.Linear(cfg.hidden, cfg.num_classes)


class ResMLPRNN(nn.Module):
    """Per-frame model: ``(B, T, F) -> (B, T, H)``; no temporal pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.head = make_head(cfg)

    def forward(self, x):
        if x.shape[-1] != self.cfg.input_bins:
            raise ValueError(f"expected {self.cfg.input_bins} input bins, got {x.shape[-1]}")
        return self.head(self.backbone(x))

    def embed(self, x):
        return self.backbone(x)

    def replace_head(self, **changes) -> "ResMLPRNN":
        cfg = replace(self.cfg, **changes)
        self.cfg = cfg
        self.backbone.cfg = cfg
        self.head = make_head(cfg)
        return self


def build_model(cfg: ModelConfig, seed: int | None = None) -> ResMLPRNN:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return ResMLPRNN(cfg)
    return ResMLPRNN(cfg)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def forward(model: ResMLPRNN, x, train_mode: bool = False):
    model.train(train_mode)
    x = torch.as_tensor(x, dtype=next(model.parameters()).dtype)
    if train_mode:
        return model(x)
    with torch.no_grad():
        return model(x)


# ----------------------------------------------------------------------------
# teacher
# ----------------------------------------------------------------------------


def make_teacher(student: nn.Module) -> nn.Module:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, decay: float) -> nn.Module:
    """``teacher = decay * teacher + (1 - decay) * student``; buffers are copied."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter sets differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        tp.mul_(decay).add_(sp.detach(), alpha=1.0 - decay)
    for (_, tb), (_, sb) in zip(teacher.named_buffers(), student.named_buffers()):
        tb.copy_(sb)
    return teacher


def ema_decay_schedule(step, total_steps, start=0.995, end=0.99998, ramp_fraction=0.5) -> float:
    """Linear ramp from ``start`` to ``end`` over the first ``ramp_fraction`` of steps, then flat."""
    if step > total_steps:
        raise ValueError(f"step {step} beyond total_steps {total_steps}")
    ramp = ramp_fraction * total_steps
    if ramp <= 0 or step >= ramp:
        return float(end)
    return float(start + (end - start) * step / ramp)
