"""Run configuration: nested dataclasses, YAML files, dotted overrides, run directories."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsp import AugmentConfig, SpectrogramConfig
from .model import ModelConfig
from .semisl import SemiConfig
from .ssl_osc import OscConfig
from .training import TrainPlan, mae_plan, osc_plan, semi_plan, supervised_plan

STAGES = ("synth", "pretrain-mae", "pretrain-osc", "train", "probe", "posttrain", "predict", "eval", "analyze")


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_dir: str | None = None
    split: str | None = None
    out_dir: str = "runs"
    init: str | None = None
    ckpt: str | None = None


@dataclass
class DataConfig:
    train_size: str = "few_shot"
    # posttrain pool; "test" reproduces the transductive protocol
    unlabeled: str = "test"
    allow_any_rate: bool = False


@dataclass
class SynthConfig:
    n_recordings: int = 40
    bird_id: str = "synth"
    train_fraction: float = field(default=0.2, metadata={"deviation": True})


@dataclass
class AnalysisConfig:
    # predicted segments shorter than this are treated as flicker; annotations always use 1
    min_len_frames: int = 2
    bin_ms: float = 5.0
    break_at_gaps: bool = False
    max_gap_ms: float = 500.0
    n_components: int = 32
    pooling: str = "mean"
    gmm_n_init: int = field(default=20, metadata={"deviation": True})
    rare_fraction: float = field(default=0.01, metadata={"deviation": True})
    top_exemplars: int = 5


@dataclass
class RunConfig:
    stage: str = "train"
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mae: TrainPlan = field(default_factory=mae_plan)
    osc: OscConfig = field(default_factory=OscConfig)
    osc_plan: TrainPlan = field(default_factory=osc_plan)
    train: TrainPlan = field(default_factory=supervised_plan)
    semi: SemiConfig = field(default_factory=SemiConfig)
    semi_plan: TrainPlan = field(default_factory=semi_plan)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {', '.join(STAGES)}")

    def stage_plan(self) -> TrainPlan | None:
        return {"pretrain-mae": self.mae, "pretrain-osc": self.osc_plan, "train": self.train, "probe": self.train,
                "posttrain": self.semi_plan}.get(self.stage)


# reduced-size profile used by the test suite and for CPU-only runs
DESK_PRESET = {
    "model": {"hidden": 64, "lstm_hidden": 64, "normalize_prototypes": True},
    # the default decay ramp keeps the teacher at its init for a few hundred steps
    "osc": {"num_prototypes": 64, "ema_start": 0.99, "ema_end": 0.99},
    "mae": {"epochs": 30, "warmup_epochs": 3, "hold_epochs": 1.5, "crops_per_recording": 4},
    "osc_plan": {"epochs": 30, "warmup_epochs": 3, "hold_epochs": 1.5, "crops_per_recording": 8,
                 "crop_window_s": 1.0},
    "train": {"epochs": 60, "warmup_epochs": 6, "crops_per_recording": 8},
    # ten short epochs at the default 1e-4 peak barely move the student
    "semi_plan": {"epochs": 10, "warmup_epochs": 1, "lr_peak": 1e-3},
}
PRESETS = {"full": {}, "desk": DESK_PRESET}


# ----------------------------------------------------------------------------
# dict <-> dataclass
# ----------------------------------------------------------------------------


def _coerce(tp, value, where, default=None):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where, default)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(default if default is not None else tp(), value, where + ".")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp is str and isinstance(value, str):
        return value
    raise ConfigError(f"{where}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def _build(base, doc: dict, where: str = ""):
    """Apply ``doc`` on top of the dataclass instance ``base``; nested sections keep their own defaults."""
    hints = typing.get_type_hints(type(base))
    names = {f.name for f in dataclasses.fields(base)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(sorted(where + k for k in unknown))}")
    kwargs = {k: _coerce(hints[k], v, f"{where}{k}", getattr(base, k)) for k, v in doc.items()}
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where.rstrip('.') or 'config'}: {e}") from e


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def from_dict(doc: dict) -> RunConfig:
    doc = dict(doc or {})
    doc.pop("deviations", None)
    stage = doc.get("stage", "train")
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    return _build(RunConfig(), doc)


def deviation_fields(cfg: RunConfig) -> list[str]:
    """Dotted paths of fields whose defaults are implementation choices rather than fixed recipe values."""
    out = []
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        if dataclasses.is_dataclass(section):
            out += [f"{f.name}.{g.name}" for g in dataclasses.fields(section) if g.metadata.get("deviation")]
    return out


def overridden_fields(cfg: RunConfig) -> list[str]:
    """Dotted paths whose value differs from the default."""
    ref = _flatten(to_dict(RunConfig(stage=cfg.stage)))
    return [k for k, v in _flatten(to_dict(cfg)).items() if ref.get(k) != v and k not in ("seed", "stage")
            and not k.startswith("paths.")]


def _flatten(doc, prefix=""):
    out = {}
    for k, v in doc.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def dump(cfg: RunConfig) -> str:
    """Resolved config as YAML with a trailing ``deviations`` section."""
    doc = to_dict(cfg)
    marks = {p: {"deviation": True, "kind": "design"} for p in deviation_fields(cfg)}
    for p in overridden_fields(cfg):
        marks.setdefault(p, {"deviation": True, "kind": "override"})
    doc["deviations"] = marks
    return yaml.safe_dump(doc, sort_keys=False)


def load(path) -> RunConfig:
    return from_dict(yaml.safe_load(Path(path).read_text()) or {})


def parse_override(item: str) -> dict:
    """``a.b=v`` to ``{"a": {"b": v}}``; the value is parsed as a YAML scalar."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    doc: dict = {}
    node = doc
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return doc


def resolve_config(path=None, overrides=(), *, stage: str | None = None, preset: str | None = None,
                   seed: int | None = None, epochs: int | None = None) -> RunConfig:
    """Defaults, then preset, then file, then ``--set`` overrides, then explicit flags."""
    doc: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        doc = _merge(doc, PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        file_doc = yaml.safe_load(p.read_text()) or {}
        if not isinstance(file_doc, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        file_doc.pop("deviations", None)
        doc = _merge(doc, file_doc)
    for item in overrides:
        doc = _merge(doc, parse_override(item))
    if stage is not None:
        doc["stage"] = stage
    if seed is not None:
        doc["seed"] = seed
    cfg = from_dict(doc)
    if epochs is not None:
        plan = cfg.stage_plan()
        if plan is None:
            raise ConfigError(f"stage {cfg.stage} has no training plan")
        scaled = plan.scaled(epochs)
        name = {"pretrain-mae": "mae", "pretrain-osc": "osc_plan", "posttrain": "semi_plan"}.get(cfg.stage, "train")
        cfg = dataclasses.replace(cfg, **{name: scaled})
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """Content hash of everything except output location."""
    doc = to_dict(cfg)
    doc["paths"] = {k: v for k, v in doc["paths"].items() if k != "out_dir"}
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def run_dir(cfg: RunConfig, root=None) -> Path:
    root = Path(root if root is not None else cfg.paths.out_dir)
    return root / f"{cfg.stage}-{config_hash(cfg)}-s{cfg.seed}"


def write_run_files(directory, cfg: RunConfig, metrics: dict | None = None, checkpoint_sha256: str | None = None):
    """Resolved config, seed, metrics and checkpoint hash, all in ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.yaml").write_text(dump(cfg))
    manifest = {"stage": cfg.stage, "seed": cfg.seed, "config_hash": config_hash(cfg),
                "checkpoint_sha256": checkpoint_sha256, "metrics": metrics or {}}
    (d / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d
