"""Recordings, annotations, splits and batch assembly."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.io import wavfile

from . import _kernels
from .dsp import SAMPLE_RATE, AugmentConfig, SpectrogramConfig, augmented_spectrogram, compute_spectrogram

BACKGROUND = 0


class DataError(ValueError):
    pass


@dataclass
class Recording:
    id: str
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"{self.id}: non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class IntervalAnnotation:
    onset_s: float
    offset_s: float
    label: int


@dataclass
class AnnotatedRecording(Recording):
    intervals: list[IntervalAnnotation] = field(default_factory=list)

    @property
    def classes(self) -> set[int]:
        return {iv.label for iv in self.intervals}

    def frame_labels(self, spec_cfg: SpectrogramConfig | None = None) -> np.ndarray:
        spec_cfg = spec_cfg or SpectrogramConfig()
        n = spec_cfg.n_frames(len(self.samples))
        return frames_from_intervals(self.intervals, n, spec_cfg.hop_seconds(self.sample_rate))


@dataclass
class SplitSpec:
    bird_id: str
    num_classes: int
    few_shot_ids: list[str]
    plus1_ids: list[str] = field(default_factory=list)
    plus2_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    data_dir: str | None = None

    def __post_init__(self):
        lists = [self.few_shot_ids, self.plus1_ids, self.plus2_ids, self.test_ids]
        seen: set[str] = set()
        for ids in lists:
            if seen & set(ids) or len(set(ids)) != len(ids):
                raise DataError("split lists must be disjoint")
            seen |= set(ids)

    def train_ids(self, size: str = "few_shot") -> list[str]:
        if size == "few_shot":
            return list(self.few_shot_ids)
        if size == "plus1":
            return self.few_shot_ids + self.plus1_ids
        if size == "plus2":
            return self.few_shot_ids + self.plus1_ids + self.plus2_ids
        raise DataError(f"unknown train size {size!r}")

    @property
    def all_ids(self) -> list[str]:
        return self.few_shot_ids + self.plus1_ids + self.plus2_ids + self.test_ids

    def save(self, path):
        doc = {
            "bird_id": self.bird_id,
            "num_classes": self.num_classes,
            "data_dir": self.data_dir,
            "few_shot": self.few_shot_ids,
            "plus1": self.plus1_ids,
            "plus2": self.plus2_ids,
            "test": self.test_ids,
        }
        Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))

    @classmethod
    def load(cls, path) -> "SplitSpec":
        doc = yaml.safe_load(Path(path).read_text())
        data_dir = doc.get("data_dir")
        if data_dir is not None and not Path(data_dir).is_absolute():
            data_dir = str((Path(path).parent / data_dir).resolve())
        return cls(
            bird_id=str(doc["bird_id"]),
            num_classes=int(doc["num_classes"]),
            few_shot_ids=list(doc.get("few_shot") or []),
            plus1_ids=list(doc.get("plus1") or []),
            plus2_ids=list(doc.get("plus2") or []),
            test_ids=list(doc.get("test") or []),
            data_dir=data_dir,
        )


@dataclass
class Batch:
    x: np.ndarray
    valid: np.ndarray
    y: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)
    offsets: list[int] = field(default_factory=list)


# ----------------------------------------------------------------------------
# file IO
# ----------------------------------------------------------------------------


def load_recording(path, *, allow_any_rate: bool = False) -> Recording:
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    else:
        data = data.astype(np.float32)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.shape[0] == 0:
        raise DataError(f"{path}: zero-length audio")
    if rate != SAMPLE_RATE and not allow_any_rate:
        raise DataError(f"{path}: sample rate {rate} != {SAMPLE_RATE}")
    return Recording(id=path.stem, samples=data, sample_rate=int(rate))


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sample_rate, pcm)


def read_annotations(path) -> list[IntervalAnnotation]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = [IntervalAnnotation(float(r["onset_s"]), float(r["offset_s"]), int(r["label"])) for r in rows]
    return sorted(out, key=lambda iv: iv.onset_s)


def write_annotations(path, intervals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["onset_s", "offset_s", "label"])
        for iv in intervals:
            w.writerow([repr(float(iv.onset_s)), repr(float(iv.offset_s)), int(iv.label)])


def load_annotated(wav_path, *, allow_any_rate=False) -> AnnotatedRecording:
    rec = load_recording(wav_path, allow_any_rate=allow_any_rate)
    csv_path = Path(wav_path).with_suffix(".csv")
    intervals = read_annotations(csv_path) if csv_path.exists() else []
    validate_intervals(intervals, rec.duration_s)
    return AnnotatedRecording(rec.id, rec.samples, rec.sample_rate, intervals)


def load_corpus(data_dir, ids=None, *, allow_any_rate=False) -> list[AnnotatedRecording]:
    data_dir = Path(data_dir)
    if ids is None:
        paths = sorted(data_dir.glob("*.wav"))
    else:
        paths = [data_dir / f"{i}.wav" for i in ids]
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise DataError(f"missing recordings: {[str(p) for p in missing[:5]]}")
    return [load_annotated(p, allow_any_rate=allow_any_rate) for p in paths]


# ----------------------------------------------------------------------------
# labels and splits
# ----------------------------------------------------------------------------


def validate_intervals(intervals, duration_s=None):
    prev_off = -np.inf
    for iv in intervals:
        if not iv.onset_s < iv.offset_s or iv.onset_s < 0:
            raise DataError(f"invalid interval {iv}")
        if duration_s is not None and iv.offset_s > duration_s + 1e-9:
            raise DataError(f"interval {iv} exceeds duration {duration_s}")
        if iv.onset_s < prev_off:
            raise DataError(f"overlapping or unsorted intervals near {iv}")
        prev_off = iv.offset_s


def frames_from_intervals(intervals, n_frames: int, frame_hop_s: float,
                          background: int = BACKGROUND) -> np.ndarray:
    """Frame ``t`` takes the label of the interval containing ``t * frame_hop_s``."""
    validate_intervals(intervals)
    on = np.array([iv.onset_s for iv in intervals], dtype=np.float64)
    off = np.array([iv.offset_s for iv in intervals], dtype=np.float64)
    lab = np.array([iv.label for iv in intervals], dtype=np.int64)
    return _kernels.interval_labels(on, off, lab, n_frames, frame_hop_s, background)


def few_shot_select(corpus) -> list[str]:
    """Greedy set cover of syllable classes over recordings.

    Ties go to the shorter recording, then the smaller id.
    """
    universe = set().union(*(r.classes for r in corpus)) if corpus else set()
    return _greedy_cover(corpus, universe)


def _greedy_cover(corpus, universe):
    uncovered = set(universe)
    chosen: list[str] = []
    pool = list(corpus)
    while uncovered:
        if not pool:
            raise DataError(f"classes {sorted(uncovered)} absent from corpus")
        best = min(pool, key=lambda r: (-len(r.classes & uncovered), r.duration_s, r.id))
        if not best.classes & uncovered:
            raise DataError(f"classes {sorted(uncovered)} absent from corpus")
        chosen.append(best.id)
        uncovered -= best.classes
        pool.remove(best)
    return chosen


def make_split(corpus, bird_id: str, rng, *, train_fraction=0.02, num_classes=None,
               data_dir=None) -> SplitSpec:
    """Few-shot cover, then ``train_fraction`` of the rest halved into +1/+2, remainder test."""
    few = few_shot_select(corpus)
    rest = sorted(r.id for r in corpus if r.id not in set(few))
    rest = [rest[i] for i in rng.permutation(len(rest))]
    n_train = int(round(train_fraction * len(rest)))
    half = n_train // 2
    if num_classes is None:
        num_classes = 1 + max(set().union(*(r.classes for r in corpus)))
    return SplitSpec(bird_id, int(num_classes), few, rest[:half], rest[half:n_train], rest[n_train:],
                     data_dir=None if data_dir is None else str(data_dir))


# ----------------------------------------------------------------------------
# cropping and batches
# ----------------------------------------------------------------------------


def crop_or_pad(rec: Recording, window_s: float, rng, *, align: int = 1):
    """Return ``(waveform, pad_start, offset)`` of exactly ``window_s`` seconds.

    Longer recordings are cropped at a uniform random offset (a multiple of
    ``align`` samples); shorter ones are zero-padded at the end.
    """
    n = int(round(window_s * rec.sample_rate))
    src = rec.samples
    if len(src) > n:
        slots = (len(src) - n) // align
        offset = int(rng.integers(0, slots + 1)) * align
        return src[offset : offset + n].copy(), n, offset
    out = np.zeros(n, dtype=np.float32)
    out[: len(src)] = src
    return out, len(src), 0


@dataclass
class Crop:
    rec_id: str
    wave: np.ndarray
    pad_start: int
    offset: int
    labels: np.ndarray | None = None


def valid_frames(n_frames: int, pad_start: int, hop: int) -> np.ndarray:
    return np.arange(n_frames) * hop < pad_start


def crop_recordings(recs, window_s, rng, *, with_labels=True, spec_cfg=None) -> list[Crop]:
    """Crop (or take whole, when ``window_s`` is None) and pad to a common length."""
    spec_cfg = spec_cfg or SpectrogramConfig()
    rates = {r.sample_rate for r in recs}
    if len(rates) > 1:
        raise DataError(f"mixed sample rates {sorted(rates)}")
    crops = []
    if window_s is None:
        n = max(len(r.samples) for r in recs)
        window_s = n / recs[0].sample_rate
    for r in recs:
        wave, pad_start, offset = crop_or_pad(r, window_s, rng, align=spec_cfg.hop)
        labels = None
        if with_labels:
            full = r.frame_labels(spec_cfg)
            n_frames = spec_cfg.n_frames(len(wave))
            f0 = offset // spec_cfg.hop
            labels = np.full(n_frames, BACKGROUND, dtype=np.int64)
            chunk = full[f0 : f0 + n_frames]
            labels[: len(chunk)] = chunk
            labels[~valid_frames(n_frames, pad_start, spec_cfg.hop)] = BACKGROUND
        crops.append(Crop(r.id, wave, pad_start, offset, labels))
    return crops


def _spec_or_zeros(wave, spec_cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return compute_spectrogram(wave, spec_cfg)


def batch_from_crops(crops, spec_cfg=None, *, aug: AugmentConfig | None = None, rng=None) -> Batch:
    spec_cfg = spec_cfg or SpectrogramConfig()
    xs = []
    for c in crops:
        if aug is not None and aug.any_enabled:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                xs.append(augmented_spectrogram(c.wave, c.pad_start, rng, aug, spec_cfg))
        else:
            xs.append(_spec_or_zeros(c.wave, spec_cfg))
    x = np.stack(xs)
    valid = np.stack([valid_frames(x.shape[1], c.pad_start, spec_cfg.hop) for c in crops])
    y = None
    if all(c.labels is not None for c in crops):
        y = np.stack([c.labels for c in crops])
    return Batch(x=x, valid=valid, y=y, ids=[c.rec_id for c in crops], offsets=[c.offset for c in crops])


def make_batch(recs, window_s, with_labels: bool, rng, *, spec_cfg=None, aug=None) -> Batch:
    """Crop/pad ``recs`` and stack their spectrograms; ``window_s=None`` keeps full length."""
    spec_cfg = spec_cfg or SpectrogramConfig()
    crops = crop_recordings(recs, window_s, rng, with_labels=with_labels, spec_cfg=spec_cfg)
    return batch_from_crops(crops, spec_cfg, aug=aug, rng=rng)


def epoch_batches(recs, batch_size: int, rng, *, repeats: int = 1):
    """Shuffled index batches covering every recording ``repeats`` times."""
    order = np.concatenate([rng.permutation(len(recs)) for _ in range(repeats)]) if recs else np.zeros(0, int)
    for start in range(0, len(order), batch_size):
        yield [recs[i] for i in order[start : start + batch_size]]

