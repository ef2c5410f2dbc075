"""Synthetic labelled birdsong: Markov syllable chains over harmonic-stack templates."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal.windows import tukey

from .dataio import AnnotatedRecording, IntervalAnnotation, SplitSpec, make_split, write_annotations, write_wav
from .dsp import SAMPLE_RATE


@dataclass(frozen=True)
class SyllableTemplate:
    label: int
    f0: float
    harmonics: int
    duration_ms: tuple[float, float]
    am_rate: float = 0.0
    fm_span: float = 0.0

    def __post_init__(self):
        top = (self.f0 + abs(self.fm_span) / 2) * self.harmonics
        if top >= SAMPLE_RATE / 2:
            raise ValueError(f"template {self.label}: harmonics reach {top:.0f} Hz, above Nyquist")
        if self.duration_ms[0] <= 20:
            raise ValueError(f"template {self.label}: mean duration must exceed 20 ms")


@dataclass
class GrammarSpec:
    labels: list[int]
    transition: np.ndarray
    initial: np.ndarray | None = None
    gap_ms: tuple[float, float] = (30.0, 8.0)
    song_len: tuple[int, int] = (35, 95)
    class_weights: np.ndarray | None = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        k = len(self.labels)
        if self.transition.shape != (k, k):
            raise ValueError("transition shape does not match labels")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            self.transition = self.transition * w[None, :]
            self.class_weights = None
        self.transition = self.transition / self.transition.sum(axis=1, keepdims=True)
        if self.initial is None:
            self.initial = self.stationary()
        self.initial = np.asarray(self.initial, dtype=np.float64) / np.sum(self.initial)

    def stationary(self) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.transition.T)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        return v / v.sum()


DEFAULT_TEMPLATES = (
    SyllableTemplate(1, 1800.0, 3, (80.0, 10.0), 0.0, 600.0),
    SyllableTemplate(2, 2500.0, 2, (120.0, 15.0), 30.0, 0.0),
    SyllableTemplate(3, 3200.0, 1, (50.0, 8.0), 0.0, -1200.0),
    SyllableTemplate(4, 1200.0, 4, (150.0, 20.0), 0.0, 200.0),
    SyllableTemplate(5, 4200.0, 2, (70.0, 10.0), 60.0, 400.0),
    SyllableTemplate(6, 2200.0, 3, (200.0, 25.0), 15.0, -300.0),
    SyllableTemplate(7, 5500.0, 1, (60.0, 8.0), 0.0, 1500.0),
    SyllableTemplate(8, 3000.0, 2, (100.0, 10.0), 40.0, -800.0),
)
RARE_LABEL = 8


def default_grammar(rare_entry: float = 0.02) -> GrammarSpec:
    """Phrase-like chain: strong repeats, two successors per syllable, rare class entered from 3."""
    k = len(DEFAULT_TEMPLATES)
    common = k - 1
    t = np.zeros((k, k))
    for i in range(common):
        t[i, i] = 0.5
        t[i, (i + 1) % common] += 0.3
        t[i, (i + 3) % common] += 0.2
    t[2, k - 1] = rare_entry
    t[k - 1, k - 1] = 0.3
    t[k - 1, 0] = 0.7
    initial = np.r_[np.ones(common), 0.0]
    return GrammarSpec(labels=[tp.label for tp in DEFAULT_TEMPLATES], transition=t, initial=initial)


def synth_syllable(tpl: SyllableTemplate, duration_s: float, rng, sample_rate=SAMPLE_RATE) -> np.ndarray:
    n = max(int(round(duration_s * sample_rate)), 2)
    t = np.arange(n) / sample_rate
    freq = tpl.f0 + tpl.fm_span * (t / duration_s - 0.5)
    phase = 2 * np.pi * np.cumsum(freq) / sample_rate + rng.uniform(0, 2 * np.pi)
    wave = sum(np.sin(h * phase) / h for h in range(1, tpl.harmonics + 1))
    if tpl.am_rate > 0:
        wave = wave * (1.0 - 0.4 * (1.0 - np.cos(2 * np.pi * tpl.am_rate * t)))
    ramp = min(1.0, 2 * 0.005 / duration_s)
    wave = wave * tukey(n, ramp)
    return wave / np.max(np.abs(wave))


def sample_chain(grammar: GrammarSpec, n: int, rng, *, force_label=None) -> list[int]:
    idx = [int(rng.choice(len(grammar.labels), p=grammar.initial))]
    for _ in range(n - 1):
        idx.append(int(rng.choice(len(grammar.labels), p=grammar.transition[idx[-1]])))
    chain = [grammar.labels[i] for i in idx]
    if force_label is not None and force_label not in chain:
        # splice a one-token excursion where the grammar allows entering it
        j = grammar.labels.index(force_label)
        entries = [p for p in range(n - 1) if grammar.transition[idx[p], j] > 0]
        pos = entries[int(rng.integers(len(entries)))] + 1 if entries else int(rng.integers(1, n))
        chain[pos] = force_label
    return chain


def gen_song(templates, grammar: GrammarSpec, rng, *, rec_id: str = "song", noise_rms: float = 0.002,
             force_label=None, sample_rate=SAMPLE_RATE) -> AnnotatedRecording:
    by_label = {tp.label: tp for tp in templates}
    n_syll = int(rng.integers(grammar.song_len[0], grammar.song_len[1] + 1))
    chain = sample_chain(grammar, n_syll, rng, force_label=force_label)
    lead = rng.uniform(0.2, 0.8)
    pieces: list[tuple[int, int, np.ndarray]] = []
    cursor = int(round(lead * sample_rate))
    for lab in chain:
        tp = by_label[lab]
        dur = max(rng.normal(*tp.duration_ms), 25.0) / 1000.0
        amp = rng.uniform(0.3, 0.6)
        wave = amp * synth_syllable(tp, dur, rng, sample_rate)
        pieces.append((cursor, lab, wave))
        cursor += len(wave)
        gap = max(rng.normal(*grammar.gap_ms), 10.0) / 1000.0
        cursor += int(round(gap * sample_rate))
    total = cursor + int(round(rng.uniform(0.2, 0.8) * sample_rate))
    audio = rng.normal(0.0, noise_rms, total)
    intervals = []
    for start, lab, wave in pieces:
        audio[start : start + len(wave)] += wave
        intervals.append(IntervalAnnotation(start / sample_rate, (start + len(wave)) / sample_rate, lab))
    peak = np.max(np.abs(audio))
    if peak > 1.0:
        audio /= peak
    return AnnotatedRecording(rec_id, audio.astype(np.float32), sample_rate, intervals)


@dataclass
class SynthCorpus:
    recordings: list[AnnotatedRecording]
    split: SplitSpec
    grammar: GrammarSpec
    templates: tuple = field(default=DEFAULT_TEMPLATES)


def gen_corpus(n_recordings: int = 40, templates=DEFAULT_TEMPLATES, grammar: GrammarSpec | None = None, rng=None,
               *, seed: int = 0, bird_id: str = "synth", out_dir=None, rare_label: int | None = RARE_LABEL,
               min_rare_recordings: int = 2, train_fraction: float = 0.2) -> SynthCorpus:
    """Generate recordings; guarantee the rare class appears in ``min_rare_recordings`` of them."""
    grammar = grammar or default_grammar()
    rng = rng if rng is not None else np.random.default_rng(seed)
    recs = [gen_song(templates, grammar, rng, rec_id=f"{bird_id}_{i:04d}") for i in range(n_recordings)]
    if rare_label is not None:
        have = [r for r in recs if rare_label in r.classes]
        missing = [i for i, r in enumerate(recs) if rare_label not in r.classes]
        for i in missing[: max(0, min_rare_recordings - len(have))]:
            recs[i] = gen_song(templates, grammar, rng, rec_id=recs[i].id, force_label=rare_label)
    num_classes = 1 + max(tp.label for tp in templates)
    split = make_split(recs, bird_id, rng, train_fraction=train_fraction, num_classes=num_classes,
                       data_dir=None if out_dir is None else str(Path(out_dir).resolve()))
    if out_dir is not None:
        write_corpus(recs, split, out_dir)
    return SynthCorpus(recs, split, grammar, tuple(templates))


def write_corpus(recs, split: SplitSpec, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in recs:
        write_wav(out / f"{r.id}.wav", r.samples, r.sample_rate)
        write_annotations(out / f"{r.id}.csv", r.intervals)
    split.save(out / "split.yaml")


def token_counts(recs) -> dict[int, int]:
    counts: dict[int, int] = {}
    for r in recs:
        for iv in r.intervals:
            counts[iv.label] = counts.get(iv.label, 0) + 1
    return dict(sorted(counts.items()))
