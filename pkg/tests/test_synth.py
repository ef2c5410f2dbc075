import numpy as np
import pytest

from songssl import dataio, synth
from songssl.dsp import SpectrogramConfig, compute_spectrogram


@pytest.fixture(scope="module")
def corpus():
    return synth.gen_corpus(40, seed=3)


def test_deterministic():
    g = synth.default_grammar()
    g.song_len = (5, 8)
    a = synth.gen_corpus(3, grammar=g, seed=1)
    g = synth.default_grammar()
    g.song_len = (5, 8)
    b = synth.gen_corpus(3, grammar=g, seed=1)
    for ra, rb in zip(a.recordings, b.recordings):
        assert np.array_equal(ra.samples, rb.samples) and ra.intervals == rb.intervals
    assert a.split == b.split


def test_default_corpus_shape(corpus):
    recs = corpus.recordings
    assert len(recs) == 40
    assert set().union(*(r.classes for r in recs)) == set(range(1, 9))
    durations = [r.duration_s for r in recs]
    assert 3 < min(durations) and max(durations) < 20
    assert all(r.sample_rate == 44100 for r in recs)
    assert max(float(np.abs(r.samples).max()) for r in recs) <= 1.0


def test_intervals_valid_and_recoverable(corpus):
    for r in corpus.recordings:
        dataio.validate_intervals(r.intervals, r.duration_s)
        frames = r.frame_labels()
        hop = 64 / 44100
        for iv in r.intervals:
            a = int(np.ceil(iv.onset_s / hop))
            b = int(np.ceil(iv.offset_s / hop))
            assert b > a
            assert np.all(frames[a:b] == iv.label)


def test_rare_class(corpus):
    counts = synth.token_counts(corpus.recordings)
    total = sum(counts.values())
    assert 0 < counts[synth.RARE_LABEL] <= 0.01 * total
    assert sum(synth.RARE_LABEL in r.classes for r in corpus.recordings) >= 2


def test_class_counts_follow_stationary_law(corpus):
    counts = synth.token_counts(corpus.recordings)
    total = sum(counts.values())
    pi = corpus.grammar.stationary()
    for i, lab in enumerate(corpus.grammar.labels[:-1]):
        share = counts[lab] / total
        assert abs(share - pi[i]) < 5 * np.sqrt(pi[i] * (1 - pi[i]) / total) + 0.02


def test_few_shot_covers_all(corpus):
    few = set(corpus.split.few_shot_ids)
    covered = set().union(*(r.classes for r in corpus.recordings if r.id in few))
    assert covered == set(range(1, 9))
    ids = [r.id for r in corpus.recordings]
    parts = corpus.split.few_shot_ids + corpus.split.plus1_ids + corpus.split.plus2_ids + corpus.split.test_ids
    assert sorted(parts) == sorted(ids)


def test_bigrams_match_grammar(corpus):
    k = len(corpus.grammar.labels)
    index = {lab: i for i, lab in enumerate(corpus.grammar.labels)}
    counts = np.zeros((k, k))
    for r in corpus.recordings:
        labs = [iv.label for iv in r.intervals]
        for a, b in zip(labs, labs[1:]):
            counts[index[a], index[b]] += 1
    for i in range(k):
        if counts[i].sum() >= 30:
            tv = 0.5 * np.abs(counts[i] / counts[i].sum() - corpus.grammar.transition[i]).sum()
            assert tv < 0.1


def test_grammar_rows_and_validation():
    g = synth.default_grammar()
    assert np.allclose(g.transition.sum(1), 1)
    with pytest.raises(ValueError):
        synth.GrammarSpec(labels=[1, 2], transition=np.eye(3))
    with pytest.raises(ValueError, match="Nyquist"):
        synth.SyllableTemplate(1, 12000.0, 2, (50.0, 5.0))
    with pytest.raises(ValueError):
        synth.SyllableTemplate(1, 1000.0, 2, (15.0, 5.0))


@pytest.mark.parametrize("tpl", synth.DEFAULT_TEMPLATES[:4])
def test_harmonic_peaks(tpl):
    flat = synth.SyllableTemplate(tpl.label, tpl.f0, tpl.harmonics, tpl.duration_ms)
    wave = synth.synth_syllable(flat, 0.2, np.random.default_rng(0))
    cfg = SpectrogramConfig()
    mag = np.abs(np.fft.rfft(wave[2000:2512] * np.hanning(512)))
    bin_hz = 44100 / cfg.fft_size
    for h in range(1, tpl.harmonics + 1):
        target = h * tpl.f0 / bin_hz
        if target >= cfg.freq_bins:
            continue
        lo, hi = int(target) - 3, int(target) + 4
        peak = lo + int(np.argmax(mag[lo:hi]))
        assert abs(peak - target) <= 1
    assert compute_spectrogram(wave).shape[1] == cfg.freq_bins


def test_write_corpus(tmp_path):
    g = synth.default_grammar()
    g.song_len = (4, 5)
    c = synth.gen_corpus(3, grammar=g, seed=2, out_dir=tmp_path)
    assert (tmp_path / "split.yaml").exists()
    r = c.recordings[0]
    loaded = dataio.load_recording(tmp_path / f"{r.id}.wav")
    assert np.allclose(loaded.samples, r.samples, atol=1e-4)
    back = dataio.read_annotations(tmp_path / f"{r.id}.csv")
    assert [iv.label for iv in back] == [iv.label for iv in r.intervals]
    assert np.allclose([iv.onset_s for iv in back], [iv.onset_s for iv in r.intervals], atol=1e-6)
