"""Frame metrics and song-structure analyses over predicted or annotated labels."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from . import _kernels
from .dsp import SAMPLE_RATE, SpectrogramConfig

BACKGROUND = 0


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------


def frame_metrics(pred, true, valid, num_classes: int, *, include_background: bool = True) -> dict:
    """Accuracy and macro precision/recall/F1 over classes present in ``true`` or ``pred``.

    Per-class scores with a zero denominator count as 0.
    """
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise ValueError("pred and true differ in length")
    cm = _kernels.confusion(true, pred, valid, num_classes)
    return metrics_from_confusion(cm, include_background=include_background)


def metrics_from_confusion(cm, *, include_background: bool = True) -> dict:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    true_count = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_count, out=np.zeros_like(tp), where=pred_count > 0)
    recall = np.divide(tp, true_count, out=np.zeros_like(tp), where=true_count > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    present = (pred_count + true_count) > 0
    if not include_background:
        present[BACKGROUND] = False
    n = int(present.sum())

    def macro(v):
        return float(v[present].sum() / n) if n else 0.0

    return {
        "accuracy": float(tp.sum() / total) if total else 0.0,
        "f1_macro": macro(f1),
        "precision_macro": macro(precision),
        "recall_macro": macro(recall),
        "frames": int(total),
    }


# ----------------------------------------------------------------------------
# segments
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    label: int
    onset: int
    offset: int

    @property
    def length(self) -> int:
        return self.offset - self.onset


def segments_from_frames(labels, min_len_frames: int = 1, background: int = BACKGROUND) -> list[Segment]:
    """Maximal constant non-background runs, ``offset`` exclusive; short runs dropped."""
    starts, ends, values = _kernels.run_lengths(np.asarray(labels))
    keep = (values != background) & ((ends - starts) >= min_len_frames)
    return [Segment(int(v), int(s), int(e)) for s, e, v in zip(starts[keep], ends[keep], values[keep])]


def segments_to_intervals(segments, frame_hop_s: float):
    from .dataio import IntervalAnnotation

    return [IntervalAnnotation(s.onset * frame_hop_s, s.offset * frame_hop_s, s.label) for s in segments]


def frame_ms(spec_cfg: SpectrogramConfig | None = None, sample_rate: int = SAMPLE_RATE) -> float:
    spec_cfg = spec_cfg or SpectrogramConfig()
    return spec_cfg.hop / sample_rate * 1000.0


def segment_durations_ms(segments_per_rec, label=None, spec_cfg=None) -> np.ndarray:
    ms = frame_ms(spec_cfg)
    return np.array([s.length * ms for segs in segments_per_rec for s in segs if label is None or s.label == label])


def duration_distribution(segments_per_rec, label=None, *, spec_cfg=None, bin_ms: float = 5.0) -> dict:
    """Histogram (bin edges in ms) and summary stats of segment durations."""
    d = segment_durations_ms(segments_per_rec, label, spec_cfg)
    if d.size == 0:
        return {"durations_ms": d, "counts": np.zeros(0, dtype=np.int64), "edges": np.zeros(0), "n": 0}
    hi = bin_ms * (np.floor(d.max() / bin_ms) + 1)
    edges = np.arange(0.0, hi + bin_ms / 2, bin_ms)
    counts, edges = np.histogram(d, bins=edges)
    q1, med, q3 = np.percentile(d, [25, 50, 75])
    return {"durations_ms": d, "counts": counts, "edges": edges, "n": int(d.size), "mean": float(d.mean()),
            "median": float(med), "iqr": float(q3 - q1)}


def duration_w1(true_segments, pred_segments, label=None, spec_cfg=None) -> float:
    """Wasserstein-1 distance (ms) between true and predicted duration samples."""
    a = segment_durations_ms(true_segments, label, spec_cfg)
    b = segment_durations_ms(pred_segments, label, spec_cfg)
    if a.size == 0 or b.size == 0:
        return float("nan")
    return float(wasserstein_distance(a, b))


@dataclass
class TransitionMatrix:
    labels: list[int]
    counts: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


def transition_matrix(segments_per_rec, labels=None, *, max_gap_frames: int | None = None) -> TransitionMatrix:
    """Bigram counts of consecutive syllables within each recording.

    Background gaps are skipped; with ``max_gap_frames`` a longer gap breaks the chain.
    """
    if labels is None:
        labels = sorted({s.label for segs in segments_per_rec for s in segs})
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for segs in segments_per_rec:
        for a, b in zip(segs[:-1], segs[1:]):
            if max_gap_frames is not None and b.onset - a.offset > max_gap_frames:
                continue
            if a.label in index and b.label in index:
                counts[index[a.label], index[b.label]] += 1
    return TransitionMatrix(list(labels), counts)


# ----------------------------------------------------------------------------
# embeddings and clustering
# ----------------------------------------------------------------------------


@dataclass
class EmbeddingSet:
    rec_ids: list[str]
    labels: np.ndarray
    durations_s: np.ndarray
    pooled: np.ndarray
    features: np.ndarray | None = None


def syllable_embeddings(model, recs, *, spec_cfg=None, pooling: str = "mean") -> EmbeddingSet:
    """Backbone features of every annotated syllable, pooled over its frames."""
    import torch

    from .dsp import compute_spectrogram

    spec_cfg = spec_cfg or SpectrogramConfig()
    model.eval()
    rec_ids, labels, durs, pooled = [], [], [], []
    for r in recs:
        for iv in r.intervals:
            a = int(round(iv.onset_s * r.sample_rate))
            b = int(round(iv.offset_s * r.sample_rate))
            if b - a < spec_cfg.hop:
                raise ValueError(f"syllable in {r.id} at {iv.onset_s:.3f}s is shorter than one frame")
            x = compute_spectrogram(r.samples[a:b], spec_cfg)
            with torch.no_grad():
                h = model.embed(torch.from_numpy(x)[None])[0].double()
            pooled.append((h.mean(0) if pooling == "mean" else h.max(0).values).numpy())
            rec_ids.append(r.id)
            labels.append(iv.label)
            durs.append(iv.offset_s - iv.onset_s)
    return EmbeddingSet(rec_ids, np.array(labels), np.array(durs), np.array(pooled))


def embedding_features(emb: EmbeddingSet, n_components: int = 32, seed: int = 0) -> np.ndarray:
    """PCA to ``n_components``, append duration, standardise each column."""
    from sklearn.decomposition import PCA
    from sklearn.preprocessing import StandardScaler

    n_components = min(n_components, *emb.pooled.shape)
    pcs = PCA(n_components=n_components, random_state=seed).fit_transform(emb.pooled)
    feats = np.column_stack([pcs, emb.durations_s])
    emb.features = StandardScaler().fit_transform(feats)
    return emb.features


def embed_syllables(model, recs, *, spec_cfg=None, n_components=32, pooling="mean", seed=0) -> EmbeddingSet:
    emb = syllable_embeddings(model, recs, spec_cfg=spec_cfg, pooling=pooling)
    embedding_features(emb, n_components, seed)
    return emb


def _first_seen_codes(ids) -> np.ndarray:
    _, first, inverse = np.unique(np.asarray(ids), return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse.ravel()]


def ami(true_labels, cluster_ids) -> float:
    """Adjusted mutual information; cluster ids are recoded by first appearance so any renaming scores identically."""
    from sklearn.metrics import adjusted_mutual_info_score

    return float(adjusted_mutual_info_score(_first_seen_codes(true_labels), _first_seen_codes(cluster_ids)))


def cluster_embeddings(features, k: int, rng_seed: int = 0, true_labels=None, *, n_init: int = 20,
                       max_iter: int = 200, reg_covar: float = 1e-6):
    """Full-covariance GMM; returns ``(cluster_ids, ami)`` (``ami`` is None without labels)."""
    from sklearn.mixture import GaussianMixture

    features = np.asarray(features)
    if k > len(features):
        raise ValueError(f"k={k} exceeds {len(features)} records")
    gmm = GaussianMixture(k, covariance_type="full", n_init=n_init, max_iter=max_iter, reg_covar=reg_covar,
                          random_state=rng_seed)
    ids = gmm.fit_predict(features)
    score = None if true_labels is None else ami(true_labels, ids)
    return ids, score


def relabel_majority(cluster_ids, true_labels) -> np.ndarray:
    """Map each cluster to its most frequent true label (ties to the smallest label)."""
    cluster_ids = np.asarray(cluster_ids)
    true_labels = np.asarray(true_labels)
    out = np.empty_like(true_labels)
    for c in np.unique(cluster_ids):
        members = cluster_ids == c
        counts = Counter(true_labels[members].tolist())
        best = max(counts.values())
        out[members] = min(lab for lab, n in counts.items() if n == best)
    return out


def curation_report(rec_ids, cluster_ids, *, rare_fraction: float = 0.01, top: int = 5) -> list[dict]:
    """Per-cluster population, exemplar recordings by member count, and a rarity flag."""
    rec_ids = list(rec_ids)
    cluster_ids = np.asarray(cluster_ids)
    total = len(cluster_ids)
    rows = []
    for c in np.unique(cluster_ids):
        members = [rec_ids[i] for i in np.flatnonzero(cluster_ids == c)]
        by_rec = Counter(members).most_common()
        by_rec.sort(key=lambda kv: (-kv[1], kv[0]))
        rows.append({
            "cluster": int(c),
            "population": len(members),
            "share": len(members) / total,
            "rare": len(members) < rare_fraction * total,
            "exemplars": [r for r, _ in by_rec[:top]],
            "recordings": sorted(set(members)),
        })
    return rows


def curation_markdown(rows) -> str:
    lines = ["| cluster | population | share | rare | exemplar recordings |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['cluster']} | {r['population']} | {r['share']:.3%} | {'yes' if r['rare'] else ''} | "
                     f"{', '.join(r['exemplars'])} |")
    return "\n".join(lines) + "\n"
