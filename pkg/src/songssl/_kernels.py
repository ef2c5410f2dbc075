"""Frame-level label kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback
with identical results. The numpy path is selected when numba is missing or
when ``SONGSSL_DISABLE_NUMBA=1`` is set in the environment before import.
"""

import os

import numpy as np

_DISABLED = os.environ.get("SONGSSL_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return decorator


BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"


# ----------------------------------------------------------------------------
# interval -> frame labels
# ----------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _interval_labels_nb(onsets, offsets, labels, n_frames, hop_s, background):
    out = np.full(n_frames, background, dtype=np.int64)
    for i in range(onsets.shape[0]):
        on = onsets[i]
        off = offsets[i]
        t = int(on / hop_s) - 1
        if t < 0:
            t = 0
        while t < n_frames and t * hop_s < on:
            t += 1
        while t < n_frames and t * hop_s < off:
            out[t] = labels[i]
            t += 1
    return out


def _interval_labels_np(onsets, offsets, labels, n_frames, hop_s, background):
    out = np.full(n_frames, background, dtype=np.int64)
    if onsets.shape[0] == 0:
        return out
    centers = np.arange(n_frames) * hop_s
    idx = np.searchsorted(onsets, centers, side="right") - 1
    hit = idx >= 0
    safe = np.where(hit, idx, 0)
    hit &= centers < offsets[safe]
    out[hit] = labels[safe[hit]]
    return out


# ----------------------------------------------------------------------------
# run-length decoding
# ----------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _run_lengths_nb(seq):
    n = seq.shape[0]
    starts = np.empty(n, dtype=np.int64)
    ends = np.empty(n, dtype=np.int64)
    values = np.empty(n, dtype=np.int64)
    k = 0
    if n == 0:
        return starts[:0], ends[:0], values[:0]
    s = 0
    for t in range(1, n + 1):
        if t == n or seq[t] != seq[s]:
            starts[k] = s
            ends[k] = t
            values[k] = seq[s]
            k += 1
            s = t
    return starts[:k], ends[:k], values[:k]


def _run_lengths_np(seq):
    n = seq.shape[0]
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    change = np.flatnonzero(seq[1:] != seq[:-1]) + 1
    starts = np.concatenate(([0], change)).astype(np.int64)
    ends = np.concatenate((change, [n])).astype(np.int64)
    return starts, ends, seq[starts].astype(np.int64)


# ----------------------------------------------------------------------------
# confusion matrix
# ----------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _confusion_nb(true, pred, valid, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t in range(true.shape[0]):
        if valid[t]:
            cm[true[t], pred[t]] += 1
    return cm


def _confusion_np(true, pred, valid, n_classes):
    flat = true[valid] * n_classes + pred[valid]
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes).astype(np.int64)


# ----------------------------------------------------------------------------
# public wrappers (dtype normalisation lives here so both paths see the same input)
# ----------------------------------------------------------------------------


def interval_labels(onsets, offsets, labels, n_frames, hop_s, background=0):
    """Label frame ``t`` with the interval containing ``t * hop_s`` (half-open)."""
    onsets = np.ascontiguousarray(onsets, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    fn = _interval_labels_nb if NUMBA_AVAILABLE else _interval_labels_np
    return fn(onsets, offsets, labels, int(n_frames), float(hop_s), int(background))


def run_lengths(seq):
    """Return ``(starts, ends, values)`` of maximal constant runs; ``ends`` exclusive."""
    seq = np.ascontiguousarray(seq, dtype=np.int64)
    fn = _run_lengths_nb if NUMBA_AVAILABLE else _run_lengths_np
    return fn(seq)


def confusion(true, pred, valid, n_classes):
    """Confusion counts, rows = true class, columns = predicted class."""
    true = np.ascontiguousarray(true, dtype=np.int64).ravel()
    pred = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    if valid is None:
        valid = np.ones(true.shape[0], dtype=np.bool_)
    valid = np.ascontiguousarray(valid, dtype=np.bool_).ravel()
    if true.shape != pred.shape or true.shape != valid.shape:
        raise ValueError("true, pred and valid differ in length")
    for name, arr in (("true", true), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} labels outside [0, {n_classes})")
    fn = _confusion_nb if NUMBA_AVAILABLE else _confusion_np
    return fn(true, pred, valid, int(n_classes))


# reference implementations, always pure numpy; used by the benchmark and tests
numpy_impl = {
    "interval_labels": _interval_labels_np,
    "run_lengths": _run_lengths_np,
    "confusion": _confusion_np,
}
numba_impl = {
    "interval_labels": _interval_labels_nb,
    "run_lengths": _run_lengths_nb,
    "confusion": _confusion_nb,
}
