"""Spectrogram front end and the four data augmentations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

SAMPLE_RATE = 44100


@dataclass
class SpectrogramConfig:
    fft_size: int = 512
    hop: int = 64
    window: str = "hann"
    centered: bool = True
    freq_bins: int = 256
    db_floor: float = field(default=80.0, metadata={"deviation": True})

    def __post_init__(self):
        if self.freq_bins > self.fft_size // 2 + 1:
            raise ValueError("freq_bins exceeds fft_size/2 + 1")
        if not 0 < self.hop < self.fft_size:
            raise ValueError("hop must be in (0, fft_size)")

    def n_frames(self, n_samples: int) -> int:
        if self.centered:
            return 1 + n_samples // self.hop
        return 1 + (n_samples - self.fft_size) // self.hop

    def hop_seconds(self, sample_rate: int = SAMPLE_RATE) -> float:
        return self.hop / sample_rate


@dataclass
class AugmentConfig:
    gain_db_range: tuple[float, float] = (-3.0, 4.0)
    snr_db_range: tuple[float, float] = (5.0, 30.0)
    beta_range: tuple[float, float] = (-2.0, 2.0)
    bernoulli_p_max: float = 0.3
    tfmask_time_max_ms: float = 105.0
    tfmask_freq_max_hz: float = 700.0
    gain: bool = True
    color_noise: bool = True
    bernoulli: bool = True
    tf_mask: bool = False

    def __post_init__(self):
        for name in ("gain_db_range", "snr_db_range", "beta_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered")
            setattr(self, name, (float(lo), float(hi)))
        if not 0.0 <= self.bernoulli_p_max <= 1.0:
            raise ValueError("bernoulli_p_max must lie in [0, 1]")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(gain=False, color_noise=False, bernoulli=False, tf_mask=False)

    @property
    def any_enabled(self) -> bool:
        return self.gain or self.color_noise or self.bernoulli or self.tf_mask


def compute_spectrogram(waveform, cfg: SpectrogramConfig | None = None) -> np.ndarray:
    """Min-max normalised decibel power spectrogram, shape ``(T, F)``.

    ``T = 1 + len // hop`` for centred framing. The top ``fft_size/2 + 1 - F``
    bins (Nyquist for the defaults) are dropped.
    """
    cfg = cfg or SpectrogramConfig()
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 1:
        raise ValueError("waveform must be a non-empty 1-D array")
    if cfg.centered:
        half = cfg.fft_size // 2
        x = np.pad(x, (half, half))
    elif x.shape[0] < cfg.fft_size:
        x = np.pad(x, (0, cfg.fft_size - x.shape[0]))
    frames = sliding_window_view(x, cfg.fft_size)[:: cfg.hop]
    win = get_window(cfg.window, cfg.fft_size)
    spec = np.fft.rfft(frames * win, axis=-1)[:, : cfg.freq_bins]
    power = spec.real**2 + spec.imag**2
    db = 10.0 * np.log10(np.maximum(power, 1e-30))
    top = db.max()
    db = np.maximum(db, top - cfg.db_floor)
    lo = db.min()
    if top - lo <= 0.0:
        warnings.warn("constant spectrogram; returning zeros", RuntimeWarning, stacklevel=2)
        return np.zeros(db.shape, dtype=np.float32)
    return ((db - lo) / (top - lo)).astype(np.float32)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def random_gain(waveform, rng, cfg: AugmentConfig | None = None, *, alpha_db=None):
    cfg = cfg or AugmentConfig()
    if alpha_db is None:
        alpha_db = rng.uniform(*cfg.gain_db_range)
    return np.asarray(waveform) * 10.0 ** (alpha_db / 20.0)


def power_law_noise(n: int, beta: float, rng) -> np.ndarray:
    """Gaussian noise whose power spectrum follows ``1 / f**beta`` (f in bin units)."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.arange(spec.shape[0], dtype=np.float64)
    scale = np.ones_like(f)
    if beta != 0.0:
        scale[1:] = f[1:] ** (-beta / 2.0)
        scale[0] = 0.0
    return np.fft.irfft(spec * scale, n=n)


def color_noise(waveform, rng, cfg: AugmentConfig | None = None, *, snr_db=None, beta=None):
    cfg = cfg or AugmentConfig()
    x = np.asarray(waveform, dtype=np.float64)
    if snr_db is None:
        snr_db = rng.uniform(*cfg.snr_db_range)
    if beta is None:
        beta = rng.uniform(*cfg.beta_range)
    signal_rms = _rms(x) if x.size else 0.0
    if signal_rms == 0.0:
        return x.copy()
    noise = power_law_noise(x.shape[0], beta, rng)
    noise_rms = _rms(noise)
    if noise_rms == 0.0:
        return x.copy()
    noise *= signal_rms / (noise_rms * 10.0 ** (snr_db / 20.0))
    return x + noise


def bernoulli_noise(spec, rng, cfg: AugmentConfig | None = None, *, p=None):
    cfg = cfg or AugmentConfig()
    if p is None:
        p = rng.uniform(0.0, cfg.bernoulli_p_max)
    spec = np.asarray(spec)
    keep = rng.random(spec.shape) >= p
    return np.where(keep, spec, 0).astype(spec.dtype, copy=False)


def tf_mask_limits(cfg: AugmentConfig, spec_cfg: SpectrogramConfig, sample_rate=SAMPLE_RATE):
    """Maximum stripe widths ``(frames, bins)``."""
    max_t = int(cfg.tfmask_time_max_ms / 1000.0 * sample_rate / spec_cfg.hop)
    max_f = int(cfg.tfmask_freq_max_hz / (sample_rate / spec_cfg.fft_size))
    return max_t, max_f


def tf_mask(spec, rng, cfg: AugmentConfig | None = None, spec_cfg: SpectrogramConfig | None = None,
            *, widths=None, sample_rate=SAMPLE_RATE):
    """Zero one time stripe and one frequency stripe at uniform positions."""
    cfg = cfg or AugmentConfig()
    spec_cfg = spec_cfg or SpectrogramConfig()
    spec = np.array(spec, copy=True)
    n_t, n_f = spec.shape
    if widths is None:
        max_t, max_f = tf_mask_limits(cfg, spec_cfg, sample_rate)
        widths = (int(rng.integers(0, max_t + 1)), int(rng.integers(0, max_f + 1)))
    wt, wf = min(widths[0], n_t), min(widths[1], n_f)
    t0 = int(rng.integers(0, n_t - wt + 1))
    f0 = int(rng.integers(0, n_f - wf + 1))
    spec[t0 : t0 + wt, :] = 0
    spec[:, f0 : f0 + wf] = 0
    return spec


def augmented_spectrogram(waveform, n_valid: int, rng, aug: AugmentConfig,
                          spec_cfg: SpectrogramConfig | None = None) -> np.ndarray:
    """Waveform augmentations on the unpadded prefix, STFT, then spectrogram augmentations."""
    spec_cfg = spec_cfg or SpectrogramConfig()
    wave = np.array(waveform, dtype=np.float64, copy=True)
    head = wave[:n_valid]
    if aug.gain and head.size:
        head = random_gain(head, rng, aug)
    if aug.color_noise and head.size:
        head = color_noise(head, rng, aug)
    wave[:n_valid] = head
    spec = compute_spectrogram(wave, spec_cfg)
    if aug.bernoulli:
        spec = bernoulli_noise(spec, rng, aug)
    if aug.tf_mask:
        spec = tf_mask(spec, rng, aug, spec_cfg)
    return spec
