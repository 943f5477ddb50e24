"""Spectrograms: STFT magnitude, decibel scaling, Mel projection and pooling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

from weldmon.errors import InputTooShort, InvalidFilterbank, ShapeMismatch


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 1024
    hop: int = 256
    db_floor: float = -120.0

    def __post_init__(self):
        if self.window_len < 1 or self.window_len & (self.window_len - 1):
            raise ValueError(f"window_len must be a power of two, got {self.window_len}")
        if not 0 < self.hop <= self.window_len:
            raise ValueError(f"need 0 < hop <= window_len, got hop={self.hop}")


@dataclass
class Spectrogram:
    values: np.ndarray  # (T, F) dB, max 0 unless degenerate
    bin_hz: float = 0.0
    frame_s: float = 0.0
    sensor_id: int | None = None
    degenerate: bool = False

    @property
    def t_frames(self) -> int:
        return self.values.shape[0]

    @property
    def f_bins(self) -> int:
        return self.values.shape[1]


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_magnitude(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """|STFT| of a real signal as a (frames, window_len // 2 + 1) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < cfg.window_len:
        raise InputTooShort(f"need at least {cfg.window_len} samples, got {x.shape}")
    frames = sliding_window_view(x, cfg.window_len)[:: cfg.hop]
    return np.abs(np.fft.rfft(frames * hann(cfg.window_len), axis=1))


def frame_count(n: int, cfg: StftConfig = StftConfig()) -> int:
    return (n - cfg.window_len) // cfg.hop + 1


def to_decibel(mag: np.ndarray, db_floor: float = -120.0, **meta) -> Spectrogram:
    """dB relative to the largest magnitude, clamped at ``db_floor``."""
    mag = np.asarray(mag, dtype=np.float64)
    ref = mag.max() if mag.size else 0.0
    if ref <= 0:
        return Spectrogram(values=np.full(mag.shape, float(db_floor)), degenerate=True, **meta)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag / ref)
    return Spectrogram(values=np.maximum(db, db_floor), **meta)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft_bins: int, sample_rate: float, n_mels: int, f_max_hz: float) -> np.ndarray:
    """Triangular HTK-Mel filters, shape (n_mels, n_fft_bins), each row summing to 1.

    A filter too narrow to cover any FFT bin collapses onto the bin nearest its
    center, so no row is ever empty.
    """
    nyquist = sample_rate / 2
    if n_mels < 2:
        raise InvalidFilterbank(f"n_mels must be at least 2, got {n_mels}")
    if not 0 < f_max_hz <= nyquist:
        raise InvalidFilterbank(f"f_max {f_max_hz} Hz outside (0, {nyquist}]")
    freqs = np.linspace(0.0, nyquist, n_fft_bins)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(f_max_hz), n_mels + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (center - lo)
    falling = (hi - freqs) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    for i in np.flatnonzero(fb.sum(axis=1) <= 0):
        fb[i] = 0.0
        fb[i, np.argmin(np.abs(freqs - edges[i + 1]))] = 1.0
    return fb / fb.sum(axis=1, keepdims=True)


def mel_centers(sample_rate: float, n_mels: int, f_max_hz: float) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(f_max_hz), n_mels + 2))[1:-1]


def mel_spectrogram(
    mag: np.ndarray,
    sample_rate: float,
    n_mels: int = 128,
    f_max_hz: float | None = None,
    db_floor: float = -120.0,
    **meta,
) -> Spectrogram:
    f_max_hz = sample_rate / 2 if f_max_hz is None else f_max_hz
    fb = mel_filterbank(mag.shape[1], sample_rate, n_mels, f_max_hz)
    return to_decibel(mag @ fb.T, db_floor, **meta)


def _cell_edges(n: int, cells: int) -> np.ndarray:
    starts = (np.arange(cells) * n) // cells
    ends = np.maximum(((np.arange(1, cells + 1)) * n) // cells, starts + 1)
    return starts, np.minimum(ends, max(n, 1))


def pool_and_normalize(values: np.ndarray, out_h: int = 64, out_w: int = 64) -> np.ndarray:
    """Mean-pool a (T, F) matrix onto an out_h x out_w grid, then min-max to [0, 1].

    Cell boundaries split each axis as evenly as integer division allows;
    when an axis is shorter than the grid, cells reuse the nearest row. A
    constant input maps to 0.5 everywhere.
    """
    v = np.asarray(getattr(values, "values", values), dtype=np.float64)
    rs, re = _cell_edges(v.shape[0], out_h)
    cs, ce = _cell_edges(v.shape[1], out_w)
    # 2-D prefix sums give every cell mean in one vectorized lookup
    s = np.zeros((v.shape[0] + 1, v.shape[1] + 1))
    s[1:, 1:] = v.cumsum(0).cumsum(1)
    total = s[re][:, ce] - s[rs][:, ce] - s[re][:, cs] + s[rs][:, cs]
    pooled = total / ((re - rs)[:, None] * (ce - cs)[None, :])
    lo, hi = pooled.min(), pooled.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full((out_h, out_w), 0.5)
    return (pooled - lo) / (hi - lo)


def stack_channels(per_sensor: dict | list, sensor_ids=None) -> np.ndarray:
    """Stack single-channel images into (C, H, W), channels in ascending sensor id."""
    if isinstance(per_sensor, dict):
        sensor_ids = sorted(per_sensor)
        arrays = [per_sensor[s] for s in sensor_ids]
    else:
        arrays = list(per_sensor)
        if sensor_ids is not None:
            order = np.argsort(sensor_ids, kind="stable")
            arrays = [arrays[i] for i in order]
    if not arrays:
        raise ShapeMismatch("no channels to stack")
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ShapeMismatch(f"channel shapes differ: {shape} vs {np.shape(a)}")
    return np.stack(arrays, axis=0)


def segment_spectrograms(segment, sensors, cfg: StftConfig = StftConfig(), mel: bool = False, n_mels: int = 128):
    """dB spectrograms of the chosen sensors of one segment, as a (C, T, F) array."""
    out = []
    sr = segment.sample_rate_hz
    for sid in sorted(sensors):
        mag = stft_magnitude(segment.channel(sid), cfg)
        if mel:
            spec = mel_spectrogram(mag, sr, n_mels=n_mels, db_floor=cfg.db_floor)
        else:
            spec = to_decibel(mag, cfg.db_floor)
        out.append(spec.values)
    return np.stack(out, axis=0)


def pool_stack(db_stack: np.ndarray, out_h: int = 64, out_w: int = 64) -> np.ndarray:
    return np.stack([pool_and_normalize(ch, out_h, out_w) for ch in db_stack], axis=0)


class SpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Segments -> (n, C, out_h, out_w) model inputs for the chosen sensors."""

    def __init__(self, sensors=(4, 6), window_len=1024, hop=256, db_floor=-120.0, mel=False, n_mels=128, out_h=64, out_w=64):
        self.sensors = sensors
        self.window_len = window_len
        self.hop = hop
        self.db_floor = db_floor
        self.mel = mel
        self.n_mels = n_mels
        self.out_h = out_h
        self.out_w = out_w

    def fit(self, X=None, y=None):
        return self

    def _cfg(self):
        return StftConfig(self.window_len, self.hop, self.db_floor)

    def spectrograms(self, segments) -> list:
        return [segment_spectrograms(s, self.sensors, self._cfg(), self.mel, self.n_mels) for s in segments]

    def transform(self, X):
        return np.stack([pool_stack(db, self.out_h, self.out_w) for db in self.spectrograms(X)], axis=0)
