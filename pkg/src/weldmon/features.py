"""Handcrafted per-channel features and a leakage-aware standard scaler.

Thirteen values per channel: amplitude statistics, two spectral shape
descriptors and five octave-band energy ratios. The bands come from halving
the Nyquist range four times, which mirrors the level energies of a discrete
wavelet decomposition.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from weldmon.errors import InputTooShort, LeakageError, TooFewSamples
from weldmon.ingest import SENSOR_NAMES
from weldmon.spectral import StftConfig, stft_magnitude

N_BANDS = 5
FEATURE_NAMES = (
    "rms",
    "peak",
    "crest_factor",
    "variance",
    "skewness",
    "excess_kurtosis",
    "spectral_centroid_hz",
    "spectral_entropy",
) + tuple(f"band_ratio_{i}" for i in range(N_BANDS))
N_FEATURES = len(FEATURE_NAMES)


def octave_band_edges(sample_rate: float, n_bands: int = N_BANDS) -> list:
    """[(lo, hi), ...] from the lowest band up; each split halves the band below."""
    hi = sample_rate / 2
    edges = []
    for _ in range(n_bands - 1):
        edges.append((hi / 2, hi))
        hi /= 2
    edges.append((0.0, hi))
    return edges[::-1]


def mean_magnitude_spectrum(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    if len(x) >= cfg.window_len:
        return stft_magnitude(x, cfg).mean(axis=0)
    # short inputs: one zero-padded frame
    frame = np.zeros(cfg.window_len)
    frame[: len(x)] = x
    return np.abs(np.fft.rfft(frame))


def extract_features(x: np.ndarray, sample_rate: float, cfg: StftConfig = StftConfig()) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < 64:
        raise InputTooShort(f"feature extraction needs at least 64 samples, got {x.shape}")

    mean = x.mean()
    centered = x - mean
    c2 = centered * centered
    var = float(c2.mean())
    rms = float(np.sqrt(np.dot(x, x) / len(x)))
    peak = float(max(x.max(), -x.min()))
    crest = peak / rms if rms > 0 else 0.0
    if var > 0:
        std = np.sqrt(var)
        skew = float(np.dot(c2, centered) / len(x) / std**3)
        kurt = float(np.dot(c2, c2) / len(x) / var**2 - 3.0)
    else:
        skew = kurt = 0.0

    mag = mean_magnitude_spectrum(x, cfg)
    freqs = np.arange(len(mag)) * sample_rate / cfg.window_len
    total_mag = mag.sum()
    centroid = float((freqs * mag).sum() / total_mag) if total_mag > 0 else 0.0
    power = mag**2
    total = power.sum()
    if total > 0:
        p = power / total
        nz = p[p > 0]
        entropy = float(-(nz * np.log(nz)).sum() / np.log(len(p)))
        ratios = []
        for i, (lo, hi) in enumerate(octave_band_edges(sample_rate)):
            upper = freqs <= hi if i == N_BANDS - 1 else freqs < hi
            ratios.append(float(power[(freqs >= lo) & upper].sum() / total))
    else:
        entropy = 0.0
        ratios = [1.0 / N_BANDS] * N_BANDS

    return np.array([rms, peak, crest, var, skew, kurt, centroid, entropy, *ratios])


def segment_features(segment, sensors, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Concatenated features of the chosen sensors, ascending sensor id."""
    return np.concatenate(
        [extract_features(segment.channel(s), segment.sample_rate_hz, cfg) for s in sorted(sensors)]
    )


def waveform_features(waves: np.ndarray, sample_rate: float, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Features of a (C, N) waveform stack."""
    return np.concatenate([extract_features(w, sample_rate, cfg) for w in waves])


def feature_names(sensors) -> list:
    return [f"{SENSOR_NAMES.get(s, s)}.{name}" for s in sorted(sensors) for name in FEATURE_NAMES]


def fit_normalizer(train_features: np.ndarray, taint=None) -> tuple:
    """Per-feature (mean, std). Zero-variance columns get (0, 1) and pass through unchanged."""
    X = np.asarray(train_features, dtype=np.float64)
    if taint is not None and np.any(taint):
        raise LeakageError(f"{int(np.sum(taint))} evaluation samples passed to fit_normalizer")
    if X.ndim != 2 or X.shape[0] < 2:
        raise TooFewSamples(f"need at least 2 training samples, got {X.shape[0] if X.ndim else 0}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    flat = std <= 0
    return np.where(flat, 0.0, mean), np.where(flat, 1.0, std)


def apply_normalizer(stats: tuple, features: np.ndarray) -> np.ndarray:
    mean, std = stats
    return (np.asarray(features, dtype=np.float64) - mean) / std


class FeatureScaler(TransformerMixin, BaseEstimator):
    """Z-score scaler that refuses to fit on samples flagged as evaluation data."""

    def fit(self, X, y=None, taint=None):
        self.mean_, self.scale_ = fit_normalizer(X, taint)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return apply_normalizer((self.mean_, self.scale_), X)
