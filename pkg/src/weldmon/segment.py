"""Two-stage threshold segmentation of the welding phase.

Stage one finds the horn-move onset, stage two the welding onset at least
``horn_move_max_s`` later. Thresholds are multiples of the idle baseline RMS,
so the detected marks do not depend on the recording's amplitude scale.

Each sliding-RMS frame is timestamped at its right edge, the first instant its
value is available to a causal detector. The fixed ``sw_adjust_s`` correction
then compensates for the detection delay.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

from weldmon.errors import NoHornMove, NoWeldOnset, SegmentOutOfBounds
from weldmon.ingest import Recording, WeldSegment


@dataclass(frozen=True)
class SegmenterConfig:
    reference_channel: int = 4
    rms_window_s: float = 0.010
    rms_hop_s: float = 0.001
    baseline_window_s: float = 0.5
    theta1: float = 4.0
    theta2: float = 8.0
    horn_move_max_s: float = 0.2
    sw_adjust_s: float = 0.010
    t_welding_s: float = 1.0

    def __post_init__(self):
        if not (self.theta1 > 1 and self.theta2 > 1):
            raise ValueError("theta1 and theta2 must exceed 1")
        if not self.rms_window_s > self.rms_hop_s > 0:
            raise ValueError("need rms_window_s > rms_hop_s > 0")


def sliding_rms(x: np.ndarray, window: int, hop: int):
    """RMS of each full window; returns (rms, right-edge sample index)."""
    if len(x) < window:
        return np.zeros(0), np.zeros(0, dtype=int)
    frames = sliding_window_view(np.asarray(x, dtype=np.float64), window)[::hop]
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    ends = np.arange(len(rms)) * hop + window
    return rms, ends


def detect_marks(x: np.ndarray, sample_rate: float, cfg: SegmenterConfig = SegmenterConfig()) -> dict:
    """Return ``{"t_hm_s", "t_sw_s", "t_ew_s"}`` for one reference channel."""
    window = int(round(cfg.rms_window_s * sample_rate))
    hop = int(round(cfg.rms_hop_s * sample_rate))
    rms, ends = sliding_rms(x, window, hop)
    times = ends / sample_rate

    idle = times <= cfg.baseline_window_s
    baseline = float(np.median(rms[idle])) if idle.any() else 0.0

    above1 = np.flatnonzero(rms > cfg.theta1 * baseline)
    if above1.size == 0:
        raise NoHornMove("reference channel never exceeds the horn-move threshold")
    t_hm = float(times[above1[0]])

    after = times >= t_hm + cfg.horn_move_max_s
    above2 = np.flatnonzero(after & (rms > cfg.theta2 * baseline))
    if above2.size == 0:
        raise NoWeldOnset(f"no welding onset after t_hm + {cfg.horn_move_max_s} s = {t_hm + cfg.horn_move_max_s:.3f} s")
    t_sw = float(times[above2[0]]) - cfg.sw_adjust_s
    return {"t_hm_s": t_hm, "t_sw_s": t_sw, "t_ew_s": t_sw + cfg.t_welding_s}


def segment_cycle(rec: Recording, cfg: SegmenterConfig = SegmenterConfig()) -> WeldSegment:
    """Cut the welding window out of every channel of ``rec``."""
    sr = rec.sample_rate
    if cfg.reference_channel not in rec.manifest.channel_ids:
        raise ValueError(f"reference channel {cfg.reference_channel} not in recording")
    marks = detect_marks(rec.channel(cfg.reference_channel), sr, cfg)
    n = int(round(sr * cfg.t_welding_s))
    start = int(round(marks["t_sw_s"] * sr))
    n_frames = rec.samples.shape[0]
    if start < 0 or start + n > n_frames + 1:
        raise SegmentOutOfBounds(
            f"welding window [{marks['t_sw_s']:.3f}, {marks['t_ew_s']:.3f}) s exceeds the "
            f"{n_frames / sr:.3f} s recording"
        )
    data = rec.samples[start:start + n].astype(np.float32) / np.float32(32768.0)
    if data.shape[0] == n - 1:
        data = np.concatenate([data, data[-1:]], axis=0)
    return WeldSegment(
        data=data,
        marks=marks,
        labels=rec.manifest.labels,
        source_id=rec.recording_id,
        sample_rate_hz=sr,
        channels=list(rec.manifest.channels),
    )


class Segmenter(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform`` maps recordings to weld segments."""

    def __init__(self, reference_channel=4, theta1=4.0, theta2=8.0, t_welding_s=1.0):
        self.reference_channel = reference_channel
        self.theta1 = theta1
        self.theta2 = theta2
        self.t_welding_s = t_welding_s

    def _config(self) -> SegmenterConfig:
        return SegmenterConfig(
            reference_channel=self.reference_channel,
            theta1=self.theta1,
            theta2=self.theta2,
            t_welding_s=self.t_welding_s,
        )

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or self._config()
        return [segment_cycle(rec, cfg) for rec in X]


def config_dict(cfg: SegmenterConfig) -> dict:
    return asdict(cfg)
