"""Recording and segment types and their on-disk formats.

A recording is a pair of files sharing a stem: ``<stem>.pcm`` holds raw
little-endian int16 interleaved frames, ``<stem>.json`` the manifest. A segment
set is ``<stem>.segf32`` (little-endian float32, segments back to back, each
frame-major) plus a ``<stem>.json`` index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from weldmon.errors import (
    CorruptFile,
    InvalidManifest,
    InvalidSegment,
    UnsupportedVersion,
)

FORMAT_VERSION = 1

SENSOR_NAMES = {
    0: "PowerA",
    2: "PowerB",
    4: "Accelerometer",
    6: "Microphone",
    8: "Geophone",
}
SENSOR_IDS = {name: sid for sid, name in SENSOR_NAMES.items()}

TOOLS = ("New", "Worn")
SURFACES = ("Clean", "Contaminated")

_PCM = np.dtype("<i2")
_F32 = np.dtype("<f4")


@dataclass
class Manifest:
    sample_rate_hz: int
    channels: list  # [{"id": int, "name": str}, ...] in interleave order
    labels: Optional[dict] = None  # {"tool": ..., "surface": ...}
    ground_truth: Optional[dict] = None  # {"t_hm_true_s", "t_weld_true_s", "t_welding_s"}
    seed: Optional[int] = None
    format_version: int = FORMAT_VERSION

    @property
    def channel_ids(self) -> list:
        return [int(c["id"]) for c in self.channels]

    def validate(self) -> None:
        if not isinstance(self.sample_rate_hz, int) or self.sample_rate_hz <= 0:
            raise InvalidManifest(f"sample_rate_hz must be a positive int, got {self.sample_rate_hz!r}")
        if not self.channels:
            raise InvalidManifest("manifest lists no channels")
        ids = self.channel_ids
        if len(set(ids)) != len(ids):
            raise InvalidManifest(f"duplicate channel ids {ids}")
        if self.labels is not None:
            _check_labels(self.labels, InvalidManifest)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "sample_rate_hz": self.sample_rate_hz,
            "channels": [{"id": int(c["id"]), "name": str(c["name"])} for c in self.channels],
            "labels": self.labels,
            "ground_truth": self.ground_truth,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        try:
            version = d["format_version"]
            if version != FORMAT_VERSION:
                raise UnsupportedVersion(f"manifest format_version {version} is not supported")
            m = cls(
                sample_rate_hz=d["sample_rate_hz"],
                channels=list(d["channels"]),
                labels=d.get("labels"),
                ground_truth=d.get("ground_truth"),
                seed=d.get("seed"),
                format_version=version,
            )
        except (KeyError, TypeError) as exc:
            raise CorruptFile(f"manifest is missing a required field: {exc}") from exc
        try:
            m.validate()
        except InvalidManifest as exc:
            raise CorruptFile(str(exc)) from exc
        return m


def _check_labels(labels, exc_type):
    if labels.get("tool") not in TOOLS or labels.get("surface") not in SURFACES:
        raise exc_type(f"invalid labels {labels!r}")


def condition_name(labels: dict) -> str:
    return f"{labels['tool']}+{labels['surface']}"


@dataclass
class Recording:
    """One continuous multi-channel capture.

    ``samples`` is an int16 array of shape (frames, k), channel order
    matching ``manifest.channels``.
    """

    samples: np.ndarray
    manifest: Manifest
    recording_id: Optional[str] = None

    @property
    def sample_rate(self) -> int:
        return self.manifest.sample_rate_hz

    @property
    def duration_s(self) -> float:
        return self.samples.shape[0] / self.sample_rate

    def channel(self, sensor_id: int) -> np.ndarray:
        """Channel as float64 in [-1, 1)."""
        idx = self.manifest.channel_ids.index(sensor_id)
        return self.samples[:, idx].astype(np.float64) / 32768.0


@dataclass
class WeldSegment:
    data: np.ndarray  # float32, (N, k)
    marks: dict  # {"t_hm_s", "t_sw_s", "t_ew_s"}
    labels: Optional[dict]
    source_id: Optional[str]
    sample_rate_hz: int
    channels: list = field(default_factory=list)

    @property
    def t_welding_s(self) -> float:
        return self.marks["t_ew_s"] - self.marks["t_sw_s"]

    @property
    def channel_ids(self) -> list:
        return [int(c["id"]) for c in self.channels]

    def channel(self, sensor_id: int) -> np.ndarray:
        return self.data[:, self.channel_ids.index(sensor_id)]

    def validate(self) -> None:
        n_expected = int(round(self.sample_rate_hz * self.t_welding_s))
        if self.data.ndim != 2 or self.data.shape[0] != n_expected:
            raise InvalidSegment(
                f"segment has {self.data.shape[0] if self.data.ndim else 0} rows, "
                f"expected round(f * t_welding) = {n_expected}"
            )
        if self.data.shape[1] != len(self.channels):
            raise InvalidSegment(f"{self.data.shape[1]} data columns for {len(self.channels)} channels")


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".pcm", ".json", ".segf32") else path


def write_recording(rec: Recording, path) -> None:
    """Write ``<path>.pcm`` and ``<path>.json``."""
    rec.manifest.validate()
    samples = np.asarray(rec.samples)
    if samples.ndim != 2 or samples.shape[1] != len(rec.manifest.channels):
        raise InvalidManifest(
            f"samples shape {samples.shape} does not match {len(rec.manifest.channels)} channels"
        )
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".pcm").write_bytes(samples.astype(_PCM).tobytes())
    stem.with_suffix(".json").write_text(
        json.dumps(rec.manifest.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: malformed JSON ({exc})") from exc


def read_recording(path) -> Recording:
    stem = _stem(path)
    manifest = Manifest.from_dict(_read_json(stem.with_suffix(".json")))
    raw = stem.with_suffix(".pcm").read_bytes()
    k = len(manifest.channels)
    if len(raw) % (2 * k):
        raise CorruptFile(f"{stem}.pcm: {len(raw)} bytes is not a whole number of {k}-channel int16 frames")
    samples = np.frombuffer(raw, dtype=_PCM).reshape(-1, k).astype(np.int16)
    return Recording(samples=samples, manifest=manifest, recording_id=stem.name)


def list_recordings(directory) -> list:
    """Stems of every recording (``.pcm`` with a sibling ``.json``) in a directory, sorted."""
    directory = Path(directory)
    return sorted(p.with_suffix("") for p in directory.glob("*.pcm") if p.with_suffix(".json").exists())


def write_segment_set(segments: list, path) -> None:
    stem = _stem(path)
    index = []
    offset = 0
    for seg in segments:
        seg.validate()
        n, k = seg.data.shape
        index.append(
            {
                "source_id": seg.source_id,
                "sample_rate_hz": int(seg.sample_rate_hz),
                "n_frames": int(n),
                "channels": [{"id": int(c["id"]), "name": str(c["name"])} for c in seg.channels],
                "marks": {key: float(v) for key, v in seg.marks.items()},
                "labels": seg.labels,
                "offset": offset,
            }
        )
        offset += n * k
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".segf32"), "wb") as fh:
        for seg in segments:
            fh.write(np.ascontiguousarray(seg.data, dtype=_F32).tobytes())
    doc = {"format_version": FORMAT_VERSION, "segments": index}
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def read_segment_set(path) -> list:
    stem = _stem(path)
    doc = _read_json(stem.with_suffix(".json"))
    if doc.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"segment set format_version {doc.get('format_version')} is not supported")
    raw = stem.with_suffix(".segf32").read_bytes()
    if len(raw) % 4:
        raise CorruptFile(f"{stem}.segf32: {len(raw)} bytes is not a whole number of float32 values")
    flat = np.frombuffer(raw, dtype=_F32)
    out = []
    try:
        for entry in doc["segments"]:
            k = len(entry["channels"])
            size = entry["n_frames"] * k
            start = entry["offset"]
            if start + size > flat.size:
                raise CorruptFile(f"{stem}.segf32 is shorter than its index claims")
            data = flat[start:start + size].reshape(entry["n_frames"], k).astype(np.float32)
            out.append(
                WeldSegment(
                    data=data,
                    marks=dict(entry["marks"]),
                    labels=entry["labels"],
                    source_id=entry["source_id"],
                    sample_rate_hz=entry["sample_rate_hz"],
                    channels=list(entry["channels"]),
                )
            )
    except (KeyError, TypeError) as exc:
        raise CorruptFile(f"{stem}.json: malformed segment index ({exc})") from exc
    return out
