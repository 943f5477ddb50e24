"""Seeded synthetic welding-cycle recordings.

A cycle is idle noise, a damped low-frequency horn-move burst, a welding phase
built around a 20 kHz carrier, and an idle tail. Tool wear and surface
contamination add their own spectral signatures to the welding phase. Each
sensor sees the shared source signal through a brick-wall passband and a gain,
plus its own white noise floor, and is quantized to 16 bits.

Every random draw is made regardless of the cycle's class, so two specs that
differ only in ``tool``/``surface`` share identical noise and jitter.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from weldmon.errors import InvalidSpec
from weldmon.ingest import SENSOR_IDS, SENSOR_NAMES, SURFACES, TOOLS, Manifest, Recording

CARRIER_HZ = 20_000.0
SUBHARMONIC_HZ = 10_000.0
HORN_HZ = 200.0
HUM_HZ = 600.0
EDGE_RAMP_S = 0.002
HORN_MOVE_S = 0.150

CONDITIONS = [(t, s) for t in TOOLS for s in SURFACES]


@dataclass(frozen=True)
class SensorModel:
    id: int
    gain: float
    noise_floor_rms: float
    passband_hz: tuple
    discriminative: bool

    @property
    def name(self) -> str:
        return SENSOR_NAMES[self.id]


DEFAULT_SENSORS = {
    0: SensorModel(0, gain=1.0, noise_floor_rms=0.004, passband_hz=(20.0, 3000.0), discriminative=False),
    2: SensorModel(2, gain=0.8, noise_floor_rms=0.004, passband_hz=(20.0, 3000.0), discriminative=False),
    4: SensorModel(4, gain=0.7, noise_floor_rms=0.004, passband_hz=(100.0, 23500.0), discriminative=True),
    6: SensorModel(6, gain=0.5, noise_floor_rms=0.004, passband_hz=(1000.0, 23500.0), discriminative=True),
    8: SensorModel(8, gain=1.0, noise_floor_rms=0.004, passband_hz=(10.0, 2000.0), discriminative=False),
}


def _sensor_id(x) -> int:
    if isinstance(x, str):
        return SENSOR_IDS[x]
    return int(x)


@dataclass(frozen=True)
class CycleSpec:
    seed: int
    t_hm_true_s: float
    t_weld_true_s: float
    tool: str = "New"
    surface: str = "Clean"
    sample_rate_hz: int = 48_000
    duration_s: float = 4.0
    t_welding_s: float = 1.0
    channels: tuple = field(default=(0, 2, 4, 6, 8))

    def validate(self, sensors=None) -> None:
        sensors = DEFAULT_SENSORS if sensors is None else sensors
        if self.tool not in TOOLS or self.surface not in SURFACES:
            raise InvalidSpec(f"unknown condition {self.tool}+{self.surface}")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.sample_rate_hz <= 0 or self.t_welding_s <= 0:
            raise InvalidSpec("sample rate and welding time must be positive")
        if not 0 < self.t_hm_true_s < self.t_weld_true_s:
            raise InvalidSpec("need 0 < t_hm_true_s < t_weld_true_s")
        if self.t_weld_true_s < self.t_hm_true_s + 0.2:
            raise InvalidSpec("welding must start at least 0.2 s after the horn moves")
        if self.t_weld_true_s + self.t_welding_s + 0.5 > self.duration_s:
            raise InvalidSpec("recording leaves no 0.5 s post-weld tail")
        if not self.channels:
            raise InvalidSpec("no channels requested")
        nyquist = self.sample_rate_hz / 2
        for cid in self.channels:
            model = sensors.get(_sensor_id(cid))
            if model is None:
                raise InvalidSpec(f"unknown sensor {cid!r}")
            lo, hi = model.passband_hz
            if not 0 <= lo < hi <= nyquist:
                raise InvalidSpec(f"sensor {model.name} passband {model.passband_hz} invalid at {self.sample_rate_hz} Hz")


def _band_noise(rng, n, sr, lo, hi):
    """Unit-RMS Gaussian noise confined to [lo, hi] Hz."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else x


def _bandpass(x, sr, lo, hi):
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    return np.fft.irfft(spec, len(x))


def _source_signal(spec: CycleSpec, rng) -> np.ndarray:
    sr = spec.sample_rate_hz
    n = int(round(sr * spec.duration_s))
    t = np.arange(n) / sr
    x = np.zeros(n)

    # Draw everything up front, in a fixed order, independent of class.
    horn_amp = 0.12 * rng.uniform(0.9, 1.1)
    horn_tau = rng.uniform(0.05, 0.07)
    carrier_amp = 0.25 * rng.uniform(0.9, 1.1)
    carrier_phase = rng.uniform(0, 2 * np.pi)
    am_rate = rng.uniform(6.0, 10.0)
    am_phase = rng.uniform(0, 2 * np.pi)
    am_depth_new = rng.uniform(0.05, 0.15)
    am_depth_worn = rng.uniform(0.30, 0.50)
    sub_amp = 0.08 * rng.uniform(0.8, 1.2)
    sub_phase = rng.uniform(0, 2 * np.pi)
    bump_amp = 0.03 * rng.uniform(0.8, 1.2)
    hum_amp = 0.04 * rng.uniform(0.9, 1.1)
    hum_phase = rng.uniform(0, 2 * np.pi)
    n_weld = int(round(sr * spec.t_welding_s))
    bump = _band_noise(rng, n_weld, sr, 5000.0, 8000.0)
    walk_steps = rng.standard_normal(int(spec.t_welding_s * 100) + 2)
    n_slips = int(rng.integers(3, 9))
    slip_starts = rng.uniform(0.0, spec.t_welding_s - 0.06, size=8)
    slip_durs = rng.uniform(0.020, 0.060, size=8)
    slip_freqs = rng.uniform(14_000.0, 16_000.0, size=8)
    slip_amps = rng.uniform(0.08, 0.20, size=8)

    # horn move: damped burst, cut off after HORN_MOVE_S
    i0 = int(round(spec.t_hm_true_s * sr))
    i1 = min(n, i0 + int(round(HORN_MOVE_S * sr)))
    th = t[i0:i1] - t[i0]
    x[i0:i1] += horn_amp * np.exp(-th / horn_tau) * np.sin(2 * np.pi * HORN_HZ * th)

    # welding phase
    w0 = int(round(spec.t_weld_true_s * sr))
    w1 = w0 + n_weld
    tw = t[w0:w1] - t[w0]
    worn = spec.tool == "Worn"
    depth = am_depth_worn if worn else am_depth_new
    envelope = 1.0 + depth * np.sin(2 * np.pi * am_rate * tw + am_phase)
    if spec.surface == "Contaminated":
        walk = np.cumsum(walk_steps)
        walk = (walk - walk.mean()) / (walk.std() + 1e-12) * 0.2
        walk = np.interp(tw, np.linspace(0, spec.t_welding_s, len(walk)), walk)
        envelope = envelope * np.clip(1.0 + walk, 0.6, 1.4)
    weld = carrier_amp * envelope * np.sin(2 * np.pi * CARRIER_HZ * tw + carrier_phase)
    weld += hum_amp * np.sin(2 * np.pi * HUM_HZ * tw + hum_phase)
    if worn:
        weld += sub_amp * envelope * np.sin(2 * np.pi * SUBHARMONIC_HZ * tw + sub_phase)
        weld += bump_amp * bump
    if spec.surface == "Contaminated":
        for k in range(n_slips):
            a = int(round(slip_starts[k] * sr))
            m = int(round(slip_durs[k] * sr))
            ts = np.arange(m) / sr
            weld[a:a + m] += slip_amps[k] * np.hanning(m) * np.sin(2 * np.pi * slip_freqs[k] * ts)
    # short fades keep the weld edges from leaking broadband energy into
    # the low-frequency sensors
    ramp = min(int(round(EDGE_RAMP_S * sr)), n_weld // 2)
    if ramp:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        weld[:ramp] *= fade
        weld[-ramp:] *= fade[::-1]
    x[w0:w1] += weld
    return x


def generate_cycle(spec: CycleSpec, sensors=None) -> Recording:
    """Render one welding cycle as an int16 :class:`Recording`."""
    sensors = DEFAULT_SENSORS if sensors is None else sensors
    spec.validate(sensors)
    rng = np.random.default_rng(spec.seed)
    source = _source_signal(spec, rng)
    sr = spec.sample_rate_hz
    columns = []
    for cid in spec.channels:
        model = sensors[_sensor_id(cid)]
        y = model.gain * _bandpass(source, sr, *model.passband_hz)
        y += model.noise_floor_rms * rng.standard_normal(len(y))
        columns.append(y)
    samples = np.clip(np.rint(np.stack(columns, axis=1) * 32767.0), -32768, 32767).astype(np.int16)
    manifest = Manifest(
        sample_rate_hz=sr,
        channels=[{"id": _sensor_id(c), "name": SENSOR_NAMES[_sensor_id(c)]} for c in spec.channels],
        labels={"tool": spec.tool, "surface": spec.surface},
        ground_truth={
            "t_hm_true_s": spec.t_hm_true_s,
            "t_weld_true_s": spec.t_weld_true_s,
            "t_welding_s": spec.t_welding_s,
        },
        seed=int(spec.seed),
    )
    return Recording(samples=samples, manifest=manifest)


def cycle_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, np.uint64)[0])


def dataset_specs(base_seed: int, cycles_per_class: int, **overrides) -> list:
    """Jittered :class:`CycleSpec` list, classes in blocks of ``cycles_per_class``."""
    if cycles_per_class < 1:
        raise InvalidSpec("cycles_per_class must be at least 1")
    specs = []
    for ci, (tool, surface) in enumerate(CONDITIONS):
        for j in range(cycles_per_class):
            index = ci * cycles_per_class + j
            seed = cycle_seed(base_seed, index)
            jitter = np.random.default_rng(seed ^ 0x5EED).uniform(-0.3, 0.3, size=2)
            specs.append(
                replace(
                    CycleSpec(
                        seed=seed,
                        t_hm_true_s=0.9 + float(jitter[0]),
                        t_weld_true_s=1.75 + float(jitter[1]),
                        tool=tool,
                        surface=surface,
                    ),
                    **overrides,
                )
            )
    return specs


def generate_dataset(base_seed: int, cycles_per_class: int, sensors=None, **overrides) -> list:
    recordings = []
    for i, spec in enumerate(dataset_specs(base_seed, cycles_per_class, **overrides)):
        rec = generate_cycle(spec, sensors)
        rec.recording_id = f"cycle_{i:03d}"
        recordings.append(rec)
    return recordings
