"""Recordings, the default montage, file formats and a synthetic EEG generator.

CSV layout::

    # rate=256 subject=S01 group=AD segment=1
    Fp1,Fp2,...
    <samples of channel 0>
    <samples of channel 1>
    ...

Binary layout: the magic ``EEGR``, a little-endian uint32 header length, a
UTF-8 JSON header, then ``n_channels * n_samples`` little-endian float64
values in row-major order.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import seeded_rng

GROUPS = ("HC", "AD")
MIN_WINDOW_S = 5.0

# Unit-disc projection of the 10-20 layout (x to the right ear, y to the nose).
_MONTAGE_COORDS = {
    "Fp1": (-0.247, 0.761), "Fp2": (0.247, 0.761),
    "F7": (-0.647, 0.470), "F3": (-0.320, 0.420), "Fz": (0.0, 0.400),
    "F4": (0.320, 0.420), "F8": (0.647, 0.470),
    "T3": (-0.800, 0.0), "C3": (-0.400, 0.0), "Cz": (0.0, 0.0),
    "C4": (0.400, 0.0), "T4": (0.800, 0.0),
    "T5": (-0.647, -0.470), "P3": (-0.320, -0.420), "Pz": (0.0, -0.400),
    "P4": (0.320, -0.420), "O1": (-0.247, -0.761),
}
DEFAULT_CHANNELS = tuple(_MONTAGE_COORDS)  # T6 and O2 excluded


class RecordingFormatError(ValueError):
    """Malformed recording file or invalid recording contents."""


@dataclass(frozen=True)
class Montage:
    channels: tuple[str, ...]
    coords: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.channels) != len(self.coords):
            raise ValueError("one coordinate pair per channel required")
        for name, (x, y) in zip(self.channels, self.coords):
            if x * x + y * y > 1.0:
                raise ValueError(f"channel {name} outside the unit disc")

    @classmethod
    def default(cls) -> "Montage":
        return cls(DEFAULT_CHANNELS, tuple(_MONTAGE_COORDS[c] for c in DEFAULT_CHANNELS))

    def index(self, name: str) -> int:
        return self.channels.index(name)


@dataclass(frozen=True, eq=False)
class Recording:
    subject_id: str
    group_label: str
    segment_id: int
    sample_rate_hz: float
    channels: tuple[str, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise RecordingFormatError("data must be a [n_channels x n_samples] matrix")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.group_label not in GROUPS:
            raise RecordingFormatError(f"group_label must be one of {GROUPS}, got {self.group_label!r}")
        if self.segment_id not in (1, 2, 3):
            raise RecordingFormatError(f"segment_id must be 1, 2 or 3, got {self.segment_id}")
        if not self.sample_rate_hz > 0:
            raise RecordingFormatError("sample_rate_hz must be positive")
        if len(self.channels) != data.shape[0]:
            raise RecordingFormatError(
                f"{len(self.channels)} channel names for {data.shape[0]} data rows"
            )
        if len(set(self.channels)) != len(self.channels):
            raise RecordingFormatError("channel names must be unique")
        if data.shape[1] < self.sample_rate_hz * MIN_WINDOW_S:
            raise RecordingFormatError(
                f"recording has {data.shape[1]} samples, need at least {MIN_WINDOW_S:g} s"
            )
        bad = np.argwhere(~np.isfinite(data))
        if bad.size:
            ch, s = bad[0]
            raise RecordingFormatError(f"non-finite sample at channel {ch}, sample {s}")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def label(self) -> int:
        return GROUPS.index(self.group_label)

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.group_label == other.group_label
            and self.segment_id == other.segment_id
            and self.sample_rate_hz == other.sample_rate_hz
            and self.channels == other.channels
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


# --- file formats ---------------------------------------------------------

_MAGIC = b"EEGR"


def _header_dict(rec: Recording) -> dict:
    return {
        "rate": rec.sample_rate_hz,
        "subject": rec.subject_id,
        "group": rec.group_label,
        "segment": rec.segment_id,
        "channels": list(rec.channels),
        "n_samples": rec.n_samples,
    }


def write_recording(rec: Recording, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        lines = [
            f"# rate={rec.sample_rate_hz!r} subject={rec.subject_id} "
            f"group={rec.group_label} segment={rec.segment_id}",
            ",".join(rec.channels),
        ]
        lines += [",".join(repr(float(v)) for v in row) for row in rec.data]
        path.write_text("\n".join(lines) + "\n")
    elif format == "binary":
        header = json.dumps(_header_dict(rec)).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<I", len(header)) + header)
            fh.write(rec.data.astype("<f8").tobytes())
    else:
        raise ValueError(f"unknown format {format!r}")


def _parse_csv_header(line: str) -> dict:
    if not line.startswith("#"):
        raise RecordingFormatError("no header: first line must be '# rate=<hz>'")
    fields = {}
    for tok in line[1:].split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise RecordingFormatError(f"malformed header token {tok!r}")
        fields[key] = value
    if "rate" not in fields:
        raise RecordingFormatError("malformed header: missing rate=<hz>")
    try:
        fields["rate"] = float(fields["rate"])
    except ValueError:
        raise RecordingFormatError(f"malformed header: bad rate {fields['rate']!r}") from None
    return fields


def load_recording(path, format: str = "csv", **defaults) -> Recording:
    """Read a recording written by :func:`write_recording`.

    ``defaults`` (subject_id, group_label, segment_id) fill metadata that a
    hand-made CSV header omits.
    """
    path = Path(path)
    if format == "csv":
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise RecordingFormatError("no header: file is empty")
        meta = _parse_csv_header(lines[0])
        if len(lines) < 2:
            raise RecordingFormatError("malformed header: missing channel-name line")
        channels = [c.strip() for c in lines[1].split(",")]
        rows = lines[2:]
        if len(rows) != len(channels):
            raise RecordingFormatError(f"header declares {len(channels)} channels, found {len(rows)} rows")
        data = []
        for i, row in enumerate(rows):
            try:
                vals = [float(v) for v in row.split(",")]
            except ValueError:
                raise RecordingFormatError(f"unparseable value in row {i}") from None
            if data and len(vals) != len(data[0]):
                raise RecordingFormatError(f"ragged row {i}: {len(vals)} samples, expected {len(data[0])}")
            data.append(vals)
        subject = meta.get("subject", defaults.get("subject_id", path.stem))
        group = meta.get("group", defaults.get("group_label", "HC"))
        segment = int(meta.get("segment", defaults.get("segment_id", 1)))
        rate = meta["rate"]
        arr = np.array(data, dtype=float)
    elif format == "binary":
        raw = path.read_bytes()
        if len(raw) < 8 or raw[:4] != _MAGIC:
            raise RecordingFormatError("no header: missing EEGR magic")
        (hlen,) = struct.unpack("<I", raw[4:8])
        try:
            meta = json.loads(raw[8:8 + hlen])
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise RecordingFormatError("malformed header JSON") from None
        channels = meta["channels"]
        body = raw[8 + hlen:]
        n_ch, n_s = len(channels), int(meta["n_samples"])
        if len(body) != 8 * n_ch * n_s:
            raise RecordingFormatError(f"payload has {len(body)} bytes, expected {8 * n_ch * n_s}")
        arr = np.frombuffer(body, dtype="<f8").reshape(n_ch, n_s).astype(np.float64)
        subject, group, segment, rate = meta["subject"], meta["group"], int(meta["segment"]), meta["rate"]
    else:
        raise ValueError(f"unknown format {format!r}")
    return Recording(subject, group, segment, float(rate), tuple(channels), arr)


# --- synthetic data -------------------------------------------------------

# Default coupled pairs in the default montage: Fz-F3, F3-F7, C4-F8, C4-Fp2.
DEFAULT_COUPLED_PAIRS = ((4, 3), (3, 2), (10, 6), (10, 1))

_BAND_COMPONENTS = {
    # band: (f_lo, f_hi, amplitude in microvolts)
    "delta": (1.0, 3.5, 12.0),
    "theta": (4.5, 7.5, 8.0),
    "alpha": (8.5, 12.5, 10.0),
    "beta": (14.0, 30.0, 4.0),
}


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic cohort.

    Each channel is a sum of one narrowband oscillation per band plus white
    noise. An oscillation is ``cos(2*pi*f*t + psi(t))`` where ``psi`` is a
    smooth stationary random phase. For every coupled pair ``(a, b)`` in
    ``coupled_band``, channel ``b`` uses the phase
    ``(1 - c) * psi_b + c * (psi_a - coupling_lag_rad)`` with ``c`` the
    coupling strength of the subject's group and inherits channel ``a``'s
    frequency. Pairs are applied in order, so a chain ``(a, b), (b, c)``
    couples ``c`` to the already-coupled ``b``.
    """

    n_subjects_per_group: int = 12
    duration_s: float = 20.0
    sample_rate_hz: float = 256.0
    coupling_strength_ad: float = 0.9
    coupling_strength_hc: float = 0.0
    coupled_pairs: tuple[tuple[int, int], ...] = DEFAULT_COUPLED_PAIRS
    noise_sigma: float = 2.0
    rng_seed: int = 0
    coupled_band: str = "alpha"
    coupling_lag_rad: float = math.pi / 4
    phase_sigma_rad: float = math.pi
    phase_timescale_s: float = 0.25
    channels: tuple[str, ...] = DEFAULT_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "coupled_pairs", tuple(tuple(int(i) for i in p) for p in self.coupled_pairs))
        object.__setattr__(self, "channels", tuple(self.channels))
        for c in (self.coupling_strength_ad, self.coupling_strength_hc):
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"coupling strength must be in [0, 1], got {c}")
        if self.duration_s < 10:
            raise ValueError("duration_s must be at least 10")
        if self.n_subjects_per_group < 1:
            raise ValueError("n_subjects_per_group must be positive")
        if self.coupled_band not in _BAND_COMPONENTS:
            raise ValueError(f"unknown band {self.coupled_band!r}")
        n = len(self.channels)
        for a, b in self.coupled_pairs:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ValueError(f"coupled pair ({a}, {b}) out of range for {n} channels")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "coupled_pairs" in d:
            d["coupled_pairs"] = tuple(tuple(p) for p in d["coupled_pairs"])
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls.from_dict(json.loads(text))


def _smooth_phase(rng, n: int, fs: float, sigma: float, timescale_s: float) -> np.ndarray:
    # Gaussian-filtered white noise rescaled to the requested stationary std.
    width = max(1, int(round(timescale_s * fs)))
    half = 4 * width
    kernel = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
    noise = rng.standard_normal(n + 2 * half)
    smooth = np.convolve(noise, kernel, mode="valid")[:n]
    return sigma * smooth / np.linalg.norm(kernel)


def _synth_segment(spec: SynthSpec, coupling: float, rng) -> np.ndarray:
    fs = spec.sample_rate_hz
    n = int(round(spec.duration_s * fs))
    n_ch = len(spec.channels)
    t = np.arange(n) / fs
    data = spec.noise_sigma * rng.standard_normal((n_ch, n))
    for band, (lo, hi, amp) in _BAND_COMPONENTS.items():
        freqs = rng.uniform(lo, hi, size=n_ch)
        amps = amp * rng.uniform(0.7, 1.3, size=n_ch)
        phases = np.stack([
            _smooth_phase(rng, n, fs, spec.phase_sigma_rad, spec.phase_timescale_s) for _ in range(n_ch)
        ])
        phases += rng.uniform(0, 2 * np.pi, size=(n_ch, 1))
        if band == spec.coupled_band:
            for a, b in spec.coupled_pairs:
                phases[b] = (1 - coupling) * phases[b] + coupling * (phases[a] - spec.coupling_lag_rad)
                freqs[b] = freqs[a]
        data += amps[:, None] * np.cos(2 * np.pi * freqs[:, None] * t + phases)
    return data


def generate_synthetic(spec: SynthSpec) -> list[Recording]:
    """Deterministic cohort: ``2 * n_subjects_per_group`` subjects, 3 segments each."""
    rng = seeded_rng(spec.rng_seed)
    recs = []
    for group in GROUPS:
        coupling = spec.coupling_strength_ad if group == "AD" else spec.coupling_strength_hc
        for s in range(spec.n_subjects_per_group):
            subject = f"{group}{s + 1:02d}"
            for seg in (1, 2, 3):
                data = _synth_segment(spec, coupling, rng)
                recs.append(Recording(subject, group, seg, spec.sample_rate_hz, spec.channels, data))
    return recs
