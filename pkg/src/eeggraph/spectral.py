"""Multitaper spectral estimation and per-band node features."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .eeg_io import Recording
from .numerics import rfft, rfft_freqs, sym_tridiag_eig
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Band:
    name: str
    f_lo: float
    f_hi: float

    def __post_init__(self):
        if not self.f_lo < self.f_hi:
            raise ValueError(f"band {self.name}: f_lo must be below f_hi")


BANDS = {
    "delta": Band("delta", 0.5, 4.0),
    "theta": Band("theta", 4.0, 8.0),
    "alpha": Band("alpha", 8.0, 13.0),
    "beta": Band("beta", 13.0, 40.0),
}


def get_band(band) -> Band:
    if isinstance(band, Band):
        return band
    try:
        return BANDS[band]
    except KeyError:
        raise ValueError(f"unknown band {band!r}; expected one of {sorted(BANDS)}") from None


@dataclass(frozen=True)
class WindowPlan:
    window_s: float = 5.0
    step_s: float = 0.5
    taper_count: int = 4
    time_bandwidth: float = 2.5
    n_windows: int | None = None

    def __post_init__(self):
        if not 0 < self.step_s <= self.window_s:
            raise ValueError("need 0 < step_s <= window_s")

    def samples(self, sample_rate_hz: float) -> tuple[int, int]:
        return int(round(self.window_s * sample_rate_hz)), int(round(self.step_s * sample_rate_hz))

    def count_windows(self, n_samples: int, sample_rate_hz: float) -> int:
        win, step = self.samples(sample_rate_hz)
        if n_samples < win:
            return 0
        return (n_samples - win) // step + 1

    def bind(self, rec: Recording) -> "WindowPlan":
        n = self.count_windows(rec.n_samples, rec.sample_rate_hz)
        if n < 1:
            raise ValueError(
                f"recording of {rec.n_samples / rec.sample_rate_hz:g} s is shorter than one "
                f"{self.window_s:g} s window"
            )
        return WindowPlan(self.window_s, self.step_s, self.taper_count, self.time_bandwidth, n)


@dataclass(frozen=True, eq=False)
class TaperSet:
    tapers: np.ndarray  # [K x window_len]
    eigenvalues: np.ndarray  # concentration ratios, descending


def _concentration(taper: np.ndarray, w: float) -> float:
    # v^T A v with A the sinc (prolate) Toeplitz kernel, via the autocorrelation of v.
    n = taper.size
    r = np.correlate(taper, taper, mode="full")[n - 1:]
    m = np.arange(1, n)
    return float(2 * w * r[0] + 2 * np.sum(r[1:] * np.sin(2 * np.pi * w * m) / (np.pi * m)))


def dpss_tridiagonal(window_len: int, time_bandwidth: float) -> tuple[np.ndarray, np.ndarray]:
    """Diagonals of the commuting tridiagonal matrix whose eigenvectors are the DPSS."""
    n = np.arange(window_len)
    w = time_bandwidth / window_len
    diag = ((window_len - 1) / 2.0 - n) ** 2 * np.cos(2 * np.pi * w)
    off = n[1:] * (window_len - n[1:]) / 2.0
    return diag, off


def dpss(window_len: int, time_bandwidth: float, k: int) -> TaperSet:
    if k < 1 or k > 2 * time_bandwidth - 1:
        raise ValueError(f"k={k} tapers requires 1 <= k <= 2*NW - 1 = {2 * time_bandwidth - 1:g}")
    if window_len < k:
        raise ValueError("window_len must be at least k")
    diag, off = dpss_tridiagonal(window_len, time_bandwidth)
    _, vecs = sym_tridiag_eig(diag, off, k)
    tapers = vecs.T.copy()
    for t in tapers:
        t /= np.linalg.norm(t)
        s = t.sum()
        if abs(s) > 1e-9 * math.sqrt(window_len):
            sign = np.sign(s)
        else:
            sign = np.sign(t[np.flatnonzero(np.abs(t) > 1e-12)[0]])
        t *= sign
    w = time_bandwidth / window_len
    eig = np.array([_concentration(t, w) for t in tapers])
    return TaperSet(tapers, eig)


@dataclass(frozen=True, eq=False)
class Spectra:
    """Per-window tapered spectra of one recording.

    ``coefs`` has shape [n_windows, K, N, F_full]; ``psd`` is the one-sided
    multitaper PSD [N, F_full] in units^2/Hz.
    """

    rec: Recording
    plan: WindowPlan
    freqs: np.ndarray
    coefs: np.ndarray = field(repr=False)
    psd: np.ndarray = field(repr=False)

    @property
    def resolution_hz(self) -> float:
        return 1.0 / self.plan.window_s


def _segments(data: np.ndarray, win: int, step: int, n_windows: int) -> np.ndarray:
    idx = np.arange(n_windows)[:, None] * step + np.arange(win)[None, :]
    return data[:, idx].transpose(1, 0, 2)  # [n_windows, N, win]


def multitaper_spectra(rec: Recording, plan: WindowPlan | None = None) -> Spectra:
    plan = (plan or WindowPlan()).bind(rec)
    fs = rec.sample_rate_hz
    win, step = plan.samples(fs)
    tapers = dpss(win, plan.time_bandwidth, plan.taper_count).tapers
    segs = _segments(rec.data, win, step, plan.n_windows)
    segs = segs - segs.mean(axis=-1, keepdims=True)
    coefs = rfft(segs[:, None, :, :] * tapers[None, :, None, :], axis=-1)
    one_sided = np.full(coefs.shape[-1], 2.0)
    one_sided[0] = 1.0
    if win % 2 == 0:
        one_sided[-1] = 1.0
    norm2 = np.sum(tapers ** 2, axis=1)[None, :, None, None]
    power = (np.abs(coefs) ** 2) / (fs * norm2)
    psd = power.mean(axis=(0, 1)) * one_sided
    return Spectra(rec, plan, rfft_freqs(win, fs), coefs, psd)


def cross_spectral_density(spectra: Spectra) -> np.ndarray:
    """Averaged cross-spectra ``S[i, j, f] = E[X_i conj(X_j)]`` with PSD scaling."""
    c = spectra.coefs
    s = np.einsum("wkif,wkjf->ijf", c, np.conj(c)) / (c.shape[0] * c.shape[1])
    return s / spectra.rec.sample_rate_hz


def band_bins(freqs_n: int, window_len: int, sample_rate_hz: float, band: Band) -> np.ndarray:
    """Indices k with f_lo <= k*fs/window_len < f_hi, computed without float drift."""
    scale = window_len / sample_rate_hz
    lo = math.ceil(band.f_lo * scale - 1e-9)
    hi = math.ceil(band.f_hi * scale - 1e-9)
    return np.arange(max(lo, 0), min(hi, freqs_n))


def zscore_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    scale = np.max(np.abs(x), axis=1, keepdims=True)
    degenerate = (sd <= 1e-12 * np.maximum(scale, 1e-300)).ravel()
    out = np.zeros_like(x)
    ok = ~degenerate
    out[ok] = (x[ok] - mu[ok]) / sd[ok]
    if degenerate.any():
        log.warning("zero-variance feature rows %s set to zeros", np.flatnonzero(degenerate).tolist())
    return out


@dataclass(frozen=True, eq=False)
class BandFeatureSet:
    subject_id: str
    group_label: str
    segment_id: int
    band: Band
    channels: tuple[str, ...]
    freqs: np.ndarray
    features: np.ndarray = field(repr=False)  # [N x F], z-scored rows
    band_spectra: np.ndarray = field(repr=False)  # [n_windows x K x N x F]
    psd: np.ndarray = field(repr=False)  # raw band PSD [N x F]

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    def save(self, path):
        meta = {
            "subject_id": self.subject_id,
            "group_label": self.group_label,
            "segment_id": self.segment_id,
            "band": [self.band.name, self.band.f_lo, self.band.f_hi],
            "channels": list(self.channels),
        }
        return save_tensors(path, {"freqs": self.freqs, "features": self.features,
                                   "band_spectra": self.band_spectra, "psd": self.psd}, meta)

    @classmethod
    def load(cls, path) -> "BandFeatureSet":
        t, meta = load_tensors(path)
        name, lo, hi = meta["band"]
        return cls(meta["subject_id"], meta["group_label"], int(meta["segment_id"]), Band(name, lo, hi),
                   tuple(meta["channels"]), t["freqs"], t["features"], t["band_spectra"], t["psd"])


def extract_band_features(spectra: Spectra, band) -> BandFeatureSet:
    band = get_band(band)
    fs = spectra.rec.sample_rate_hz
    if band.f_lo >= fs / 2:
        raise ValueError(f"band {band.name} lies above Nyquist ({fs / 2:g} Hz)")
    win, _ = spectra.plan.samples(fs)
    idx = band_bins(spectra.freqs.size, win, fs, band)
    if idx.size == 0:
        raise ValueError(f"band {band.name} has no bins at {spectra.resolution_hz:g} Hz resolution")
    psd = spectra.psd[:, idx]
    rec = spectra.rec
    return BandFeatureSet(
        rec.subject_id, rec.group_label, rec.segment_id, band, rec.channels,
        spectra.freqs[idx], zscore_rows(psd), spectra.coefs[..., idx], psd,
    )
