import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import toeplitz

from eeggraph.spectral import (BANDS, Band, BandFeatureSet, WindowPlan, band_bins, cross_spectral_density, dpss,
                               dpss_tridiagonal, extract_band_features, multitaper_spectra, zscore_rows)

from conftest import make_recording


def sinc_kernel_tapers(n, nw, k):
    """Dense oracle: leading eigenvectors of the prolate (sinc) Toeplitz matrix."""
    w = nw / n
    m = np.arange(n)
    col = np.where(m == 0, 2 * w, np.sin(2 * np.pi * w * m) / (np.pi * np.maximum(m, 1)))
    vals, vecs = np.linalg.eigh(toeplitz(col))
    order = np.argsort(vals)[::-1][:k]
    return vals[order], vecs[:, order].T


def align(ref, est):
    return ref * np.sign(ref @ est)


@pytest.mark.parametrize("n,nw,k", [(64, 2.5, 4), (128, 3.0, 5), (128, 2.5, 4)])
def test_dpss_orthonormal_and_matches_dense_oracles(n, nw, k):
    ts = dpss(n, nw, k)
    assert ts.tapers.shape == (k, n)
    gram = ts.tapers @ ts.tapers.T
    assert np.max(np.abs(gram - np.eye(k))) <= 1e-8
    lam, ref = sinc_kernel_tapers(n, nw, k)
    for r, t in zip(ref, ts.tapers):
        assert np.max(np.abs(align(r, t) - t)) <= 1e-6
    np.testing.assert_allclose(ts.eigenvalues, lam, atol=1e-8)
    d, e = dpss_tridiagonal(n, nw)
    _, vecs = np.linalg.eigh(np.diag(d) + np.diag(e, 1) + np.diag(e, -1))
    for r, t in zip(vecs[:, ::-1].T, ts.tapers):
        assert np.max(np.abs(align(r, t) - t)) <= 1e-8


@given(st.integers(32, 200), st.sampled_from([1.5, 2.0, 2.5, 3.0, 4.0]), st.data())
def test_dpss_eigenvalues_descending(n, nw, data):
    k = data.draw(st.integers(1, int(2 * nw - 1)))
    ts = dpss(n, nw, k)
    assert np.all(np.diff(ts.eigenvalues) <= 1e-12)
    assert np.all((ts.eigenvalues > 0) & (ts.eigenvalues <= 1 + 1e-12))
    assert np.all(ts.tapers.sum(axis=1) >= -1e-9)


def test_dpss_too_many_tapers():
    with pytest.raises(ValueError):
        dpss(64, 2.5, 5)


def test_sinusoid_peak():
    fs = 256.0
    t = np.arange(int(20 * fs)) / fs
    sp = multitaper_spectra(make_recording(np.sin(2 * np.pi * 10 * t)))
    assert sp.freqs[np.argmax(sp.psd[0])] == pytest.approx(10.0)
    assert sp.resolution_hz == pytest.approx(0.2)


def test_white_noise_parseval(rng):
    fs = 256.0
    x = rng.standard_normal(int(20 * fs)) * 3.0
    sp = multitaper_spectra(make_recording(x))
    total = sp.psd[0].sum() * (sp.freqs[1] - sp.freqs[0])
    assert total == pytest.approx(x.var(), rel=0.1)


def test_identical_channels_have_real_cross_spectrum(rng):
    x = rng.standard_normal(2560)
    sp = multitaper_spectra(make_recording(np.stack([x, x])))
    s = cross_spectral_density(sp)
    assert np.max(np.abs(s[0, 1].imag)) <= 1e-12 * np.max(np.abs(s[0, 1]))
    np.testing.assert_allclose(s, np.conj(np.swapaxes(s, 0, 1)))
    assert np.all(sp.psd >= 0)


def test_short_recording_rejected(rng):
    rec = make_recording(rng.standard_normal((1, 1280)))
    multitaper_spectra(rec)  # exactly one window is fine
    with pytest.raises(ValueError, match="shorter than one"):
        multitaper_spectra(rec, WindowPlan(window_s=6.0))


@given(st.floats(5, 60), st.floats(0.5, 5), st.floats(0.1, 1.0), st.sampled_from([128.0, 200.0, 256.0]))
def test_window_count_formula(duration, window, step_frac, fs):
    plan = WindowPlan(window_s=window, step_s=window * step_frac)
    n = int(duration * fs)
    win, step = plan.samples(fs)
    expected = 0 if n < win else 1 + (n - win) // step
    assert plan.count_windows(n, fs) == expected
    starts = [s for s in range(0, n) if s + win <= n and s % step == 0]
    assert len(starts) == expected


def test_alpha_has_25_bins(rng):
    idx = band_bins(641, 1280, 256.0, BANDS["alpha"])
    assert idx.size == 25
    sp = multitaper_spectra(make_recording(rng.standard_normal((3, 2560))))
    f = extract_band_features(sp, "alpha")
    assert f.features.shape == (3, 25)
    assert f.freqs[0] == pytest.approx(8.0) and f.freqs[-1] == pytest.approx(12.8)


def test_features_are_zscored(rng):
    sp = multitaper_spectra(make_recording(rng.standard_normal((4, 2560))))
    f = extract_band_features(sp, "beta")
    np.testing.assert_allclose(f.features.mean(axis=1), 0, atol=1e-6)
    np.testing.assert_allclose(f.features.std(axis=1), 1, atol=1e-6)


def test_constant_row_becomes_zeros(caplog):
    x = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]])
    with caplog.at_level(logging.WARNING):
        z = zscore_rows(x)
    assert np.all(z[1] == 0)
    assert "zero-variance" in caplog.text


def test_band_without_bins_rejected(rng):
    sp = multitaper_spectra(make_recording(rng.standard_normal((2, 1280))))
    with pytest.raises(ValueError, match="no bins"):
        extract_band_features(sp, Band("narrow", 8.01, 8.05))
    with pytest.raises(ValueError, match="unknown band"):
        extract_band_features(sp, "gamma")


def test_feature_set_roundtrip(tmp_path, rng):
    sp = multitaper_spectra(make_recording(rng.standard_normal((3, 2560)), subject="X", group="AD"))
    f = extract_band_features(sp, "theta")
    f.save(tmp_path / "f.json")
    g = BandFeatureSet.load(tmp_path / "f.json")
    assert g.subject_id == "X" and g.group_label == "AD" and g.band == f.band
    assert np.array_equal(g.features, f.features) and np.array_equal(g.band_spectra, f.band_spectra)
