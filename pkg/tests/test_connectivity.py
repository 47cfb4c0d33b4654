import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from eeggraph.connectivity import (ConnectivityMatrix, SparseGraph, connectivity_matrix, knn_edges, knn_sparsify,
                                   pli, plv, plv_from_cross)
from eeggraph.spectral import extract_band_features, multitaper_spectra

from conftest import make_recording

FS = 256.0


def band_features(data, band="alpha"):
    return extract_band_features(multitaper_spectra(make_recording(data, fs=FS)), band)


def tone_comb(n, phase_shift=0.0, seed=0):
    """Sum of tones on every 0.2 Hz bin of 7-14 Hz, all shifted by ``phase_shift``."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / FS
    freqs = np.arange(7.0, 14.0, 0.2)
    ph = rng.uniform(0, 2 * np.pi, freqs.size)
    return np.sum(np.cos(2 * np.pi * freqs[:, None] * t + ph[:, None] + phase_shift), axis=0)


def random_spectra(rng, shape=(20, 4, 3, 7)):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_identical_signals(rng):
    x = rng.standard_normal(2560)
    f = band_features(np.stack([x, x]))
    assert pli(f.band_spectra, 0, 1) == 0.0
    assert plv(f.band_spectra, 0, 1) == pytest.approx(1.0, abs=1e-12)


def test_quadrature_lag_gives_unit_pli():
    n = int(20 * FS)
    f = band_features(np.stack([tone_comb(n), tone_comb(n, -np.pi / 2)]))
    # taper sidelobes leak a little negative-frequency energy into the band
    assert pli(f.band_spectra, 0, 1) >= 0.99


@pytest.mark.parametrize("phi", [0.3, 1.0, 2.5, -2.0])
def test_constant_offset_gives_unit_plv(phi):
    n = int(20 * FS)
    f = band_features(np.stack([tone_comb(n), tone_comb(n, phi)]))
    assert plv(f.band_spectra, 0, 1) == pytest.approx(1.0, abs=5e-3)


@pytest.mark.parametrize("phi", [0.3, 1.0, 2.5, -2.0])
def test_exact_phase_rotation(rng, phi):
    c = random_spectra(rng, (30, 4, 1, 9))
    both = np.concatenate([c, c * np.exp(1j * phi)], axis=2)
    assert plv(both, 0, 1) == pytest.approx(1.0, abs=1e-12)
    assert pli(both, 0, 1) == pytest.approx(1.0)


@given(st.integers(0, 10_000))
def test_bounds_symmetry_and_sign_flip(seed):
    c = random_spectra(np.random.default_rng(seed))
    for i, j in [(0, 1), (1, 2), (0, 2)]:
        for fn in (pli, plv):
            v = fn(c, i, j)
            assert 0.0 <= v <= 1.0
            assert v == pytest.approx(fn(c, j, i), abs=1e-12)
        flipped = c.copy()
        flipped[..., j, :] *= -1
        assert pli(flipped, i, j) == pytest.approx(pli(c, i, j), abs=1e-12)


def test_null_distribution_of_independent_noise():
    win_s, step_s = 5.0, 0.5
    n = int((win_s + 99 * step_s) * FS)  # exactly 100 windows
    plis, plvs = [], []
    for seed in range(100):
        f = band_features(np.random.default_rng(seed).standard_normal((2, n)))
        assert f.band_spectra.shape[0] == 100
        plis.append(pli(f.band_spectra, 0, 1))
        plvs.append(plv(f.band_spectra, 0, 1))
    assert np.quantile(plis, 0.99) < 0.3
    assert np.quantile(plvs, 0.99) < 0.35


def test_zero_magnitude_plv_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert plv_from_cross(np.zeros((5, 3), dtype=complex)) == 0.0
    assert "zero magnitude" in caplog.text


def test_matrix_matches_scalar_calls(rng):
    f = band_features(rng.standard_normal((5, 2560)))
    for kind, fn in (("PLI", pli), ("PLV", plv)):
        m = connectivity_matrix(f, kind)
        assert m.values.shape == (5, 5)
        np.testing.assert_array_equal(m.values, m.values.T)
        for i in range(5):
            for j in range(5):
                if i != j:
                    assert m.values[i, j] == pytest.approx(fn(f.band_spectra, i, j), abs=1e-12)


def test_duplicate_channel_plv_one(rng):
    x = rng.standard_normal((3, 2560))
    x[2] = x[0]
    m = connectivity_matrix(band_features(x), "PLV")
    assert m.values[0, 2] == pytest.approx(1.0)
    assert np.all(np.diag(m.values) == 1.0)


def test_matrix_errors(rng):
    f = band_features(rng.standard_normal((1, 2560)))
    with pytest.raises(ValueError, match="at least 2"):
        connectivity_matrix(f, "PLV")
    f = band_features(rng.standard_normal((2, 2560)))
    with pytest.raises(ValueError):
        connectivity_matrix(f, "coherence")


def brute_knn(c, k):
    n = c.shape[0]
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        ranked = sorted((j for j in range(n) if j != i), key=lambda j: (1 - c[i, j], j))
        for j in ranked[:k]:
            mask[i, j] = True
    return mask | mask.T


def random_conn(rng, n=17, ties=False):
    c = rng.uniform(size=(n, n))
    if ties:
        c = np.round(c * 4) / 4
    c = (c + c.T) / 2
    np.fill_diagonal(c, 1.0)
    return c


@given(st.integers(0, 10_000), st.integers(1, 16), st.booleans())
def test_knn_matches_brute_force(seed, k, ties):
    c = random_conn(np.random.default_rng(seed), ties=ties)
    assert np.array_equal(knn_edges(c, k), brute_knn(c, k))


@given(st.integers(0, 10_000), st.integers(1, 15))
def test_knn_monotone_in_k(seed, k):
    c = random_conn(np.random.default_rng(seed), ties=True)
    assert np.all(knn_edges(c, k) <= knn_edges(c, k + 1))


def test_knn_complete_and_argmax(rng):
    c = random_conn(rng)
    feats = np.zeros((17, 3))
    g = knn_sparsify(ConnectivityMatrix("PLV", c), 16, feats)
    assert len(g.edges) == 17 * 16 // 2
    g1 = knn_sparsify(ConnectivityMatrix("PLV", c), 1, feats)
    off = c - 2 * np.eye(17)
    for i in range(17):
        assert g1.adjacency[i, np.argmax(off[i])] > 0
    assert np.all((g1.adjacency > 0).sum(axis=1) >= 1)
    assert np.all(np.diag(g1.adjacency) == 0)
    with pytest.raises(ValueError):
        knn_sparsify(ConnectivityMatrix("PLV", c), 17, feats)
    with pytest.raises(ValueError):
        knn_sparsify(ConnectivityMatrix("PLV", c), 0, feats)


def test_graph_metadata_and_roundtrip(tmp_path, rng):
    f = band_features(rng.standard_normal((6, 2560)))
    g = knn_sparsify(connectivity_matrix(f, "PLI"), 3, f)
    assert g.label == 0 and g.kind == "PLI" and g.band == "alpha" and g.subject_id == "S01"
    g.save(tmp_path / "g.json")
    back = SparseGraph.load(tmp_path / "g.json")
    np.testing.assert_array_equal(back.adjacency, g.adjacency)
    np.testing.assert_array_equal(back.node_features, g.node_features)
    f.save(tmp_path / "f.json")
    g.save(tmp_path / "g2.json", feature_ref="f.json")
    back = SparseGraph.load(tmp_path / "g2.json")
    np.testing.assert_array_equal(back.node_features, g.node_features)
    assert back.channels == g.channels
