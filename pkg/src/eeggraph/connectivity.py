"""Phase-based connectivity (PLI, PLV) and k-nearest-neighbour graph sparsification.

Both measures average over every (window, taper) observation at each
frequency bin of the band, then average the per-bin values across the band.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectral import BandFeatureSet

log = logging.getLogger(__name__)

KINDS = ("PLI", "PLV")


def _observations(band_spectra: np.ndarray, i: int, j: int) -> np.ndarray:
    """Cross-spectral observations ``X_i conj(X_j)`` as [n_obs x F]."""
    c = np.asarray(band_spectra)
    sxy = c[..., i, :] * np.conj(c[..., j, :])
    return sxy.reshape(-1, sxy.shape[-1])


# |Im S| below this fraction of |S| is rounding noise (e.g. S_xx computed by a
# fused complex multiply) and counts as zero lag
IMAG_TOL = 1e-10


def _lag_sign(sxy: np.ndarray) -> np.ndarray:
    im = sxy.imag
    return np.where(np.abs(im) <= IMAG_TOL * np.abs(sxy), 0.0, np.sign(im))


def pli_from_cross(sxy: np.ndarray) -> float:
    sxy = np.atleast_2d(sxy)
    per_bin = np.abs(np.mean(_lag_sign(sxy), axis=0))
    return float(np.mean(per_bin))


def plv_from_cross(sxy: np.ndarray) -> float:
    sxy = np.atleast_2d(sxy)
    mag = np.abs(sxy)
    valid = mag > 0
    counts = valid.sum(axis=0)
    if not counts.any():
        log.warning("PLV undefined: all cross-spectral observations have zero magnitude")
        return 0.0
    phasors = np.where(valid, sxy / np.where(valid, mag, 1.0), 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_bin = np.abs(phasors.sum(axis=0)) / counts
    return float(np.mean(per_bin[counts > 0]))


def pli(band_spectra, i: int, j: int) -> float:
    """Phase lag index |E[sign(Im S_xy)]| between channels i and j."""
    return pli_from_cross(_observations(band_spectra, i, j))


def plv(band_spectra, i: int, j: int) -> float:
    """Phase locking value |E[S_xy / |S_xy|]| between channels i and j."""
    return plv_from_cross(_observations(band_spectra, i, j))


@dataclass(frozen=True, eq=False)
class ConnectivityMatrix:
    kind: str
    values: np.ndarray = field(repr=False)

    def to_dict(self, channels=None) -> dict:
        return {"kind": self.kind, "channels": list(channels) if channels else None,
                "values": self.values.tolist()}


def connectivity_matrix(features: BandFeatureSet, kind: str) -> ConnectivityMatrix:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    c = features.band_spectra
    n = c.shape[-2]
    if n < 2:
        raise ValueError("connectivity needs at least 2 channels")
    flat = c.reshape(-1, n, c.shape[-1])  # [n_obs, N, F]
    if kind == "PLI":
        vals = np.empty((n, n))
        for i in range(n):
            sxy = flat[:, i:i + 1, :] * np.conj(flat)  # [n_obs, N, F]
            vals[i] = np.abs(_lag_sign(sxy).mean(axis=0)).mean(axis=-1)
        np.fill_diagonal(vals, 0.0)
    else:
        # S_xy / |S_xy| = u_x conj(u_y) with u = X / |X|; zero-magnitude observations drop out.
        mag = np.abs(flat)
        nz = mag > 0
        u = np.where(nz, flat / np.where(nz, mag, 1.0), 0)
        num = np.abs(np.einsum("oif,ojf->ijf", u, np.conj(u)))
        counts = np.einsum("oif,ojf->ijf", nz.astype(float), nz.astype(float))
        has = counts > 0
        per_bin = np.where(has, num / np.maximum(counts, 1), 0.0)
        n_bins = has.sum(axis=-1)
        if (n_bins == 0).any():
            log.warning("PLV undefined for some pairs: all observations have zero magnitude")
        vals = np.where(n_bins > 0, per_bin.sum(axis=-1) / np.maximum(n_bins, 1), 0.0)
        np.fill_diagonal(vals, 1.0)
    vals = np.clip(0.5 * (vals + vals.T), 0.0, 1.0)
    return ConnectivityMatrix(kind, vals)


@dataclass(frozen=True, eq=False)
class SparseGraph:
    adjacency: np.ndarray = field(repr=False)  # [N x N] symmetric, zero diagonal
    node_features: np.ndarray = field(repr=False)  # [N x F]
    label: int
    subject_id: str = ""
    segment_id: int = 1
    band: str = ""
    kind: str = ""
    channels: tuple = ()

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        iu, ju = np.nonzero(np.triu(self.adjacency, 1))
        return [(int(i), int(j), float(self.adjacency[i, j])) for i, j in zip(iu, ju)]

    def to_dict(self, feature_ref: str | None = None) -> dict:
        d = {
            "subject_id": self.subject_id, "segment_id": self.segment_id, "band": self.band,
            "kind": self.kind, "label": self.label, "n_nodes": self.n_nodes,
            "nodes": list(self.channels) or list(range(self.n_nodes)),
            "edges": [[i, j, w] for i, j, w in self.edges],
        }
        if feature_ref is None:
            d["node_features"] = self.node_features.tolist()
        else:
            d["feature_ref"] = feature_ref
        return d

    @classmethod
    def from_dict(cls, d: dict, node_features=None) -> "SparseGraph":
        n = int(d["n_nodes"])
        a = np.zeros((n, n))
        for i, j, w in d["edges"]:
            a[i, j] = a[j, i] = w
        if node_features is None:
            node_features = np.asarray(d["node_features"], dtype=float)
        channels = tuple(d["nodes"]) if d.get("nodes") and isinstance(d["nodes"][0], str) else ()
        return cls(a, np.asarray(node_features, dtype=float), int(d["label"]), d.get("subject_id", ""),
                   int(d.get("segment_id", 1)), d.get("band", ""), d.get("kind", ""), channels)

    def save(self, path, feature_ref: str | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(feature_ref)))

    @classmethod
    def load(cls, path) -> "SparseGraph":
        path = Path(path)
        d = json.loads(path.read_text())
        feats = None
        if "feature_ref" in d:
            feats = BandFeatureSet.load(path.parent / d["feature_ref"]).features
        return cls.from_dict(d, feats)


def knn_edges(values: np.ndarray, k_neighbors: int) -> np.ndarray:
    """Boolean [N x N] mask of the union-symmetrised kNN graph on distance 1 - C.

    Ties in distance go to the lower channel index.
    """
    c = np.asarray(values, dtype=float)
    n = c.shape[0]
    if not 1 <= k_neighbors <= n - 1:
        raise ValueError(f"k_neighbors must be in [1, {n - 1}], got {k_neighbors}")
    dist = 1.0 - c
    mask = np.zeros((n, n), dtype=bool)
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        order = np.lexsort((others, dist[i, others]))
        mask[i, others[order[:k_neighbors]]] = True
    return mask | mask.T


def knn_sparsify(conn: ConnectivityMatrix, k_neighbors: int, features, label: int = 0, **meta) -> SparseGraph:
    """Keep each node's k strongest connections; edge weight is the connectivity value."""
    if isinstance(features, BandFeatureSet):
        meta.setdefault("subject_id", features.subject_id)
        meta.setdefault("segment_id", features.segment_id)
        meta.setdefault("band", features.band.name)
        meta.setdefault("channels", features.channels)
        label = 1 if features.group_label == "AD" else 0
        features = features.features
    mask = knn_edges(conn.values, k_neighbors)
    adj = np.where(mask, conn.values, 0.0)
    np.fill_diagonal(adj, 0.0)
    return SparseGraph(adj, np.asarray(features, dtype=float), int(label), kind=conn.kind, **meta)
