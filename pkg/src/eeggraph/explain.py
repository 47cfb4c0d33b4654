"""Channel-space view of the pooled graph, group averages and topology export.

The pooled adjacency A^p lives on retained clusters; it is lifted back to
scalp channels through the retained assignment matrix, M = S A^p S^T.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .eeg_io import GROUPS, Montage
from .ggcn import BatchedGraph, classify_forward


def project_pooled_adjacency(trace) -> list[np.ndarray]:
    """One [n_g x n_g] channel matrix per graph of the traced batch."""
    if trace.assignment is None or trace.pooled_adj is None:
        raise ValueError("trace is missing the pooling cache")
    s = trace.assignment.toarray()
    m = s @ trace.pooled_adj.toarray() @ s.T
    m = 0.5 * (m + m.T)
    gi = trace.batch.graph_index
    out = []
    for b in range(trace.batch.n_graphs):
        idx = np.flatnonzero(gi == b)
        out.append(np.maximum(m[np.ix_(idx, idx)], 0.0))
    return out


def embedded_adjacency(graphs, config, store, batch_size: int = 64):
    """Eval-mode channel-space matrices and AD probabilities for each graph."""
    mats, probs = [], []
    for i in range(0, len(graphs), batch_size):
        trace = classify_forward(BatchedGraph.from_graphs(graphs[i:i + batch_size]), config, store, "eval")
        mats += project_pooled_adjacency(trace)
        z = trace.logits - trace.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs.append(e[:, 1] / e.sum(axis=1))
    return mats, np.concatenate(probs)


@dataclass(eq=False)
class GroupAdjacency:
    group: str
    channel_matrix: np.ndarray = field(repr=False)
    n_samples: int
    band: str = ""
    segment: str = ""
    kind: str = ""

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}")
        if self.n_samples < 1:
            raise ValueError("averaging count must be positive")


def group_average(matrices, labels, group: str, predictions=None, correct_only: bool = False,
                  **meta) -> GroupAdjacency:
    """Elementwise mean over samples whose true label is ``group``; with
    ``correct_only`` only correctly predicted samples count."""
    target = GROUPS.index(group)
    labels = np.asarray(labels, dtype=int)
    keep = labels == target
    if correct_only:
        if predictions is None:
            raise ValueError("correct_only needs predictions")
        keep &= np.asarray(predictions, dtype=int) == labels
    chosen = [np.asarray(m, dtype=float) for m, k in zip(matrices, keep) if k]
    if not chosen:
        raise ValueError(f"no samples in group {group}")
    return GroupAdjacency(group, np.mean(chosen, axis=0), len(chosen), **meta)


def top_edges(diff: np.ndarray, channels, n_top: int = 10):
    """Strongest |diff| channel pairs (i < j); exact zeros are never listed.
    Ties go to the lexicographically smaller pair."""
    iu, ju = np.triu_indices(diff.shape[0], 1)
    vals = diff[iu, ju]
    order = np.lexsort((ju, iu, -np.abs(vals)))
    out = []
    for o in order[:n_top]:
        if vals[o] == 0:
            break
        out.append({"pair": [channels[iu[o]], channels[ju[o]]], "indices": [int(iu[o]), int(ju[o])],
                    "difference": float(vals[o])})
    return out


def topology_dict(g_hc: GroupAdjacency, g_ad: GroupAdjacency, montage: Montage, n_top: int = 10) -> dict:
    n = len(montage.channels)
    for g in (g_hc, g_ad):
        if g.channel_matrix.shape != (n, n):
            raise ValueError(f"{g.group} matrix is {g.channel_matrix.shape}, montage has {n} channels")
    diff = g_ad.channel_matrix - g_hc.channel_matrix
    return {
        "channels": list(montage.channels),
        "coords": {c: list(map(float, xy)) for c, xy in zip(montage.channels, montage.coords)},
        "meta": {"band": g_ad.band, "segment": g_ad.segment, "kind": g_ad.kind,
                 "n_hc": g_hc.n_samples, "n_ad": g_ad.n_samples},
        "HC": g_hc.channel_matrix.tolist(),
        "AD": g_ad.channel_matrix.tolist(),
        "difference": diff.tolist(),
        "top_edges": top_edges(diff, montage.channels, n_top),
    }


def export_topology(g_hc: GroupAdjacency, g_ad: GroupAdjacency, montage: Montage, path,
                    n_top: int = 10, csv: bool = False) -> dict:
    d = topology_dict(g_hc, g_ad, montage, n_top)
    path = Path(path)
    path.write_text(json.dumps(d, indent=1))
    if csv:
        header = ",".join(montage.channels)
        for key in ("HC", "AD", "difference"):
            np.savetxt(path.with_name(f"{path.stem}_{key}.csv"), np.asarray(d[key]), delimiter=",",
                       header=header, comments="", fmt="%.17g")
    return d


def load_topology(path) -> dict:
    d = json.loads(Path(path).read_text())
    for key in ("HC", "AD", "difference"):
        d[key] = np.asarray(d[key], dtype=float)
    return d
