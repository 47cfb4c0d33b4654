"""Flexible GGCN classifier: [GGCN block -> BN -> ReLU -> dropout] x n_blocks,
ASAP pooling, global max pooling, then Linear -> ReLU -> dropout -> Linear."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ..numerics import seeded_rng
from ..tensorio import load_tensors, save_tensors
from . import layers as L


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation in layer {layer!r}")
        self.layer = layer


class StaleTraceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GgcnConfig:
    in_features: int
    block_channels: tuple[int, ...] = (32,)
    block_steps: tuple[int, ...] = (2,)
    dropout: float = 0.1
    asap_ratio: float = 0.5
    hidden: int = 32
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "block_steps", tuple(int(s) for s in self.block_steps))
        if not 1 <= self.n_blocks <= 3:
            raise ValueError(f"n_blocks must be 1..3, got {self.n_blocks}")
        if len(self.block_steps) != self.n_blocks:
            raise ValueError("block_steps must have one entry per block")
        if any(not 1 <= c <= 256 for c in self.block_channels):
            raise ValueError("block out_channels must be in 1..256")
        if any(not 1 <= s <= 17 for s in self.block_steps):
            raise ValueError("propagation steps must be in 1..17")
        width = self.in_features
        for b, c in enumerate(self.block_channels):
            if width > c:
                raise ValueError(f"block {b} input width {width} exceeds its out_channels {c}")
            width = c
        if not 0.1 <= self.dropout <= 0.5:
            raise ValueError(f"dropout must be in [0.1, 0.5], got {self.dropout}")
        if not 0.1 <= self.asap_ratio <= 1.0:
            raise ValueError(f"asap_ratio must be in [0.1, 1.0], got {self.asap_ratio}")
        if self.n_classes != 2:
            raise ValueError("only binary heads are supported")
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")

    @property
    def n_blocks(self) -> int:
        return len(self.block_channels)

    @property
    def out_width(self) -> int:
        return self.block_channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GgcnConfig":
        return cls(**d)


@dataclass(eq=False)
class BatchedGraph:
    """Disjoint union of graphs with cached edge lists for the cluster graph A + I."""

    x: np.ndarray
    adj: sp.csr_matrix
    graph_index: np.ndarray
    labels: np.ndarray
    n_graphs: int
    # cluster graph edges (src j -> dst i), sorted by dst
    src: np.ndarray = field(repr=False, default=None)
    dst: np.ndarray = field(repr=False, default=None)
    weight: np.ndarray = field(repr=False, default=None)
    offsets: np.ndarray = field(repr=False, default=None)
    cluster_adj: sp.csr_matrix = field(repr=False, default=None)

    @classmethod
    def from_graphs(cls, graphs: Sequence) -> "BatchedGraph":
        if not graphs:
            raise ValueError("empty batch")
        for g in graphs:
            if g.n_nodes == 0:
                raise ValueError("graph with 0 nodes")
        widths = {g.node_features.shape[1] for g in graphs}
        if len(widths) != 1:
            raise ValueError(f"inconsistent feature widths {sorted(widths)}")
        adj = sp.block_diag([sp.csr_matrix(g.adjacency) for g in graphs], format="csr")
        x = np.concatenate([g.node_features for g in graphs], axis=0).astype(float)
        gi = np.concatenate([np.full(g.n_nodes, b) for b, g in enumerate(graphs)])
        labels = np.array([g.label for g in graphs], dtype=int)
        return cls.build(x, adj, gi, labels)

    @classmethod
    def build(cls, x, adj, graph_index, labels) -> "BatchedGraph":
        adj = sp.csr_matrix(adj, dtype=float)
        n = adj.shape[0]
        if x.shape[0] != n or graph_index.shape[0] != n:
            raise ValueError("feature / adjacency / graph-index shape mismatch")
        if (adj.data < 0).any():
            raise ValueError("adjacency must be nonnegative")
        adj = (adj - sp.diags(adj.diagonal())).tocsr()
        adj.eliminate_zeros()
        cluster = (adj + sp.identity(n, format="csr")).tocsr()
        cluster.sort_indices()
        dst = np.repeat(np.arange(n), np.diff(cluster.indptr))
        obj = cls(np.asarray(x, dtype=float), adj, np.asarray(graph_index, dtype=int),
                  np.asarray(labels, dtype=int), int(len(labels)))
        obj.src = cluster.indices.astype(int)
        obj.dst = dst
        obj.weight = cluster.data.astype(float)
        obj.offsets = cluster.indptr[:-1].astype(int)
        obj.cluster_adj = cluster
        return obj

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


class ParamStore:
    """Named trainable tensors with same-shaped gradient slots, plus BN buffers."""

    def __init__(self, params: dict, buffers: dict | None = None):
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        self.buffers = {k: np.asarray(v, dtype=float) for k, v in (buffers or {}).items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.version = 0

    def __getitem__(self, name):
        return self.params[name]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def bump(self):
        self.version += 1

    def copy(self) -> "ParamStore":
        out = ParamStore({k: v.copy() for k, v in self.params.items()},
                         {k: v.copy() for k, v in self.buffers.items()})
        out.version = self.version
        return out

    def save(self, path, meta: dict | None = None):
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        tensors, meta = load_tensors(path)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer/")}
        return cls(params, buffers), meta


def init_params(config: GgcnConfig, seed: int = 0) -> ParamStore:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, BN scale 1 / shift 0."""
    rng = seeded_rng(seed)

    def uni(fan_in, *shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    p, buf = {}, {}
    for b, (c, steps) in enumerate(zip(config.block_channels, config.block_steps)):
        p[f"block{b}.theta"] = uni(c, steps, c, c)
        p[f"block{b}.w_ih"] = uni(c, c, 3 * c)
        p[f"block{b}.w_hh"] = uni(c, c, 3 * c)
        p[f"block{b}.b_ih"] = np.zeros(3 * c)
        p[f"block{b}.b_hh"] = np.zeros(3 * c)
        p[f"bn{b}.gamma"] = np.ones(c)
        p[f"bn{b}.beta"] = np.zeros(c)
        buf[f"bn{b}.running_mean"] = np.zeros(c)
        buf[f"bn{b}.running_var"] = np.ones(c)
    c = config.out_width
    p["asap.w_query"] = uni(c, c, c)
    p["asap.omega"] = uni(2 * c, 2 * c)
    p["asap.att_bias"] = np.zeros(1)
    p["asap.theta1"] = uni(c, c)
    p["asap.bias1"] = np.zeros(1)
    p["asap.theta2"] = uni(c, c)
    p["asap.theta3"] = uni(c, c)
    p["head.w1"] = uni(c, c, config.hidden)
    p["head.b1"] = np.zeros(config.hidden)
    p["head.w2"] = uni(config.hidden, config.hidden, config.n_classes)
    p["head.b2"] = np.zeros(config.n_classes)
    return ParamStore(p, buf)


@dataclass(eq=False)
class ForwardTrace:
    mode: str
    version: int
    logits: np.ndarray
    masks: dict
    bn_stats: list
    perm: np.ndarray  # retained cluster (medoid) node indices, grouped by graph
    alpha: np.ndarray  # per-edge attention of the cluster graph
    fitness: np.ndarray
    pooled_adj: sp.csr_matrix  # A^p over retained clusters
    assignment: sp.csr_matrix  # S restricted to retained columns, [n_nodes x n_kept]
    batch: BatchedGraph = field(repr=False)
    caches: dict = field(repr=False, default_factory=dict)


def _check(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteActivation(name)
    return arr


def classify_forward(batch: BatchedGraph, config: GgcnConfig, store: ParamStore, mode: str = "eval",
                     rng=None, masks: dict | None = None) -> ForwardTrace:
    """Run the classifier on a batch.

    In train mode, dropout masks come from ``masks`` when given (replay) or are
    drawn from ``rng``. BN running statistics are not touched; apply
    :func:`update_running_stats` with the returned trace.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.x.shape[1] != config.in_features:
        raise ValueError(f"batch has {batch.x.shape[1]} features, config expects {config.in_features}")
    p = store.params
    train = mode == "train"
    masks = dict(masks or {})
    if train and rng is None and len(masks) < config.n_blocks + 1:
        rng = seeded_rng(0)
    caches, bn_stats = {}, []
    h = batch.x
    for b in range(config.n_blocks):
        h, caches[f"block{b}"] = L.ggcn_block_forward(
            h, batch.adj, p[f"block{b}.theta"], p[f"block{b}.w_ih"], p[f"block{b}.w_hh"],
            p[f"block{b}.b_ih"], p[f"block{b}.b_hh"])
        _check(f"block{b}", h)
        h, caches[f"bn{b}"] = L.batch_norm_forward(
            h, p[f"bn{b}.gamma"], p[f"bn{b}.beta"], mode,
            store.buffers.get(f"bn{b}.running_mean"), store.buffers.get(f"bn{b}.running_var"))
        _check(f"bn{b}", h)
        if train:
            bn_stats.append((caches[f"bn{b}"][4], caches[f"bn{b}"][5], h.shape[0]))
        h, caches[f"relu{b}"] = L.relu_forward(h)
        if train:
            key = f"dropout{b}"
            if key not in masks:
                masks[key] = L.dropout_mask(rng, h.shape, config.dropout)
            h = h * masks[key]

    alpha, xc, caches["asap.att"] = L.asap_attention_forward(
        h, batch.src, batch.dst, batch.offsets, p["asap.w_query"], p["asap.omega"],
        p["asap.att_bias"])
    _check("asap.attention", xc)
    fitness, caches["asap.le"] = L.leconv_forward(
        xc, batch.src, batch.dst, batch.weight, p["asap.theta1"], p["asap.bias1"],
        p["asap.theta2"], p["asap.theta3"])
    _check("asap.fitness", fitness)
    perm = L.topk_per_graph(fitness, batch.graph_index, batch.n_graphs, config.asap_ratio)
    pooled = fitness[perm, None] * xc[perm]
    caches["asap.select"] = (xc, fitness, perm)

    n = batch.n_nodes
    s_full = sp.csr_matrix((alpha, (batch.src, batch.dst)), shape=(n, n))
    s_hat = s_full[:, perm].tocsr()
    pooled_adj = (s_hat.T @ batch.cluster_adj @ s_hat).tocsr()

    r, caches["gmp"] = L.global_max_pool_forward(pooled, batch.graph_index[perm], batch.n_graphs)
    z1, caches["head.lin1"] = L.linear_forward(r, p["head.w1"], p["head.b1"])
    a1, caches["head.relu"] = L.relu_forward(z1)
    if train:
        if "head.dropout" not in masks:
            masks["head.dropout"] = L.dropout_mask(rng, a1.shape, config.dropout)
        a1 = a1 * masks["head.dropout"]
    logits, caches["head.lin2"] = L.linear_forward(a1, p["head.w2"], p["head.b2"])
    _check("head", logits)
    return ForwardTrace(mode, store.version, logits, masks, bn_stats, perm, alpha, fitness,
                        pooled_adj, s_hat, batch, caches)


def update_running_stats(store: ParamStore, trace: ForwardTrace, momentum: float = 0.1):
    for b, (mu, var, n) in enumerate(trace.bn_stats):
        unbiased = var * n / max(n - 1, 1)
        rm, rv = store.buffers[f"bn{b}.running_mean"], store.buffers[f"bn{b}.running_var"]
        rm *= 1 - momentum
        rm += momentum * mu
        rv *= 1 - momentum
        rv += momentum * unbiased


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=int)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -float(logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def backward(trace: ForwardTrace, dlogits: np.ndarray, store: ParamStore, config: GgcnConfig,
             accumulate: bool = False) -> dict:
    """Backpropagate ``dlogits`` through the trace into ``store.grads``.

    TopK selections, dropout masks and max-pool argmaxes are constants of the
    trace. Returns the gradient dict.
    """
    if trace.version != store.version:
        raise StaleTraceError(f"trace from parameter version {trace.version}, store is at {store.version}")
    if not accumulate:
        store.zero_grad()
    g = store.grads
    p = store.params
    c = trace.caches
    batch = trace.batch

    da1, gl = L.linear_backward(dlogits, c["head.lin2"], p["head.w2"])
    g["head.w2"] += gl["w"]
    g["head.b2"] += gl["b"]
    if trace.mode == "train":
        da1 = da1 * trace.masks["head.dropout"]
    dz1 = L.relu_backward(da1, c["head.relu"])
    dr, gl = L.linear_backward(dz1, c["head.lin1"], p["head.w1"])
    g["head.w1"] += gl["w"]
    g["head.b1"] += gl["b"]

    dpooled = L.global_max_pool_backward(dr, c["gmp"])
    xc, fitness, perm = c["asap.select"]
    dxc = np.zeros_like(xc)
    dfit = np.zeros_like(fitness)
    dxc[perm] += fitness[perm, None] * dpooled
    dfit[perm] += np.sum(dpooled * xc[perm], axis=1)
    dxc_le, gl = L.leconv_backward(dfit, c["asap.le"])
    for k in ("theta1", "bias1", "theta2", "theta3"):
        g[f"asap.{k}"] += gl[k]
    dxc += dxc_le
    dh, gl = L.asap_attention_backward(np.zeros_like(trace.alpha), dxc, c["asap.att"])
    g["asap.w_query"] += gl["w_query"]
    g["asap.omega"] += gl["omega"]
    g["asap.att_bias"] += gl["att_bias"]

    for b in range(config.n_blocks - 1, -1, -1):
        if trace.mode == "train":
            dh = dh * trace.masks[f"dropout{b}"]
        dh = L.relu_backward(dh, c[f"relu{b}"])
        dh, gl = L.batch_norm_backward(dh, c[f"bn{b}"])
        g[f"bn{b}.gamma"] += gl["gamma"]
        g[f"bn{b}.beta"] += gl["beta"]
        dh, gl = L.ggcn_block_backward(dh, c[f"block{b}"])
        for k in ("theta", "w_ih", "w_hh", "b_ih", "b_hh"):
            g[f"block{b}.{k}"] += gl[k]
    return g


def predict_proba(graphs, config: GgcnConfig, store: ParamStore, batch_size: int = 64) -> np.ndarray:
    """Eval-mode probability of class 1 (AD) per graph."""
    out = []
    for i in range(0, len(graphs), batch_size):
        trace = classify_forward(BatchedGraph.from_graphs(graphs[i:i + batch_size]), config, store, "eval")
        out.append(softmax(trace.logits)[:, 1])
    return np.concatenate(out) if out else np.zeros(0)
