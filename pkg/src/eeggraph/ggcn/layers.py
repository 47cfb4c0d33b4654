"""Layer kernels with explicit forward caches and backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient(s)
plus a dict of parameter gradients. Node tensors are row-major [n_nodes x C].

Segment reductions assume edges sorted by destination node and every node
owning at least one edge (guaranteed by the self-loops of the cluster graph).
"""
from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5


def sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- segment helpers ------------------------------------------------------

def segment_sum(values, seg, n_segments):
    """Sum rows of ``values`` into ``n_segments`` buckets given by ``seg``."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.bincount(seg, weights=values, minlength=n_segments)
    out = np.zeros((n_segments,) + values.shape[1:])
    np.add.at(out, seg, values)
    return out


def segment_max(values, offsets):
    return np.maximum.reduceat(values, offsets, axis=0)


def _ties_share(values, maxima_per_row, seg, n_segments):
    # Subgradient of a max: split the upstream gradient evenly over tied maxima.
    hit = (values == maxima_per_row).astype(float)
    counts = segment_sum(hit, seg, n_segments)
    return hit / counts[seg]


# --- GRU-gated graph convolution -------------------------------------------

def gru_cell_forward(m, h, w_ih, w_hh, b_ih, b_hh):
    """GRU update ``h' = (1 - z) * h + z * n`` with input ``m`` and state ``h``.

    Gate blocks in ``w_ih``/``w_hh`` are ordered (reset, update, candidate).
    """
    c = h.shape[1]
    gi = m @ w_ih + b_ih
    gh = h @ w_hh + b_hh
    r = sigmoid(gi[:, :c] + gh[:, :c])
    z = sigmoid(gi[:, c:2 * c] + gh[:, c:2 * c])
    gh_n = gh[:, 2 * c:]
    n = np.tanh(gi[:, 2 * c:] + r * gh_n)
    out = (1.0 - z) * h + z * n
    return out, (m, h, r, z, n, gh_n, w_ih, w_hh)


def gru_cell_backward(dout, cache):
    m, h, r, z, n, gh_n, w_ih, w_hh = cache
    dz = dout * (n - h)
    dn = dout * z
    dh = dout * (1.0 - z)
    dn_pre = dn * (1.0 - n * n)
    dr = dn_pre * gh_n
    dr_pre = dr * r * (1.0 - r)
    dz_pre = dz * z * (1.0 - z)
    dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
    dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
    grads = {"w_ih": m.T @ dgi, "w_hh": h.T @ dgh, "b_ih": dgi.sum(0), "b_hh": dgh.sum(0)}
    dm = dgi @ w_ih.T
    dh = dh + dgh @ w_hh.T
    return dm, dh, grads


def ggcn_block_forward(x, adj, theta, w_ih, w_hh, b_ih, b_hh):
    """Gated graph convolution over ``theta.shape[0]`` propagation steps.

    Step l computes ``m_i = sum_j A[j, i] * (h_j @ theta[l])`` and folds it
    into the state with a GRU shared across steps. Input columns are
    zero-padded up to the block width. ``adj`` may be dense or scipy-sparse.
    """
    n_steps, c, _ = theta.shape
    if x.shape[1] > c:
        raise ValueError(f"input width {x.shape[1]} exceeds block width {c}")
    h = np.zeros((x.shape[0], c))
    h[:, :x.shape[1]] = x
    adj_t = adj.T
    steps = []
    for step in range(n_steps):
        p = h @ theta[step]
        msg = np.asarray(adj_t @ p)
        h_new, gcache = gru_cell_forward(msg, h, w_ih, w_hh, b_ih, b_hh)
        steps.append((h, gcache))
        h = h_new
    return h, (steps, adj, theta, x.shape[1])


def ggcn_block_backward(dout, cache):
    steps, adj, theta, in_width = cache
    grads = {"theta": np.zeros_like(theta), "w_ih": 0.0, "w_hh": 0.0, "b_ih": 0.0, "b_hh": 0.0}
    dh = dout
    for step in range(len(steps) - 1, -1, -1):
        h, gcache = steps[step]
        dmsg, dh_prev, g = gru_cell_backward(dh, gcache)
        for k in ("w_ih", "w_hh", "b_ih", "b_hh"):
            grads[k] = grads[k] + g[k]
        dp = np.asarray(adj @ dmsg)
        grads["theta"][step] = h.T @ dp
        dh = dh_prev + dp @ theta[step].T
    return dh[:, :in_width], grads


# --- normalisation, activation, dropout -------------------------------------

def batch_norm_forward(x, gamma, beta, mode, running_mean=None, running_var=None):
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs at least 2 nodes")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, mode, mu, var)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, mode, _, _ = cache
    grads = {"gamma": (dout * xhat).sum(0), "beta": dout.sum(0)}
    dxhat = dout * gamma
    if mode == "train":
        n = dout.shape[0]
        dx = inv_std / n * (n * dxhat - dxhat.sum(0) - xhat * (dxhat * xhat).sum(0))
    else:
        dx = dxhat * inv_std
    return dx, grads


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def dropout_mask(rng, shape, p):
    """Inverted-dropout multiplier: 0 with probability p, else 1 / (1 - p)."""
    return (rng.random(shape) >= p) / (1.0 - p)


# --- ASAP pooling ---------------------------------------------------------

def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def asap_attention_forward(x, src, dst, offsets, w_query, omega, att_bias):
    """Master2Token attention over each node's 1-hop cluster (self included).

    Score of member j in cluster i is ``leaky_relu(omega . [m_i @ W || x_j] + b)``
    with ``m_i`` the channel-wise max over the cluster; the nonlinearity sits
    after the projection, otherwise the query term cancels in the softmax.

    Returns per-edge membership ``alpha`` (softmax over each destination's
    cluster) and the cluster representations ``x_c = sum_j alpha_ij x_j``.
    """
    n, c = x.shape
    xj = x[src]
    master = segment_max(xj, offsets)  # [n x C]
    q = master @ w_query
    u = np.concatenate([q[dst], xj], axis=1)
    pre = u @ omega + att_bias[0]
    score = leaky_relu(pre)
    smax = segment_max(score, offsets)
    ex = np.exp(score - smax[dst])
    denom = segment_sum(ex, dst, n)
    alpha = ex / denom[dst]
    xc = segment_sum(alpha[:, None] * xj, dst, n)
    cache = (x, src, dst, xj, master, u, pre, alpha, w_query, omega)
    return alpha, xc, cache


def asap_attention_backward(dalpha, dxc, cache):
    x, src, dst, xj, master, u, pre, alpha, w_query, omega = cache
    n, c = x.shape
    dalpha = dalpha + np.sum(dxc[dst] * xj, axis=1)
    dxj = alpha[:, None] * dxc[dst]
    dscore = alpha * (dalpha - segment_sum(alpha * dalpha, dst, n)[dst])
    dpre = dscore * np.where(pre > 0, 1.0, LEAKY_SLOPE)
    grads = {"omega": u.T @ dpre, "att_bias": np.array([dpre.sum()])}
    du = np.outer(dpre, omega)
    dq = segment_sum(du[:, :c], dst, n)
    dxj = dxj + du[:, c:]
    grads["w_query"] = master.T @ dq
    dmaster = dq @ w_query.T
    share = _ties_share(xj, master[dst], dst, n)
    dxj = dxj + share * dmaster[dst]
    dx = segment_sum(dxj, src, n)
    return dx, grads


def leconv_forward(xc, src, dst, w, theta1, bias1, theta2, theta3):
    """Local-extrema fitness ``sigmoid(x_i t1 + b + sum_j A_ij (x_i t2 - x_j t3))``."""
    n = xc.shape[0]
    a = xc @ theta1 + bias1[0]
    b2 = xc @ theta2
    b3 = xc @ theta3
    deg = segment_sum(w, dst, n)
    pre = a + deg * b2 - segment_sum(w * b3[src], dst, n)
    phi = sigmoid(pre)
    return phi, (xc, src, dst, w, deg, phi, theta1, theta2, theta3)


def leconv_backward(dphi, cache):
    xc, src, dst, w, deg, phi, theta1, theta2, theta3 = cache
    n = xc.shape[0]
    dpre = dphi * phi * (1.0 - phi)
    db2 = dpre * deg
    db3 = -segment_sum(w * dpre[dst], src, n)
    grads = {"theta1": xc.T @ dpre, "bias1": np.array([dpre.sum()]),
             "theta2": xc.T @ db2, "theta3": xc.T @ db3}
    dxc = np.outer(dpre, theta1) + np.outer(db2, theta2) + np.outer(db3, theta3)
    return dxc, grads


def topk_per_graph(score, graph_index, n_graphs, ratio):
    """Indices of the ceil(ratio * n_g) best nodes of each graph.

    Result is grouped by graph in ascending graph order; within a graph, nodes
    are ordered by descending score with ties going to the lower node index.
    """
    order = np.lexsort((np.arange(score.size), -score, graph_index))
    counts = np.bincount(graph_index, minlength=n_graphs)
    keep = np.ceil(ratio * counts - 1e-9).astype(int)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(score.size) - np.repeat(starts, counts)
    return order[pos < np.repeat(keep, counts)]


def global_max_pool_forward(x, graph_index, n_graphs):
    """Channel-wise max per graph; rows of ``x`` must be grouped by graph."""
    counts = np.bincount(graph_index, minlength=n_graphs)
    if (counts == 0).any():
        raise ValueError(f"graph {int(np.flatnonzero(counts == 0)[0])} has no nodes to pool")
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    out = segment_max(x, offsets)
    return out, (x, graph_index, out, n_graphs)


def global_max_pool_backward(dout, cache):
    x, graph_index, out, n_graphs = cache
    share = _ties_share(x, out[graph_index], graph_index, n_graphs)
    return share * dout[graph_index]


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dout, x, w):
    return dout @ w.T, {"w": x.T @ dout, "b": dout.sum(0)}
