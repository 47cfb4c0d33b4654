import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from eeggraph.connectivity import SparseGraph
from eeggraph.ggcn import (BatchedGraph, GgcnConfig, NonFiniteActivation, ParamStore, StaleTraceError, backward,
                           classify_forward, cross_entropy, init_params, update_running_stats)
from eeggraph.ggcn import layers as L

import gradcheck


def test_layer_gradients_match_finite_differences():
    res = gradcheck.layer_gradchecks()
    assert max(res.values()) < 1e-5, res


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_model_gradients_match_finite_differences(mode):
    errs, grads = gradcheck.model_gradcheck(mode)
    assert max(errs.values()) < 1e-5, errs
    # every parameter family actually receives gradient signal in train mode
    if mode == "train":
        assert all(np.abs(g).max() > 0 for g in grads.values())


def _gru_params(rng, c):
    return (rng.normal(size=(c, 3 * c)), rng.normal(size=(c, 3 * c)), rng.normal(size=3 * c), rng.normal(size=3 * c))


def test_isolated_node_gets_zero_message(rng):
    c = 3
    theta = rng.normal(size=(1, c, c))
    w_ih, w_hh, b_ih, b_hh = _gru_params(rng, c)
    adj = sp.csr_matrix(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=float))
    x = rng.normal(size=(3, c))
    out, _ = L.ggcn_block_forward(x, adj, theta, w_ih, w_hh, b_ih, b_hh)
    ref, _ = L.gru_cell_forward(np.zeros((1, c)), x[2:3], w_ih, w_hh, b_ih, b_hh)
    np.testing.assert_allclose(out[2], ref[0])


def test_gru_gate_limits(rng):
    c = 3
    w_ih, w_hh, b_ih, b_hh = _gru_params(rng, c)
    m, h = rng.normal(size=(4, c)), rng.normal(size=(4, c))
    b_open = b_ih.copy()
    b_open[c:2 * c] = 100.0  # update gate saturated at 1
    out, cache = L.gru_cell_forward(m, h, w_ih, w_hh, b_open, b_hh)
    candidate = cache[4]
    np.testing.assert_allclose(out, candidate, atol=1e-12)
    b_shut = b_ih.copy()
    b_shut[c:2 * c] = -100.0
    out, _ = L.gru_cell_forward(m, h, w_ih, w_hh, b_shut, b_hh)
    np.testing.assert_allclose(out, h, atol=1e-12)


def test_path_graph_message_equals_dense_product(rng):
    c = 2
    theta = rng.normal(size=(1, c, c))
    path = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    x = rng.normal(size=(3, c))
    _, cache = L.ggcn_block_forward(x, sp.csr_matrix(path), theta, *_gru_params(rng, c))
    msg = cache[0][0][1][0]
    np.testing.assert_allclose(msg[1], (x[0] + x[2]) @ theta[0])
    np.testing.assert_allclose(msg, path.T @ x @ theta[0])


def test_block_rejects_wide_input(rng):
    with pytest.raises(ValueError, match="exceeds"):
        L.ggcn_block_forward(rng.normal(size=(3, 4)), sp.csr_matrix((3, 3)), rng.normal(size=(1, 3, 3)),
                             *_gru_params(rng, 3))


def test_batch_norm_moments(rng):
    x = rng.normal(loc=3.0, scale=20.0, size=(64, 32))
    out, _ = L.batch_norm_forward(x, np.ones(32), np.zeros(32), "train")
    assert np.max(np.abs(out.mean(0))) < 1e-6
    # eps shifts the variance by eps / (var + eps)
    assert np.max(np.abs(out.var(0) - 1)) < 1e-5
    with pytest.raises(ValueError):
        L.batch_norm_forward(x[:1], np.ones(32), np.zeros(32), "train")


def test_relu_and_dropout(rng):
    x = np.array([-2.0, -0.1, 0.0, 0.5, 3.0])
    np.testing.assert_array_equal(L.relu_forward(x)[0], [0, 0, 0, 0.5, 3.0])
    mask = L.dropout_mask(rng, (100_000,), 0.3)
    assert set(np.unique(mask)) <= {0.0, 1 / 0.7}
    assert abs(mask.mean() - 1) < 0.02


def test_topk_counts_exact():
    for n in range(1, 18):
        for k in np.round(np.arange(1, 11) / 10, 1):
            perm = L.topk_per_graph(np.random.default_rng(n).random(n), np.zeros(n, int), 1, k)
            assert perm.size == math.ceil(round(k * n, 9))
    assert L.topk_per_graph(np.arange(17.0), np.zeros(17, int), 1, 0.5).size == 9


def test_topk_ordering_and_ties():
    score = np.array([0.5, 0.9, 0.5, 0.1, 0.7, 0.7])
    gi = np.array([0, 0, 0, 0, 1, 1])
    perm = L.topk_per_graph(score, gi, 2, 1.0)
    assert list(perm) == [1, 0, 2, 3, 4, 5]
    assert list(L.topk_per_graph(score, gi, 2, 0.5)) == [1, 0, 4]


def _small_graph(rng, n=4, f=3, label=0):
    a = np.triu(rng.uniform(0.2, 1.0, (n, n)), 1)
    a[0, 2] = 0.0
    return SparseGraph(a + a.T, rng.normal(size=(n, f)), label)


def _dense_assignment(trace):
    n = trace.batch.n_nodes
    s = np.zeros((n, n))
    s[trace.batch.src, trace.batch.dst] = trace.alpha
    return s[:, trace.perm]


def test_attention_and_pooled_adjacency_oracle(rng):
    g = _small_graph(rng)
    cfg = GgcnConfig(3, (4,), (2,), asap_ratio=0.5, hidden=4)
    store = init_params(cfg, 0)
    trace = classify_forward(BatchedGraph.from_graphs([g]), cfg, store, "eval")
    sums = np.bincount(trace.batch.dst, weights=trace.alpha)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    s_hat = _dense_assignment(trace)
    a_c = g.adjacency + np.eye(4)
    assert np.max(np.abs(trace.pooled_adj.toarray() - s_hat.T @ a_c @ s_hat)) <= 1e-12
    assert trace.perm.size == 2


def test_full_ratio_keeps_every_cluster(rng):
    g = _small_graph(rng, n=6)
    cfg = GgcnConfig(3, (4,), (1,), asap_ratio=1.0, hidden=4)
    trace = classify_forward(BatchedGraph.from_graphs([g]), cfg, init_params(cfg, 1), "eval")
    assert sorted(trace.perm) == list(range(6))
    assert np.all(np.diff(trace.fitness[trace.perm]) <= 0)


def test_global_max_pool_oracles(rng):
    x = rng.normal(size=(7, 3))
    gi = np.array([0, 0, 1, 1, 1, 2, 3])
    out, _ = L.global_max_pool_forward(x, gi, 4)
    for b in range(4):
        np.testing.assert_array_equal(out[b], x[gi == b].max(axis=0))
    np.testing.assert_array_equal(out[3], x[6])
    with pytest.raises(ValueError, match="no nodes"):
        L.global_max_pool_forward(x, gi, 5)


def test_duplicate_graph_gives_identical_rows(rng):
    g = _small_graph(rng, n=5)
    cfg = GgcnConfig(3, (4,), (2,), hidden=4)
    trace = classify_forward(BatchedGraph.from_graphs([g, g]), cfg, init_params(cfg, 2), "eval")
    np.testing.assert_array_equal(trace.logits[0], trace.logits[1])


def test_forward_shapes_bias_and_determinism(rng):
    g = _small_graph(rng, n=5)
    cfg = GgcnConfig(3, (4, 6), (2, 1), hidden=5)
    store = init_params(cfg, 4)
    batch = BatchedGraph.from_graphs([g])
    assert classify_forward(batch, cfg, store, "eval").logits.shape == (1, 2)
    t1 = classify_forward(batch, cfg, store, "train", rng=np.random.default_rng(0))
    t2 = classify_forward(batch, cfg, store, "train", masks=t1.masks)
    np.testing.assert_array_equal(t1.logits, t2.logits)
    e1 = classify_forward(batch, cfg, store, "eval")
    e2 = classify_forward(batch, cfg, store, "eval")
    np.testing.assert_array_equal(e1.logits, e2.logits)
    assert e1.masks == {}
    store.params["head.w2"][:] = 0.0
    store.params["head.b2"][:] = [0.25, -1.5]
    two = BatchedGraph.from_graphs([g, _small_graph(rng, n=5)])
    np.testing.assert_array_equal(classify_forward(two, cfg, store, "eval").logits, [[0.25, -1.5]] * 2)


def test_shape_mismatch_and_nonfinite(rng):
    cfg = GgcnConfig(3, (4,), (1,), hidden=4)
    store = init_params(cfg, 0)
    with pytest.raises(ValueError, match="features"):
        classify_forward(BatchedGraph.from_graphs([_small_graph(rng, f=2)]), cfg, store)
    store.params["block0.theta"][0, 0, 0] = np.nan
    with pytest.raises(NonFiniteActivation, match="block0"):
        classify_forward(BatchedGraph.from_graphs([_small_graph(rng)]), cfg, store)


def test_cross_entropy_cases():
    loss, _ = cross_entropy(np.zeros((3, 2)), [0, 1, 1])
    assert loss == pytest.approx(math.log(2))
    loss, _ = cross_entropy(np.array([[60.0, -60.0]]), [0])
    assert loss < 1e-40
    assert np.isfinite(cross_entropy(np.array([[1e4, -1e4]]), [1])[0])


def _grad_setup(rng):
    cfg = GgcnConfig(3, (4,), (2,), hidden=4)
    store = init_params(cfg, 0)
    batch = BatchedGraph.from_graphs([_small_graph(rng, label=0), _small_graph(rng, label=1)])
    return cfg, store, batch


def test_backward_linearity_and_zero(rng):
    cfg, store, batch = _grad_setup(rng)
    trace = classify_forward(batch, cfg, store, "train", rng=np.random.default_rng(1))
    _, d = cross_entropy(trace.logits, batch.labels)
    g1 = {k: v.copy() for k, v in backward(trace, d, store, cfg).items()}
    g2 = backward(trace, 2 * d, store, cfg)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)
    g0 = backward(trace, np.zeros_like(d), store, cfg)
    assert all(np.all(v == 0) for v in g0.values())


def test_stale_trace_rejected(rng):
    cfg, store, batch = _grad_setup(rng)
    trace = classify_forward(batch, cfg, store, "eval")
    store.bump()
    with pytest.raises(StaleTraceError):
        backward(trace, np.zeros((2, 2)), store, cfg)


def test_running_stats_update(rng):
    cfg, store, batch = _grad_setup(rng)
    trace = classify_forward(batch, cfg, store, "train", rng=np.random.default_rng(0))
    mu, var, n = trace.bn_stats[0]
    update_running_stats(store, trace, momentum=0.1)
    np.testing.assert_allclose(store.buffers["bn0.running_mean"], 0.1 * mu)
    np.testing.assert_allclose(store.buffers["bn0.running_var"], 0.9 + 0.1 * var * n / (n - 1))


@given(st.integers(0, 1000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = 6
    g = _small_graph(rng, n=n)
    perm = rng.permutation(n)
    gp = SparseGraph(g.adjacency[np.ix_(perm, perm)], g.node_features[perm], g.label)
    cfg = GgcnConfig(3, (4,), (2,), asap_ratio=0.5, hidden=4)
    store = init_params(cfg, seed)
    t = classify_forward(BatchedGraph.from_graphs([g]), cfg, store, "eval")
    tp = classify_forward(BatchedGraph.from_graphs([gp]), cfg, store, "eval")
    h = L.ggcn_block_forward(g.node_features, sp.csr_matrix(g.adjacency), *[store.params[f"block0.{k}"] for k in ("theta", "w_ih", "w_hh", "b_ih", "b_hh")])[0]
    hp = L.ggcn_block_forward(gp.node_features, sp.csr_matrix(gp.adjacency), *[store.params[f"block0.{k}"] for k in ("theta", "w_ih", "w_hh", "b_ih", "b_hh")])[0]
    np.testing.assert_allclose(hp, h[perm], atol=1e-12)
    np.testing.assert_allclose(tp.logits, t.logits, atol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError, match="exceeds"):
        GgcnConfig(25, (16,), (2,))
    with pytest.raises(ValueError):
        GgcnConfig(3, (4, 4, 4, 4), (1, 1, 1, 1))
    with pytest.raises(ValueError):
        GgcnConfig(3, (4,), (18,))
    with pytest.raises(ValueError):
        GgcnConfig(3, (4,), (1,), dropout=0.05)
    with pytest.raises(ValueError):
        GgcnConfig(3, (300,), (1,))
    cfg = GgcnConfig(3, (4, 8), (1, 2))
    assert GgcnConfig.from_dict(cfg.to_dict()) == cfg


def test_init_scheme():
    cfg = GgcnConfig(3, (4,), (2,), hidden=5)
    store = init_params(cfg, 0)
    assert np.all(np.abs(store["block0.w_ih"]) <= 1 / math.sqrt(4))
    assert np.all(store["head.b1"] == 0) and np.all(store["bn0.gamma"] == 1) and np.all(store["bn0.beta"] == 0)
    assert np.all(np.abs(store["head.w2"]) <= 1 / math.sqrt(5))


def test_param_store_roundtrip(tmp_path):
    cfg = GgcnConfig(3, (4,), (2,))
    store = init_params(cfg, 0)
    store.buffers["bn0.running_var"][:] = 2.5
    store.save(tmp_path / "m.json", meta={"note": "x"})
    back, meta = ParamStore.load(tmp_path / "m.json")
    assert meta["note"] == "x"
    for k in store.params:
        np.testing.assert_array_equal(back.params[k], store.params[k])
    np.testing.assert_array_equal(back.buffers["bn0.running_var"], store.buffers["bn0.running_var"])
