import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchforge import gnn
from branchforge import numerics as nx
from branchforge.cpg import FEATURE_DIM, BranchMask, Cpg, CpgNode
from branchforge.gnn import GnnConfig, MaskUnavailable, attention_weights, gnn_forward, node_embeddings
from branchforge.numerics import ParameterStore


def make_graph(features, ast=(), cfg=(), dfg=()):
    nodes = [CpgNode(i, "Assign", 0, 1, 1, 0, np.asarray(f, dtype=float)) for i, f in enumerate(features)]
    return Cpg(nodes, [list(ast), list(cfg), list(dfg)], 1)


def params(cfg, seed=0):
    store = ParameterStore()
    gnn.init_gnn_params(store, cfg, np.random.default_rng(seed))
    return store


def mask_of(n, ids):
    bits = np.zeros(n, dtype=np.int8)
    bits[list(ids)] = 1
    return BranchMask(bits)


def leaky(x):
    return np.where(x > 0, x, 0.2 * x)


@pytest.mark.parametrize("variant", ["attention", "mean"])
def test_single_node_pass_through(variant):
    cfg = GnnConfig(variant=variant)
    store = params(cfg)
    for k in range(1, 4):
        fan_in = FEATURE_DIM if k == 1 else 64
        store[f"gnn.{k}.self"].data = np.eye(fan_in, 64)
        store[f"gnn.{k}.bias"].data = np.zeros(64)
    x = np.random.default_rng(1).normal(size=FEATURE_DIM)
    g = make_graph([x])
    h = x[:64]
    for _ in range(3):
        h = leaky(h)
    expected = (h - h.mean()) / np.sqrt(h.var() + 1e-5)
    out = gnn_forward(g, mask_of(1, [0]), cfg, store).data
    assert out.shape == (32, 64)
    assert np.allclose(out[0], expected, atol=1e-12)
    assert np.array_equal(out[1:], np.tile(store["gnn.pad"].data, (31, 1)))


@pytest.mark.parametrize("variant", ["attention", "mean"])
def test_dead_relations_do_not_matter(variant):
    cfg = GnnConfig(variant=variant)
    store = params(cfg)
    rng = np.random.default_rng(2)
    g = make_graph(rng.normal(size=(2, FEATURE_DIM)), ast=[(0, 1)])
    m = mask_of(2, [0, 1])
    before = gnn_forward(g, m, cfg, store).data.copy()
    for name in store.names():
        if name.endswith(("W1", "W2", "a_dst1", "a_src1", "a_dst2", "a_src2")):
            store[name].data = rng.normal(size=store[name].shape)
    assert np.array_equal(gnn_forward(g, m, cfg, store).data, before)
    store["gnn.1.W0"].data = store["gnn.1.W0"].data + 0.1
    assert not np.array_equal(gnn_forward(g, m, cfg, store).data, before)


def random_graph(rng, n, p=0.35):
    edges = [[], [], []]
    for j in range(3):
        for s in range(n):
            for d in range(n):
                if s != d and rng.random() < p:
                    edges[j].append((s, d))
    return rng.normal(size=(n, FEATURE_DIM)), edges


@pytest.mark.parametrize("variant", ["attention", "mean"])
def test_permutation_equivariance(variant):
    rng = np.random.default_rng(3)
    n = 7
    feats, edges = random_graph(rng, n)
    perm = rng.permutation(n)                      # old id -> new id
    inv = np.argsort(perm)
    g1 = make_graph(feats, *edges)
    g2 = make_graph(feats[inv], *[[(int(perm[s]), int(perm[d])) for s, d in e] for e in edges])
    chosen = [0, 2, 3, 6]
    for agg in ("node", "pool"):
        cfg = GnnConfig(variant=variant, branch_agg=agg)
        store = params(cfg)
        out1 = gnn_forward(g1, mask_of(n, chosen), cfg, store).data
        out2 = gnn_forward(g2, mask_of(n, perm[chosen]), cfg, store).data
        if agg == "pool":
            assert np.allclose(out1, out2, rtol=0, atol=1e-12)
        else:
            new_ids = sorted(int(perm[c]) for c in chosen)
            old_for_row = [int(inv[i]) for i in new_ids]
            rows = [chosen.index(o) for o in old_for_row]
            assert np.allclose(out2[:4], out1[rows], rtol=0, atol=1e-12)
            assert np.array_equal(out1[4:], out2[4:])


def test_attention_weight_examples():
    a = np.ones((1, 1))
    assert attention_weights(np.ones((1, 1)), np.ones((1, 1, 1)), a, a).tolist() == [[1.0]]
    same = attention_weights(np.ones((2, 3)), np.ones((4, 2, 3)), np.ones((2, 3)), np.ones((2, 3)))
    assert np.allclose(same, 0.25)
    w = attention_weights(np.ones((1, 1)), np.array([[[1.0]], [[1.0 + math.log(2)]]]), a, a)
    assert np.allclose(w, [[1 / 3, 2 / 3]], atol=1e-15)


def test_truncation_keeps_smallest_ids():
    rng = np.random.default_rng(4)
    n = 40
    feats, edges = random_graph(rng, n, 0.05)
    g = make_graph(feats, *edges)
    cfg = GnnConfig()
    store = params(cfg)
    out = gnn_forward(g, mask_of(n, range(n)), cfg, store).data
    h = node_embeddings(g, cfg, store).data
    assert np.array_equal(out, h[:32])


def test_rows_come_only_from_mask_members():
    rng = np.random.default_rng(5)
    feats, edges = random_graph(rng, 6)
    g = make_graph(feats, *edges)
    cfg = GnnConfig()
    store = params(cfg)
    h = node_embeddings(g, cfg, store).data
    out = gnn_forward(g, mask_of(6, [1, 4]), cfg, store).data
    assert np.array_equal(out[:2], h[[1, 4]])
    pooled = gnn_forward(g, mask_of(6, [1, 4]), GnnConfig(branch_agg="pool"), store).data
    assert np.allclose(pooled, np.tile(h[[1, 4]].mean(0), (32, 1)), atol=1e-15)


def test_mask_unavailable():
    g = make_graph(np.zeros((2, FEATURE_DIM)))
    with pytest.raises(MaskUnavailable):
        gnn_forward(g, mask_of(2, []), GnnConfig(), params(GnnConfig()))


def test_config_validation():
    with pytest.raises(ValueError):
        GnnConfig(d_h=30, heads=8)
    GnnConfig(d_h=30, heads=8, variant="mean")


@pytest.mark.parametrize("variant", ["attention", "mean"])
def test_one_layer_gradient_check(variant):
    rng = np.random.default_rng(6)
    g = make_graph(rng.normal(size=(4, FEATURE_DIM)), ast=[(0, 1), (0, 2), (2, 3)],
                   cfg=[(1, 2), (2, 3)], dfg=[(1, 3)])
    cfg = GnnConfig(layers=1, variant=variant)
    store = params(cfg)
    w = rng.normal(size=(32, 64))
    report = nx.finite_diff_check(lambda: nx.sum_(gnn_forward(g, mask_of(4, [0, 1, 3]), cfg, store) * w),
                                  store.params, coords=300)
    assert report.max_rel_error < 1e-4


def test_empty_relation_gradients_are_exactly_zero():
    rng = np.random.default_rng(7)
    g = make_graph(rng.normal(size=(3, FEATURE_DIM)), ast=[(0, 1), (0, 2)])
    cfg = GnnConfig()
    store = params(cfg)
    nx.sum_(gnn_forward(g, mask_of(3, [0, 1, 2]), cfg, store) * rng.normal(size=(32, 64))).backward()
    for name, t in store.params.items():
        if name.endswith(("W1", "W2", "a_dst1", "a_src1", "a_dst2", "a_src2")):
            assert t.grad is None or not t.grad.any(), name
    assert np.abs(store["gnn.1.W0"].grad).sum() > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["attention", "mean"]))
def test_locality(seed, variant):
    rng = np.random.default_rng(seed)
    n = 8
    feats, edges = random_graph(rng, n, 0.12)
    cfg = GnnConfig(variant=variant)
    store = params(cfg, seed)
    base = node_embeddings(make_graph(feats, *edges), cfg, store).data
    u = int(rng.integers(n))
    bumped = feats.copy()
    bumped[u] += rng.normal(size=FEATURE_DIM)
    moved = node_embeddings(make_graph(bumped, *edges), cfg, store).data
    adj = np.zeros((n, n), dtype=bool)
    for e in edges:
        for s, d in e:
            adj[s, d] = adj[d, s] = True
    reach = {u}
    for _ in range(cfg.layers):
        reach |= {v for v in range(n) for w in reach if adj[v, w]}
    for v in range(n):
        if v not in reach:
            assert np.array_equal(base[v], moved[v])
