import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetprompt import aggregation as agg, numerics as nx
from hetprompt.errors import ConfigError
from hetprompt.hetgraph import HetGraph, neighbor_index
from conftest import tiny_graph
from oracles import leaky


def six_node_graph(write=((0, 0), (0, 1), (1, 1), (1, 2)), belong=((0, 0), (2, 0)), metapaths=None):
    return HetGraph.build(
        {"paper": 3, "author": 2, "subject": 1},
        {"write": ("author", "paper"), "belong": ("paper", "subject")},
        {"write": list(write), "belong": list(belong)},
        {"paper": np.zeros((3, 2)), "author": np.zeros((2, 2)), "subject": np.zeros((1, 2))},
        "paper", labels=[0, 1, 2],
        metapaths=metapaths if metapaths is not None else {"PAP": ["write:rev", "write"],
                                                           "PSP": ["belong", "belong:rev"]})


def randomize(params, seed):
    rng = np.random.default_rng(seed)
    for p in params.params():
        p.value = rng.normal(size=p.shape) * 0.7
    return params


def setup(graph, d=3, seed=0):
    plan = agg.AggregationPlan(graph, neighbor_index(graph))
    params = randomize(agg.AggregationParams(d, plan.type_names, plan.metapath_names, seed), seed)
    H = np.random.default_rng(seed + 50).normal(size=(graph.num_nodes, d))
    return plan, params, H


def run(graph, plan, params, H):
    t = nx.Tape(enabled=False)
    return agg.aggregate(t, t.constant(H), plan, params)


def scalar_view(H, targets, neighbor_rows, atts, sem_a, sem_W, sem_b):
    """Both attention levels with explicit loops; neighbor_rows[v][i] lists global rows."""
    d = H.shape[1]
    hs, alphas = [], []
    for v, att in enumerate(atts):
        a = att[:, 0]
        hv, av = [], []
        for i, row_i in enumerate(targets):
            rows = [row_i] + list(neighbor_rows[v][i])
            e = [leaky(sum(a[k] * H[row_i, k] for k in range(d)) + sum(a[d + k] * H[r, k] for k in range(d)))
                 for r in rows]
            mx = max(e)
            den = sum(math.exp(x - mx) for x in e)
            al = [math.exp(x - mx) / den for x in e]
            av.append(al)
            hv.append([leaky(sum(al[n] * H[r, k] for n, r in enumerate(rows))) for k in range(d)])
        hs.append(hv)
        alphas.append(av)
    w = []
    for hv in hs:
        total = 0.0
        for h in hv:
            total += sum(sem_a[k, 0] * math.tanh(sum(h[r] * sem_W[r, k] for r in range(d)) + sem_b[0, k])
                         for k in range(d))
        w.append(total / len(hv))
    den = sum(math.exp(x) for x in w)
    beta = [math.exp(x) / den for x in w]
    z = [[sum(beta[v] * hs[v][i][k] for v in range(len(hs))) for k in range(d)] for i in range(len(targets))]
    return np.array(z), beta, alphas


def neighbor_rows(graph, plan):
    off = graph.offsets
    idx = neighbor_index(graph)
    types = [[off[graph.type_id(name)] + idx.type_neighbors(name, i) for i in range(graph.num_target)]
             for name in plan.type_names]
    paths = [[off[graph.target_type] + idx.metapath_neighbors(name, i) for i in range(graph.num_target)]
             for name in plan.metapath_names]
    return types, paths


@pytest.mark.parametrize("seed", range(4))
def test_both_views_and_fusion_match_scalar_oracle(seed):
    g = six_node_graph()
    plan, params, H = setup(g, seed=seed)
    tok = run(g, plan, params, H)
    types, paths = neighbor_rows(g, plan)
    targets = list(range(g.num_target))
    z_tp, b_tp, a_tp = scalar_view(H, targets, types, [p.value for p in params.type_att],
                                   params.type_sem_a.value, params.type_sem_W.value, params.type_sem_b.value)
    z_mp, b_mp, a_mp = scalar_view(H, targets, paths, [p.value for p in params.path_att],
                                   params.path_sem_a.value, params.path_sem_W.value, params.path_sem_b.value)
    np.testing.assert_allclose(tok.z_tp.value, z_tp, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(tok.z_mp.value, z_mp, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(tok.type_beta.value[0], b_tp, rtol=1e-12)
    np.testing.assert_allclose(tok.path_beta.value[0], b_mp, rtol=1e-12)
    for mine, ref in zip(tok.type_alpha + tok.path_alpha, a_tp + a_mp):
        # edges are laid out self pairs first, then neighbors in row order
        n_t = g.num_target
        flat_ref = [al[0] for al in ref] + [x for al in ref for x in al[1:]]
        np.testing.assert_allclose(mine.value[:, 0], flat_ref, rtol=1e-12)
        assert len(flat_ref) >= n_t
    W, b = params.fuse_W.value, params.fuse_b.value[0]
    cat = np.hstack([z_mp, z_tp])
    z = [[leaky(sum(cat[i, r] * W[r, k] for r in range(cat.shape[1])) + b[k]) for k in range(3)]
         for i in range(3)]
    np.testing.assert_allclose(tok.z.value, z, rtol=1e-12, atol=1e-14)


def test_two_neighbor_alpha_hand_softmax():
    g = six_node_graph(write=[(0, 0), (1, 0)])
    plan, params, H = setup(g, d=2, seed=3)
    a = params.type_att[plan.type_names.index("author")].value[:, 0]
    off = g.offsets
    rows = [0, off[1], off[1] + 1]
    e = [leaky(a[:2] @ H[0] + a[2:] @ H[r]) for r in rows]
    expect = np.exp(e) / np.exp(e).sum()
    tok = run(g, plan, params, H)
    alpha = tok.type_alpha[plan.type_names.index("author")].value[:, 0]
    edges = plan.type_edges[plan.type_names.index("author")]
    mine = alpha[edges.dst == 0]
    np.testing.assert_allclose(mine, expect, rtol=1e-13)


def test_empty_neighborhood_is_self_only():
    g = six_node_graph(write=[(0, 0)], belong=[(0, 0)])
    plan, params, H = setup(g)
    tok = run(g, plan, params, H)
    for alpha, edges in zip(tok.type_alpha + tok.path_alpha, plan.type_edges + plan.path_edges):
        own = alpha.value[(edges.dst == 2), 0]
        np.testing.assert_array_equal(own, [1.0])
    # node 2 is isolated everywhere, so every view gives LeakyReLU(h_2)
    h2 = np.where(H[2] > 0, H[2], 0.01 * H[2])
    np.testing.assert_allclose(tok.z_tp.value[2], h2, rtol=1e-14)
    np.testing.assert_allclose(tok.z_mp.value[2], h2, rtol=1e-14)


def test_single_view_has_unit_beta():
    g = HetGraph.build({"paper": 3, "author": 2}, {"write": ("author", "paper"), "cite": ("paper", "paper")},
                       {"write": [(0, 0), (0, 1)]}, {"paper": np.zeros((3, 2)), "author": np.zeros((2, 2))},
                       "paper", metapaths={"PAP": ["write:rev", "write"]})
    plan, params, H = setup(g)
    assert plan.type_names == ("paper", "author")
    params2 = agg.AggregationParams(3, plan.type_names, plan.metapath_names)
    tok = run(g, plan, params2, H)
    np.testing.assert_array_equal(tok.path_beta.value, [[1.0]])


def test_fuse_selection_and_annihilation():
    t = nx.Tape(enabled=False)
    z_mp = t.constant(np.random.default_rng(0).normal(size=(4, 3)))
    z_tp = t.constant(np.abs(np.random.default_rng(1).normal(size=(4, 3))))
    params = agg.AggregationParams(3, ["a"], ["p"])
    params.fuse_W.value = np.vstack([np.zeros((3, 3)), np.eye(3)])
    params.fuse_b.value = np.zeros((1, 3))
    np.testing.assert_array_equal(agg.fuse(t, z_mp, z_tp, params).value, z_tp.value)
    params.fuse_W.value = np.zeros((6, 3))
    np.testing.assert_array_equal(agg.fuse(t, z_mp, z_tp, params).value, 0.0)
    with pytest.raises(nx.DimensionError):
        agg.fuse(t, z_mp, t.constant(np.zeros((2, 3))), params)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_attention_rows_sum_to_one(seed):
    g = tiny_graph(seed % 1000)
    plan, params, H = setup(g, d=4, seed=seed % 1000)
    H = H * np.random.default_rng(seed).uniform(0.1, 20)
    tok = run(g, plan, params, H)
    for alpha, edges in zip(tok.type_alpha + tok.path_alpha, plan.type_edges + plan.path_edges):
        sums = np.bincount(edges.dst, weights=alpha.value[:, 0], minlength=edges.n_targets)
        np.testing.assert_allclose(sums, 1.0, atol=1e-10)
        assert (alpha.value > 0).all()
    for beta in (tok.type_beta, tok.path_beta):
        assert abs(beta.value.sum() - 1.0) < 1e-10 and (beta.value > 0).all()


def test_beta_is_graph_level():
    g = tiny_graph(1)
    plan, params, H = setup(g, d=4, seed=1)
    tok = run(g, plan, params, H)
    assert tok.type_beta.shape == (1, len(plan.type_names))
    subset = [0, 3]
    hs = [agg.node_attention(nx.Tape(enabled=False), nx.Tape(enabled=False).constant(H),
                             nx.Tape(enabled=False).constant(H[:g.num_target]), e, a)[0].value
          for e, a in zip(plan.type_edges, params.type_att)]
    manual = sum(b * h[subset] for b, h in zip(tok.type_beta.value[0], hs))
    np.testing.assert_allclose(tok.z_tp.value[subset], manual, rtol=1e-12)


def test_vanishing_neighbor_leaves_output_unchanged():
    g = six_node_graph()
    plan, params, H = setup(g, seed=5)
    base = run(g, plan, params, H)
    # same graph plus one extra author on paper 0 whose attention score is hugely negative
    g2 = HetGraph.build({"paper": 3, "author": 3, "subject": 1},
                        {"write": ("author", "paper"), "belong": ("paper", "subject")},
                        {"write": [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0)], "belong": [(0, 0), (2, 0)]},
                        {"paper": np.zeros((3, 2)), "author": np.zeros((3, 2)), "subject": np.zeros((1, 2))},
                        "paper", labels=[0, 1, 2],
                        metapaths={"PAP": ["write:rev", "write"], "PSP": ["belong", "belong:rev"]})
    plan2 = agg.AggregationPlan(g2, neighbor_index(g2))
    a2 = params.type_att[plan.type_names.index("author")].value[3:, 0]
    extra = -1e5 * a2 / (a2 @ a2)
    H2 = np.vstack([H[:5], extra, H[5:]])
    # the extra author also joins PAP paths, so compare the type view only
    t = nx.Tape(enabled=False)
    z_tp2 = agg.type_based_aggregate(t, t.constant(H2), plan2, params)[0].value
    np.testing.assert_allclose(z_tp2, base.z_tp.value, atol=1e-6)


def test_aggregation_gradients_match_finite_differences():
    g = tiny_graph(2)
    assert g.num_nodes <= 12
    plan, params, H = setup(g, d=3, seed=2)
    R = np.random.default_rng(9).normal(size=(g.num_target, 3))
    report = nx.finite_diff_check(
        lambda t: nx.reduce_sum(agg.aggregate(t, t.constant(H), plan, params).z * t.constant(R)),
        params.params())
    assert report["__ok__"], report


def test_no_metapaths_is_config_error():
    g = six_node_graph(metapaths={})
    plan, params, H = setup(g)
    t = nx.Tape(enabled=False)
    with pytest.raises(ConfigError):
        agg.metapath_based_aggregate(t, t.constant(H), plan, params)


def test_attention_dump_lists_every_weight():
    g = six_node_graph()
    plan, params, H = setup(g)
    tok = run(g, plan, params, H)
    lines = agg.format_attention(tok, plan, g).splitlines()
    n_alpha = sum(len(e.dst) for e in plan.type_edges + plan.path_edges)
    assert lines[0].startswith("kind\tview")
    assert sum(line.startswith("alpha") for line in lines) == n_alpha
    assert sum(line.startswith("beta") for line in lines) == len(plan.type_names) + len(plan.metapath_names)
