"""Multi-view neighborhood aggregation over prompted embeddings.

Both views use the same two-level scheme. Node level, for view ``v``::

    alpha[i, j] = softmax_{j in N_v(i) + {i}} LeakyReLU(a_v . [h_i || h_j])
    h_i^v       = LeakyReLU(sum_j alpha[i, j] h_j)

Semantic level, shared by all target nodes::

    w_v    = mean_i  a_sem . tanh(h_i^v W_sem + b_sem)
    beta   = softmax_v w_v
    z_i    = sum_v beta_v h_i^v

The type view has one ``v`` per node type adjacent to the target type, the
metapath view one per metapath. The token is
``z_i = LeakyReLU([z_i^MP || z_i^TP] W + b)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import kaiming
from .errors import ConfigError
from .hetgraph import NeighborIndex


class AggregationParams:
    def __init__(self, dim, type_names, metapath_names, seed=0):
        rng = np.random.default_rng(seed)
        d = int(dim)
        self.dim = d
        self.type_names = tuple(type_names)
        self.metapath_names = tuple(metapath_names)
        self.type_att = [nx.Param(kaiming(rng, 2 * d, (2 * d, 1)), f"a_{n}") for n in self.type_names]
        self.type_sem_a = nx.Param(kaiming(rng, d, (d, 1)), "a_TP")
        self.type_sem_W = nx.Param(kaiming(rng, d, (d, d)), "W_TP")
        self.type_sem_b = nx.Param(np.zeros((1, d)), "b_TP")
        self.path_att = [nx.Param(kaiming(rng, 2 * d, (2 * d, 1)), f"a_{n}") for n in self.metapath_names]
        self.path_sem_a = nx.Param(kaiming(rng, d, (d, 1)), "a_MP")
        self.path_sem_W = nx.Param(kaiming(rng, d, (d, d)), "W_MP")
        self.path_sem_b = nx.Param(np.zeros((1, d)), "b_MP")
        self.fuse_W = nx.Param(kaiming(rng, 2 * d, (2 * d, d)), "W")
        self.fuse_b = nx.Param(np.zeros((1, d)), "b")

    def params(self):
        return [*self.type_att, self.type_sem_a, self.type_sem_W, self.type_sem_b,
                *self.path_att, self.path_sem_a, self.path_sem_W, self.path_sem_b,
                self.fuse_W, self.fuse_b]


class ViewEdges:
    """Flattened (target, source row) pairs of one view, self pairs first."""

    def __init__(self, adj, target_offset, source_offset, n_rows):
        n_t = adj.shape[0]
        adj = adj.tocsr()
        rows = np.repeat(np.arange(n_t), np.diff(adj.indptr))
        self.n_targets = n_t
        self.dst = np.concatenate([np.arange(n_t), rows])
        self.src = np.concatenate([target_offset + np.arange(n_t), source_offset + adj.indices])
        self.dst_segments = nx.Segments(self.dst, n_t)
        self.src_segments = nx.Segments(self.src, n_rows)


class AggregationPlan:
    """Edge lists for every view, precomputed from a neighbor index."""

    def __init__(self, graph, index: NeighborIndex):
        off = graph.offsets
        t = graph.target_type
        self.n_targets = graph.num_target
        self.type_names = tuple(index.type_adj)
        self.metapath_names = tuple(index.metapath_adj)
        self.target_offset = off[t]
        n = graph.num_nodes
        self.type_edges = [ViewEdges(index.type_adj[k], off[t], off[graph.type_id(k)], n) for k in self.type_names]
        self.path_edges = [ViewEdges(index.metapath_adj[k], off[t], off[t], n) for k in self.metapath_names]


def node_attention(tape, H, h_t, edges: ViewEdges, att):
    """First attention level for one view; returns (h^v, alpha column)."""
    d = H.shape[1]
    a = tape.watch(att)
    s_self = nx.gather_rows(h_t @ nx.slice_rows(a, 0, d), edges.dst_segments)
    s_nbr = nx.gather_rows(H @ nx.slice_rows(a, d, 2 * d), edges.src_segments)
    alpha = nx.segment_softmax(nx.leaky_relu(s_self + s_nbr), edges.dst_segments)
    h = nx.leaky_relu(nx.edge_weighted_sum(alpha, H, edges.dst_segments, edges.src_segments))
    return h, alpha


def semantic_attention(tape, hs, sem_a, sem_W, sem_b):
    """Second level; returns (z, beta as a 1 x V row)."""
    a, W, b = tape.watch(sem_a), tape.watch(sem_W), tape.watch(sem_b)
    scores = [nx.reduce_mean_rows(nx.tanh(h @ W + b)) @ a for h in hs]
    beta = nx.row_softmax(nx.concat_cols(*scores))
    z = None
    for k, h in enumerate(hs):
        term = h * nx.slice_cols(beta, k, k + 1)
        z = term if z is None else z + term
    return z, beta


def _view(tape, H, h_t, edge_sets, atts, sem):
    hs, alphas = [], []
    for edges, att in zip(edge_sets, atts):
        h, alpha = node_attention(tape, H, h_t, edges, att)
        hs.append(h)
        alphas.append(alpha)
    z, beta = semantic_attention(tape, hs, *sem)
    return z, beta, alphas


def type_based_aggregate(tape, H, plan: AggregationPlan, params: AggregationParams):
    if not plan.type_names:
        raise ConfigError("the target type has no adjacent node types")
    h_t = nx.slice_rows(H, plan.target_offset, plan.target_offset + plan.n_targets)
    return _view(tape, H, h_t, plan.type_edges, params.type_att,
                 (params.type_sem_a, params.type_sem_W, params.type_sem_b))


def metapath_based_aggregate(tape, H, plan: AggregationPlan, params: AggregationParams):
    if not plan.metapath_names:
        raise ConfigError("metapath aggregation needs at least one metapath")
    h_t = nx.slice_rows(H, plan.target_offset, plan.target_offset + plan.n_targets)
    return _view(tape, H, h_t, plan.path_edges, params.path_att,
                 (params.path_sem_a, params.path_sem_W, params.path_sem_b))


def fuse(tape, z_mp, z_tp, params: AggregationParams):
    if z_mp.shape[0] != z_tp.shape[0]:
        raise nx.DimensionError(f"fuse: {z_mp.shape[0]} metapath rows vs {z_tp.shape[0]} type rows")
    return nx.leaky_relu(nx.concat_cols(z_mp, z_tp) @ tape.watch(params.fuse_W) + tape.watch(params.fuse_b))


@dataclass
class NodeTokens:
    z: object
    z_tp: object
    z_mp: object
    type_alpha: list
    path_alpha: list
    type_beta: object
    path_beta: object


def aggregate(tape, H, plan: AggregationPlan, params: AggregationParams) -> NodeTokens:
    """Node tokens for every target node. Entries are Vars on ``tape``."""
    z_tp, beta_tp, alpha_tp = type_based_aggregate(tape, H, plan, params)
    z_mp, beta_mp, alpha_mp = metapath_based_aggregate(tape, H, plan, params)
    return NodeTokens(fuse(tape, z_mp, z_tp, params), z_tp, z_mp, alpha_tp, alpha_mp, beta_tp, beta_mp)


def format_attention(tokens: NodeTokens, plan: AggregationPlan, graph) -> str:
    """Tab-separated dump of every alpha entry and the global beta weights."""
    lines = ["kind\tview\ttarget\tneighbor_type\tneighbor\tweight"]
    off = graph.offsets
    kinds = [("type", plan.type_names, plan.type_edges, tokens.type_alpha, tokens.type_beta),
             ("metapath", plan.metapath_names, plan.path_edges, tokens.path_alpha, tokens.path_beta)]
    for kind, names, edge_sets, alphas, beta in kinds:
        for name, edges, alpha in zip(names, edge_sets, alphas):
            a = alpha.value[:, 0] if hasattr(alpha, "value") else np.asarray(alpha)[:, 0]
            for dst, src, w in zip(edges.dst, edges.src, a):
                ty = int(np.searchsorted(off, src, side="right") - 1)
                lines.append(f"alpha\t{kind}:{name}\t{dst}\t{graph.node_types[ty].name}\t{src - off[ty]}\t{float(w)!r}")
        b = beta.value[0] if hasattr(beta, "value") else np.asarray(beta)[0]
        for name, w in zip(names, b):
            lines.append(f"beta\t{kind}:{name}\t\t\t\t{float(w)!r}")
    return "\n".join(lines) + "\n"
