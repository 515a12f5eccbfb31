"""Compact heterogeneous encoder with a cross-view contrastive pretext.

Architecture, for target nodes::

    p_i   = x_i W_A + b_A                                   (per-type projection)
    u_i^n = p_i + LeakyReLU(mean_{j in N_n(i)} p_j  M_n)   (one view per metapath)
    h_i   = sum_n softmax(v)_n u_i^n                        (learned view fusion)

Non-target nodes carry ``p_i``. An empty metapath neighborhood contributes a
zero mean, so an isolated node keeps its projected features.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .errors import CheckpointError, ConfigError
from .hetgraph import HetGraph, compose_metapath

CHECKPOINT_VERSION = 1


def kaiming(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape)


def mean_operator(adj):
    """Row-normalized copy of a boolean adjacency; empty rows stay zero."""
    adj = sp.csr_matrix(adj, dtype=np.float64)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.diags(inv) @ adj


class EncoderParams:
    """theta: per-type projections, per-metapath propagation, view-fusion logits."""

    def __init__(self, type_names, feature_dims, metapath_names, dim, seed=0):
        rng = np.random.default_rng(seed)
        self.type_names = tuple(type_names)
        self.feature_dims = tuple(int(d) for d in feature_dims)
        self.metapath_names = tuple(metapath_names)
        self.dim = int(dim)
        self.proj_w = [nx.Param(kaiming(rng, d_a, (d_a, dim)), f"W_{name}")
                       for name, d_a in zip(self.type_names, self.feature_dims)]
        self.proj_b = [nx.Param(np.zeros((1, dim)), f"b_{name}") for name in self.type_names]
        self.prop = [nx.Param(kaiming(rng, dim, (dim, dim)), f"M_{name}") for name in self.metapath_names]
        self.fusion = nx.Param(np.zeros((1, len(self.metapath_names))), "view_logits")

    def params(self):
        return [*self.proj_w, *self.proj_b, *self.prop, self.fusion]

    def copy(self, trainable=None):
        out = object.__new__(EncoderParams)
        out.type_names = self.type_names
        out.feature_dims = self.feature_dims
        out.metapath_names = self.metapath_names
        out.dim = self.dim
        flag = (lambda p: p.trainable) if trainable is None else (lambda p: trainable)
        out.proj_w = [nx.Param(p.value.copy(), p.name, flag(p)) for p in self.proj_w]
        out.proj_b = [nx.Param(p.value.copy(), p.name, flag(p)) for p in self.proj_b]
        out.prop = [nx.Param(p.value.copy(), p.name, flag(p)) for p in self.prop]
        out.fusion = nx.Param(self.fusion.value.copy(), self.fusion.name, flag(self.fusion))
        return out

    @property
    def num_parameters(self):
        return sum(p.size for p in self.params())


class ContrastiveHead:
    """psi: bilinear scorer between unit-normalized embeddings, scaled by 1/tau.

    ``B`` starts at the identity, where the score is cosine similarity.
    """

    def __init__(self, dim, tau=0.5):
        if tau <= 0:
            raise ConfigError(f"temperature must be positive, got {tau}")
        self.tau = float(tau)
        self.bilinear = nx.Param(np.eye(dim), "B")

    def params(self):
        return [self.bilinear]

    def logits(self, tape, a, b):
        B = tape.watch(self.bilinear)
        return nx.scale(nx.l2_normalize_rows(a) @ B @ nx.l2_normalize_rows(b).T, 1.0 / self.tau)


class GraphOperators:
    """Mean-propagation operators for each metapath of a graph."""

    def __init__(self, graph: HetGraph):
        self.fingerprint = graph.fingerprint
        self.metapath_names = tuple(m.name for m in graph.metapaths)
        self.adjacency = {m.name: compose_metapath(graph, m) for m in graph.metapaths}
        self.mean = {k: mean_operator(a) for k, a in self.adjacency.items()}


def _operators(graph, ops):
    if ops is None:
        return GraphOperators(graph)
    if ops.fingerprint != graph.fingerprint:
        raise ConfigError("graph operators were built for a different graph")
    return ops


def view_messages(tape, graph, x_target, params: EncoderParams, ops=None):
    """Self projection ``p`` and the neighbor-only message of every metapath."""
    ops = _operators(graph, ops)
    t = graph.target_type
    if x_target.shape[1] != params.feature_dims[t]:
        raise nx.DimensionError(
            f"target features have {x_target.shape[1]} columns, encoder expects {params.feature_dims[t]}")
    p_t = x_target @ tape.watch(params.proj_w[t]) + tape.watch(params.proj_b[t])
    msgs = [nx.leaky_relu(nx.sparse_matmul(ops.mean[name], p_t) @ tape.watch(m))
            for name, m in zip(params.metapath_names, params.prop)]
    return p_t, msgs


def encode_views(tape, graph, x_target, params: EncoderParams, ops=None):
    """One embedding per metapath view for the target nodes."""
    p_t, msgs = view_messages(tape, graph, x_target, params, ops)
    return [p_t + m for m in msgs]


def fuse_views(tape, params, views):
    beta = nx.row_softmax(tape.watch(params.fusion))
    out = None
    for k, v in enumerate(views):
        term = v * nx.slice_cols(beta, k, k + 1)
        out = term if out is None else out + term
    return out


def encode(graph: HetGraph, features, params: EncoderParams, tape=None, ops=None):
    """Embedding matrix over all nodes, stacked by type id (|V| x d).

    ``features`` is a list of per-type matrices or Vars. Without a tape the
    result is a plain ndarray.
    """
    plain = tape is None
    if plain:
        tape = nx.Tape(enabled=False)
    if len(features) != len(graph.node_types):
        raise nx.DimensionError(f"need {len(graph.node_types)} feature matrices, got {len(features)}")
    xs = [f if isinstance(f, nx.Var) else tape.constant(f) for f in features]
    for nt, x in zip(graph.node_types, xs):
        if x.shape[0] != graph.node_counts[nt.id]:
            raise nx.DimensionError(f"features of {nt.name!r} have {x.shape[0]} rows, graph has {graph.node_counts[nt.id]}")
    blocks = []
    for a, (x, d_a) in enumerate(zip(xs, params.feature_dims)):
        if x.shape[1] != d_a:
            raise nx.DimensionError(
                f"features of {graph.node_types[a].name!r} have {x.shape[1]} columns, encoder expects {d_a}")
        if a == graph.target_type:
            blocks.append(fuse_views(tape, params, encode_views(tape, graph, x, params, ops)))
        else:
            blocks.append(x @ tape.watch(params.proj_w[a]) + tape.watch(params.proj_b[a]))
    h = nx.concat_rows(*blocks)
    return h.value if plain else h


# ----------------------------------------------------------------- pretext

def info_nce(tape, head, anchors, candidates, normalized=False):
    """Mean over anchors of -log softmax(score)[i, i]; row i's positive is
    candidate i, every other candidate in the batch is a negative."""
    if normalized:
        logits = nx.scale(anchors @ tape.watch(head.bilinear) @ candidates.T, 1.0 / head.tau)
    else:
        logits = head.logits(tape, anchors, candidates)
    n = anchors.shape[0]
    return nx.scale(nx.reduce_sum(nx.pick(nx.row_log_softmax(logits), np.arange(n))), -1.0 / n)


def pretext_loss(tape, graph, params, head, ops=None, batch=None):
    """Cross-view InfoNCE between a node's own projection and its metapath
    neighborhoods.

    Views are the self projection ``p``, each neighbor-only metapath message
    and the fused message. Every ordered pair of distinct views is
    contrasted, except a metapath message against the fusion that contains
    it. Positives are the same node under the other view, negatives the
    other nodes of the batch.
    """
    x = tape.constant(graph.features[graph.target_type])
    p_t, msgs = view_messages(tape, graph, x, params, ops)
    views = [p_t, *msgs, fuse_views(tape, params, msgs)]
    fused = len(views) - 1
    if batch is not None:
        views = [nx.gather_rows(v, batch) for v in views]
    views = [nx.l2_normalize_rows(v) for v in views]
    total = None
    count = 0
    for a in range(len(views)):
        for b in range(len(views)):
            if a == b or (fused in (a, b) and 0 not in (a, b)):
                continue
            term = info_nce(tape, head, views[a], views[b], normalized=True)
            total = term if total is None else total + term
            count += 1
    return nx.scale(total, 1.0 / count)


@dataclass
class PretrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    tau: float = 0.5
    dim: int = 64
    seed: int = 0
    batch_size: int = 0  # 0 = all target nodes every epoch


class FrozenEncoder:
    """Pre-trained (theta*, psi*) with every parameter marked non-trainable."""

    def __init__(self, params: EncoderParams, head: ContrastiveHead, fingerprint: str, history=()):
        self.params = params
        self.head = head
        self.fingerprint = fingerprint
        self.history = list(history)
        for p in self.all_params():
            p.trainable = False
            p.zero_grad()

    def all_params(self):
        return self.params.params() + self.head.params()

    @property
    def dim(self):
        return self.params.dim

    def digest(self) -> str:
        """SHA-256 of the serialized theta* and psi*."""
        h = hashlib.sha256()
        for p in self.all_params():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        h.update(repr(self.head.tau).encode())
        return h.hexdigest()

    def check_graph(self, graph: HetGraph):
        if graph.fingerprint != self.fingerprint:
            raise CheckpointError(
                f"encoder was trained on graph {self.fingerprint[:12]}, got {graph.fingerprint[:12]}")

    def encode(self, graph, features=None, tape=None, ops=None):
        self.check_graph(graph)
        return encode(graph, list(graph.features) if features is None else features, self.params, tape, ops)

    # ------------------------------------------------------------ checkpoint

    def save(self, path):
        meta = {
            "version": CHECKPOINT_VERSION,
            "dim": self.params.dim,
            "tau": self.head.tau,
            "type_names": list(self.params.type_names),
            "feature_dims": list(self.params.feature_dims),
            "metapaths": list(self.params.metapath_names),
            "fingerprint": self.fingerprint,
            "history": self.history,
        }
        arrays = {f"p{k}": p.value for k, p in enumerate(self.all_params())}
        buf = io.BytesIO()
        np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path):
        try:
            data = np.load(path, allow_pickle=False)
            meta = json.loads(str(data["meta"]))
        except (OSError, ValueError, KeyError) as exc:
            raise CheckpointError(f"cannot read encoder checkpoint {path}: {exc}") from exc
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported encoder checkpoint version {meta.get('version')}")
        params = EncoderParams(meta["type_names"], meta["feature_dims"], meta["metapaths"], meta["dim"])
        head = ContrastiveHead(meta["dim"], meta["tau"])
        enc = cls(params, head, meta["fingerprint"], meta.get("history", ()))
        plist = enc.all_params()
        for k, p in enumerate(plist):
            value = data[f"p{k}"]
            if value.shape != p.shape:
                raise CheckpointError(f"checkpoint array {p.name} has shape {value.shape}, expected {p.shape}")
            p.value = np.array(value, dtype=np.float64)
        return enc


def pretrain(graph: HetGraph, config: PretrainConfig = None, **overrides) -> FrozenEncoder:
    config = config or PretrainConfig()
    for key, value in overrides.items():
        setattr(config, key, value)
    if len(graph.metapaths) < 2:
        raise ConfigError(f"pre-training needs at least 2 metapath views, graph has {len(graph.metapaths)}")
    if config.epochs < 1 or config.lr <= 0 or config.dim < 1:
        raise ConfigError(f"bad pre-training config {config}")
    params = EncoderParams([nt.name for nt in graph.node_types], graph.feature_dims,
                           [m.name for m in graph.metapaths], config.dim, config.seed)
    head = ContrastiveHead(config.dim, config.tau)
    ops = GraphOperators(graph)
    opt = nx.Adam(params.params() + head.params(), lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    n_t = graph.num_target
    history = []
    for _ in range(config.epochs):
        batch = None
        if config.batch_size and config.batch_size < n_t:
            batch = np.sort(rng.choice(n_t, size=config.batch_size, replace=False))
        opt.zero_grad()
        tape = nx.Tape()
        loss = pretext_loss(tape, graph, params, head, ops, batch)
        tape.backward(loss)
        opt.step()
        history.append(float(loss.value[0, 0]))
    return FrozenEncoder(params, head, graph.fingerprint, history)
