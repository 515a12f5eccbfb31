"""Typed graph substrate: node/edge types, schema, metapaths, neighbor lists.

Node indices are local to their type; a global id is ``(type, index)``.
Stacked matrices over all nodes order the types by id, so the rows of type
``A`` live at ``graph.offsets[A] : graph.offsets[A] + graph.node_counts[A]``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class GraphValidationError(ValueError):
    pass


class MetapathError(ValueError):
    pass


@dataclass(frozen=True)
class NodeType:
    id: int
    name: str


@dataclass(frozen=True)
class EdgeType:
    id: int
    name: str
    src: int
    dst: int


@dataclass(frozen=True)
class Metapath:
    """Ordered relation steps; ``reverse`` walks an edge type dst -> src."""

    name: str
    steps: tuple  # of (edge type id, reverse flag)

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class NetworkSchema:
    node_types: tuple
    relations: frozenset  # of (name, src name, dst name)


def _readonly(arr):
    arr = np.array(arr)
    arr.flags.writeable = False
    return arr


class HetGraph:
    """Immutable heterogeneous graph.

    Build with :meth:`HetGraph.build`, which takes everything by type name
    and validates on construction. Duplicate edges are dropped.
    """

    def __init__(self, node_types, edge_types, node_counts, edges, features,
                 target_type, labels, metapaths, num_classes=None):
        self.node_types = tuple(node_types)
        self.edge_types = tuple(edge_types)
        self.node_counts = tuple(int(n) for n in node_counts)
        self.edges = tuple(_readonly(e) for e in edges)
        self.features = tuple(_readonly(np.asarray(x, dtype=np.float64)) for x in features)
        self.target_type = int(target_type)
        self.labels = None if labels is None else _readonly(np.asarray(labels, dtype=np.int64))
        self.metapaths = tuple(metapaths)
        self._num_classes = num_classes
        self.validate()

    @classmethod
    def build(cls, node_types, edge_types, edges, features, target, labels=None, metapaths=None):
        """Construct from names.

        ``node_types`` maps name -> count, ``edge_types`` maps name ->
        (src type name, dst type name), ``edges`` maps edge type name ->
        iterable of (src index, dst index), ``features`` maps type name ->
        matrix, ``labels`` is a length-|V_T| sequence with -1 for unlabeled,
        and ``metapaths`` maps name -> list of ``"edgetype"`` or
        ``"edgetype:rev"`` step strings.
        """
        nts = [NodeType(k, name) for k, name in enumerate(node_types)]
        by_name = {nt.name: nt.id for nt in nts}
        if len(by_name) != len(nts):
            raise GraphValidationError("node type names must be unique")
        ets = []
        for k, (name, (src, dst)) in enumerate(edge_types.items()):
            for t in (src, dst):
                if t not in by_name:
                    raise GraphValidationError(f"edge type {name!r} refers to unknown node type {t!r}")
            ets.append(EdgeType(k, name, by_name[src], by_name[dst]))
        counts = [int(node_types[nt.name]) for nt in nts]
        edge_arrays = []
        for et in ets:
            pairs = np.asarray(list(edges.get(et.name, [])), dtype=np.int64).reshape(-1, 2)
            edge_arrays.append(pairs)
        unknown = set(edges) - {et.name for et in ets}
        if unknown:
            raise GraphValidationError(f"edges given for undeclared edge types {sorted(unknown)}")
        feats = []
        for nt in nts:
            if nt.name not in features:
                raise GraphValidationError(f"missing features for node type {nt.name!r}")
            x = np.asarray(features[nt.name], dtype=np.float64)
            if x.ndim == 1 and counts[nt.id] == 0:
                x = x.reshape(0, 0)
            feats.append(x)
        if target not in by_name:
            raise GraphValidationError(f"unknown target type {target!r}")
        et_by_name = {et.name: et for et in ets}
        mps = [parse_metapath(name, steps, et_by_name) for name, steps in (metapaths or {}).items()]
        return cls(nts, ets, counts, edge_arrays, feats, by_name[target], labels, mps)

    # ------------------------------------------------------------ validation

    def validate(self):
        n_types, n_rel = len(self.node_types), len(self.edge_types)
        if n_types + n_rel <= 2:
            raise GraphValidationError(
                f"not heterogeneous: {n_types} node types + {n_rel} edge types must exceed 2")
        for k, nt in enumerate(self.node_types):
            if nt.id != k:
                raise GraphValidationError(f"node type ids must be dense, {nt.name!r} has id {nt.id}")
        if len({nt.name for nt in self.node_types}) != n_types:
            raise GraphValidationError("node type names must be unique")
        for k, et in enumerate(self.edge_types):
            if et.id != k:
                raise GraphValidationError(f"edge type ids must be dense, {et.name!r} has id {et.id}")
            if not (0 <= et.src < n_types and 0 <= et.dst < n_types):
                raise GraphValidationError(f"edge type {et.name!r} has an unknown endpoint type")
        if len({et.name for et in self.edge_types}) != n_rel:
            raise GraphValidationError("edge type names must be unique")
        if len(self.edges) != n_rel:
            raise GraphValidationError("one edge list per edge type is required")
        deduped = []
        for et, e in zip(self.edge_types, self.edges):
            if e.ndim != 2 or e.shape[1] != 2:
                raise GraphValidationError(f"edges of {et.name!r} must be (src, dst) pairs")
            ns, nd = self.node_counts[et.src], self.node_counts[et.dst]
            if e.size:
                bad = (e[:, 0] < 0) | (e[:, 0] >= ns) | (e[:, 1] < 0) | (e[:, 1] >= nd)
                if bad.any():
                    row = int(np.flatnonzero(bad)[0])
                    raise GraphValidationError(
                        f"edge {row} of {et.name!r} = {tuple(int(v) for v in e[row])} is out of range "
                        f"for {self.node_types[et.src].name}[{ns}] -> {self.node_types[et.dst].name}[{nd}]")
                e = np.unique(e, axis=0)
            deduped.append(_readonly(e.reshape(-1, 2)))
        self.edges = tuple(deduped)
        if len(self.features) != n_types:
            raise GraphValidationError("one feature matrix per node type is required")
        for nt, x in zip(self.node_types, self.features):
            if x.ndim != 2 or x.shape[0] != self.node_counts[nt.id]:
                raise GraphValidationError(
                    f"features of {nt.name!r} have shape {x.shape}, need {self.node_counts[nt.id]} rows")
            if not np.isfinite(x).all():
                raise GraphValidationError(f"features of {nt.name!r} contain non-finite values")
        if not 0 <= self.target_type < n_types:
            raise GraphValidationError("target type out of range")
        if self.labels is not None:
            n_t = self.node_counts[self.target_type]
            if self.labels.shape != (n_t,):
                raise GraphValidationError(f"labels must have length {n_t}, got {self.labels.shape}")
            if (self.labels < -1).any():
                raise GraphValidationError("labels must be class ids >= 0 or -1 for unlabeled")
        for mp in self.metapaths:
            _check_metapath(self, mp)

    # ------------------------------------------------------------- accessors

    def type_id(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            return int(name)
        for nt in self.node_types:
            if nt.name == name:
                return nt.id
        raise KeyError(f"unknown node type {name!r}")

    def edge_type(self, name) -> EdgeType:
        for et in self.edge_types:
            if et.name == name:
                return et
        raise KeyError(f"unknown edge type {name!r}")

    def metapath(self, name) -> Metapath:
        for mp in self.metapaths:
            if mp.name == name:
                return mp
        raise KeyError(f"unknown metapath {name!r}")

    @property
    def target_name(self) -> str:
        return self.node_types[self.target_type].name

    @property
    def num_target(self) -> int:
        return self.node_counts[self.target_type]

    @property
    def num_nodes(self) -> int:
        return sum(self.node_counts)

    @property
    def offsets(self):
        return tuple(int(v) for v in np.cumsum((0,) + self.node_counts[:-1]))

    @property
    def feature_dims(self):
        return tuple(x.shape[1] for x in self.features)

    @property
    def num_classes(self) -> int:
        if self._num_classes is not None:
            return self._num_classes
        if self.labels is None or (self.labels < 0).all():
            return 0
        return int(self.labels.max()) + 1

    def relation_matrix(self, edge_type_id: int, reverse: bool = False):
        et = self.edge_types[edge_type_id]
        e = self.edges[edge_type_id]
        shape = (self.node_counts[et.src], self.node_counts[et.dst])
        m = sp.csr_matrix((np.ones(len(e), dtype=bool), (e[:, 0], e[:, 1])), shape=shape)
        return m.T.tocsr() if reverse else m

    def with_features(self, features):
        """Same structure with replacement feature matrices."""
        return HetGraph(self.node_types, self.edge_types, self.node_counts, self.edges,
                        features, self.target_type, self.labels, self.metapaths, self._num_classes)

    @cached_property
    def fingerprint(self) -> str:
        """SHA-256 over a canonical binary encoding of the whole graph."""
        h = hashlib.sha256()
        for nt in self.node_types:
            h.update(f"N{nt.id}:{nt.name}:{self.node_counts[nt.id]};".encode())
        for et in self.edge_types:
            h.update(f"E{et.id}:{et.name}:{et.src}:{et.dst};".encode())
            h.update(np.ascontiguousarray(self.edges[et.id], dtype="<i8").tobytes())
        for x in self.features:
            h.update(f"F{x.shape};".encode())
            h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
        h.update(f"T{self.target_type};".encode())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        for mp in self.metapaths:
            h.update(f"M{mp.name}:{mp.steps};".encode())
        return h.hexdigest()

    def __repr__(self):
        types = ", ".join(f"{nt.name}={n}" for nt, n in zip(self.node_types, self.node_counts))
        return f"HetGraph({types}; target={self.target_name}; metapaths={[m.name for m in self.metapaths]})"


def parse_metapath(name, steps, edge_types_by_name) -> Metapath:
    parsed = []
    for step in steps:
        if isinstance(step, tuple):
            et_name, rev = step
        else:
            et_name, _, flag = str(step).partition(":")
            if flag not in ("", "rev"):
                raise MetapathError(f"metapath {name!r}: bad step flag {step!r}")
            rev = flag == "rev"
        if et_name not in edge_types_by_name:
            raise MetapathError(f"metapath {name!r}: unknown edge type {et_name!r}")
        parsed.append((edge_types_by_name[et_name].id, bool(rev)))
    return Metapath(name, tuple(parsed))


def _step_types(graph, step):
    et = graph.edge_types[step[0]]
    return (et.dst, et.src) if step[1] else (et.src, et.dst)


def _check_metapath(graph, mp: Metapath):
    if len(mp.steps) < 2:
        raise MetapathError(f"metapath {mp.name!r} needs at least 2 steps")
    for eid, _ in mp.steps:
        if not 0 <= eid < len(graph.edge_types):
            raise MetapathError(f"metapath {mp.name!r}: edge type id {eid} out of range")
    prev = None
    for k, step in enumerate(mp.steps):
        a, b = _step_types(graph, step)
        if prev is not None and a != prev:
            raise MetapathError(
                f"metapath {mp.name!r}: step {k} starts at {graph.node_types[a].name!r} "
                f"but step {k - 1} ends at {graph.node_types[prev].name!r}")
        prev = b
    start = _step_types(graph, mp.steps[0])[0]
    if start != graph.target_type or prev != graph.target_type:
        raise MetapathError(f"metapath {mp.name!r} must start and end at the target type")


def metapath_types(graph, mp: Metapath):
    """Node type ids visited by the metapath, e.g. [P, A, P]."""
    types = [_step_types(graph, mp.steps[0])[0]]
    for step in mp.steps:
        types.append(_step_types(graph, step)[1])
    return types


def build_schema(graph: HetGraph) -> NetworkSchema:
    graph.validate()
    names = tuple(nt.name for nt in graph.node_types)
    rels = frozenset((et.name, names[et.src], names[et.dst]) for et in graph.edge_types)
    return NetworkSchema(names, rels)


def compose_metapath(graph: HetGraph, path: Metapath):
    """Boolean target x target adjacency realized by ``path``, diagonal removed.

    Returned as a CSR matrix with sorted indices.
    """
    _check_metapath(graph, path)
    acc = None
    for step in path.steps:
        rel = graph.relation_matrix(step[0], reverse=step[1]).astype(np.int64)
        acc = rel if acc is None else acc @ rel
        acc.data = np.ones_like(acc.data)
        acc.eliminate_zeros()
    acc = acc.tolil()
    acc.setdiag(0)
    out = acc.tocsr().astype(bool)
    out.eliminate_zeros()
    out.sort_indices()
    return out


@dataclass(frozen=True)
class NeighborIndex:
    """Per-target-node neighbor sets, stored as CSR rows.

    ``type_adj[name]`` is |V_T| x |V_A|; ``metapath_adj[name]`` is |V_T| x |V_T|.
    Self-indices are never stored.
    """

    type_adj: dict
    metapath_adj: dict

    @staticmethod
    def _row(m, i):
        return m.indices[m.indptr[i]:m.indptr[i + 1]].copy()

    def type_neighbors(self, type_name, i):
        return self._row(self.type_adj[type_name], i)

    def metapath_neighbors(self, name, i):
        return self._row(self.metapath_adj[name], i)

    @property
    def adjacent_types(self):
        return tuple(self.type_adj)

    @property
    def metapath_names(self):
        return tuple(self.metapath_adj)


def adjacent_types(graph: HetGraph):
    """Type ids sharing a relation with the target type, in id order."""
    t = graph.target_type
    out = set()
    for et in graph.edge_types:
        if et.src == t:
            out.add(et.dst)
        if et.dst == t:
            out.add(et.src)
    return sorted(out)


def index_type_neighbors(graph: HetGraph) -> NeighborIndex:
    t = graph.target_type
    n_t = graph.num_target
    type_adj = {}
    for a in adjacent_types(graph):
        acc = sp.csr_matrix((n_t, graph.node_counts[a]), dtype=bool)
        for et in graph.edge_types:
            if et.src == t and et.dst == a:
                acc = acc + graph.relation_matrix(et.id)
            if et.dst == t and et.src == a:
                acc = acc + graph.relation_matrix(et.id, reverse=True)
        if a == t:
            acc = acc.tolil()
            acc.setdiag(False)
            acc = acc.tocsr()
        acc = acc.astype(bool)
        acc.eliminate_zeros()
        acc.sort_indices()
        type_adj[graph.node_types[a].name] = acc
    return NeighborIndex(type_adj, {})


def neighbor_index(graph: HetGraph) -> NeighborIndex:
    """Type view plus one metapath view per metapath declared on the graph."""
    idx = index_type_neighbors(graph)
    mp = {m.name: compose_metapath(graph, m) for m in graph.metapaths}
    return NeighborIndex(idx.type_adj, mp)
