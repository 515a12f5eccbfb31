"""Line-oriented, tab-separated graph file format.

::

    #nodetype <name> <count> <feature_dim>
    #edgetype <name> <src_type> <dst_type>
    #target <type>
    #metapath <name> <edgetype[:rev]> ...
    #spec <key>=<value>
    N <type> <local_index> <f_1> ... <f_dA>
    E <edgetype> <src_index> <dst_index>
    L <local_index> <class>

Blank lines are ignored. Floats are written with ``repr`` so a dump/load
cycle reproduces every value exactly.
"""
from __future__ import annotations

import numpy as np

from .hetgraph import GraphValidationError, HetGraph, MetapathError


class GraphFormatError(ValueError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def format_graph(graph: HetGraph, spec=None) -> str:
    lines = []
    for key, value in (spec or {}).items():
        lines.append(f"#spec\t{key}={value}")
    for nt in graph.node_types:
        lines.append(f"#nodetype\t{nt.name}\t{graph.node_counts[nt.id]}\t{graph.feature_dims[nt.id]}")
    for et in graph.edge_types:
        lines.append(f"#edgetype\t{et.name}\t{graph.node_types[et.src].name}\t{graph.node_types[et.dst].name}")
    lines.append(f"#target\t{graph.target_name}")
    for mp in graph.metapaths:
        steps = [graph.edge_types[e].name + (":rev" if rev else "") for e, rev in mp.steps]
        lines.append("\t".join(["#metapath", mp.name] + steps))
    for nt in graph.node_types:
        x = graph.features[nt.id]
        for i in range(x.shape[0]):
            lines.append("\t".join(["N", nt.name, str(i)] + [repr(float(v)) for v in x[i]]))
    for et in graph.edge_types:
        for s, d in graph.edges[et.id]:
            lines.append(f"E\t{et.name}\t{int(s)}\t{int(d)}")
    if graph.labels is not None:
        for i, y in enumerate(graph.labels):
            if y >= 0:
                lines.append(f"L\t{i}\t{int(y)}")
    return "\n".join(lines) + "\n"


def _int(tok, lineno, what):
    try:
        return int(tok)
    except ValueError:
        raise GraphFormatError(lineno, f"{what} must be an integer, got {tok!r}") from None


def parse_graph(text: str):
    """Parse file contents; returns ``(graph, spec)`` where spec holds the
    ``#spec`` key=value pairs as strings."""
    node_types = {}
    dims = {}
    edge_types = {}
    target = None
    metapaths = {}
    spec = {}
    rows = {}
    edges = {}
    labels = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        tok = line.split("\t") if "\t" in line else line.split()
        head = tok[0]
        if head.startswith("#"):
            if head == "#nodetype":
                if len(tok) != 4:
                    raise GraphFormatError(lineno, "#nodetype needs <name> <count> <feature_dim>")
                if tok[1] in node_types:
                    raise GraphFormatError(lineno, f"node type {tok[1]!r} declared twice")
                node_types[tok[1]] = _int(tok[2], lineno, "count")
                dims[tok[1]] = _int(tok[3], lineno, "feature_dim")
            elif head == "#edgetype":
                if len(tok) != 4:
                    raise GraphFormatError(lineno, "#edgetype needs <name> <src_type> <dst_type>")
                if tok[1] in edge_types:
                    raise GraphFormatError(lineno, f"edge type {tok[1]!r} declared twice")
                edge_types[tok[1]] = (tok[2], tok[3])
            elif head == "#target":
                if len(tok) != 2:
                    raise GraphFormatError(lineno, "#target needs exactly one type name")
                target = tok[1]
            elif head == "#metapath":
                if len(tok) < 3:
                    raise GraphFormatError(lineno, "#metapath needs a name and steps")
                metapaths[tok[1]] = tok[2:]
            elif head == "#spec":
                for item in tok[1:]:
                    key, eq, value = item.partition("=")
                    if not eq:
                        raise GraphFormatError(lineno, f"#spec entry {item!r} is not key=value")
                    spec[key] = value
            else:
                raise GraphFormatError(lineno, f"unknown directive {head!r}")
        elif head == "N":
            if len(tok) < 3:
                raise GraphFormatError(lineno, "N row needs <type> <local_index>")
            name = tok[1]
            if name not in node_types:
                raise GraphFormatError(lineno, f"N row for undeclared node type {name!r}")
            i = _int(tok[2], lineno, "local_index")
            vals = tok[3:]
            if len(vals) != dims[name]:
                raise GraphFormatError(lineno, f"{name!r} rows need {dims[name]} features, got {len(vals)}")
            if not 0 <= i < node_types[name]:
                raise GraphFormatError(lineno, f"index {i} out of range for {name!r}")
            if (name, i) in rows:
                raise GraphFormatError(lineno, f"duplicate N row for {name}[{i}]")
            try:
                rows[(name, i)] = [float(v) for v in vals]
            except ValueError:
                raise GraphFormatError(lineno, "feature values must be numbers") from None
        elif head == "E":
            if len(tok) != 4:
                raise GraphFormatError(lineno, "E row needs <edgetype> <src_index> <dst_index>")
            if tok[1] not in edge_types:
                raise GraphFormatError(lineno, f"E row for undeclared edge type {tok[1]!r}")
            edges.setdefault(tok[1], []).append(
                (_int(tok[2], lineno, "src_index"), _int(tok[3], lineno, "dst_index")))
        elif head == "L":
            if len(tok) != 3:
                raise GraphFormatError(lineno, "L row needs <local_index> <class>")
            labels[_int(tok[1], lineno, "local_index")] = _int(tok[2], lineno, "class")
        else:
            raise GraphFormatError(lineno, f"unknown row kind {head!r}")
    if target is None:
        raise GraphFormatError(0, "missing #target directive")
    if target not in node_types:
        raise GraphFormatError(0, f"#target names undeclared type {target!r}")
    features = {}
    for name, n in node_types.items():
        x = np.zeros((n, dims[name]))
        for i in range(n):
            if (name, i) not in rows:
                raise GraphFormatError(0, f"missing N row for {name}[{i}]")
            x[i] = rows[(name, i)]
        features[name] = x
    lab = None
    if labels:
        lab = np.full(node_types[target], -1, dtype=np.int64)
        for i, y in labels.items():
            if not 0 <= i < node_types[target]:
                raise GraphFormatError(0, f"label index {i} out of range for {target!r}")
            lab[i] = y
    try:
        graph = HetGraph.build(node_types, edge_types, edges, features, target, lab, metapaths)
    except (GraphValidationError, MetapathError) as exc:
        raise GraphFormatError(0, str(exc)) from exc
    return graph, spec


def load_graph(path):
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


def dump_graph(graph: HetGraph, path, spec=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_graph(graph, spec))
