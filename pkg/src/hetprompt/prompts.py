"""Virtual class prompt and heterogeneous feature prompt."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ConfigError


class PromptInitError(ValueError):
    pass


class VirtualClassPrompt:
    """Trainable C x d class-token matrix ``Q``."""

    def __init__(self, tokens):
        self.Q = nx.Param(tokens, "Q")

    @property
    def num_classes(self):
        return self.Q.shape[0]

    def params(self):
        return [self.Q]


def init_class_prompt(embeddings, labeled, labels, num_classes=None) -> VirtualClassPrompt:
    """q_c = mean of the embeddings of labeled nodes in class c.

    ``embeddings`` holds one row per target node; ``labeled`` indexes rows and
    ``labels`` gives their classes (same length as ``labeled``).
    """
    h = np.asarray(embeddings, dtype=np.float64)
    labeled = np.asarray(labeled, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labeled.shape != labels.shape:
        raise PromptInitError("labeled indices and labels must have the same length")
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    Q = np.zeros((C, h.shape[1]))
    for c in range(C):
        rows = labeled[labels == c]
        if len(rows) == 0:
            raise PromptInitError(f"class {c} has no labeled nodes")
        Q[c] = h[rows].mean(axis=0)
    return VirtualClassPrompt(Q)


class FeaturePrompt:
    """K trainable tokens per node type, each in that type's raw feature space."""

    def __init__(self, tokens, type_names):
        self.type_names = tuple(type_names)
        self.tokens = [nx.Param(t, f"F_{name}") for t, name in zip(tokens, self.type_names)]
        ks = {t.shape[0] for t in self.tokens}
        if len(ks) != 1:
            raise ConfigError("every node type must have the same token count K")
        self.K = ks.pop()

    def params(self):
        return list(self.tokens)

    @classmethod
    def zeros(cls, feature_dims, K, type_names):
        return cls([np.zeros((K, d)) for d in feature_dims], type_names)


def init_feature_prompt(feature_dims, K, seed=0, type_names=None) -> FeaturePrompt:
    """Kaiming-normal tokens: zero mean, variance 2 / d_A.

    ``feature_dims`` may be a sequence of ints or a graph-like object with a
    ``feature_dims`` attribute.
    """
    if K < 1:
        raise ConfigError(f"token count K must be at least 1, got {K}")
    if hasattr(feature_dims, "feature_dims"):
        graph = feature_dims
        feature_dims = graph.feature_dims
        type_names = type_names or [nt.name for nt in graph.node_types]
    type_names = type_names or [str(k) for k in range(len(feature_dims))]
    rng = np.random.default_rng(seed)
    tokens = [rng.normal(0.0, np.sqrt(2.0 / max(d, 1)), size=(K, d)) for d in feature_dims]
    return FeaturePrompt(tokens, type_names)


def attention_weights(tape, x, tokens):
    """w[i, k] = softmax_k LeakyReLU(f_k . x_i)."""
    return nx.row_softmax(nx.leaky_relu(x @ tokens.T))


def prompt_features(tape, features, prompt: FeaturePrompt):
    """x~_i = x_i + sum_k w[i, k] f_k for every node type.

    ``features`` is a list of per-type matrices. Returns a list of Vars.
    """
    if len(features) != len(prompt.tokens):
        raise nx.DimensionError(f"{len(features)} feature matrices but {len(prompt.tokens)} token sets")
    out = []
    for name, x, tok in zip(prompt.type_names, features, prompt.tokens):
        xv = x if isinstance(x, nx.Var) else tape.constant(x)
        if xv.shape[1] != tok.shape[1]:
            raise nx.DimensionError(
                f"node type {name!r}: features have dimension {xv.shape[1]}, tokens have {tok.shape[1]}")
        f = tape.watch(tok)
        out.append(xv + attention_weights(tape, xv, f) @ f)
    return out


def prompted_embeddings(tape, graph, prompt: FeaturePrompt, enc, ops=None):
    """H~ = f_theta*(G, X~); gradients reach the tokens, never theta*."""
    enc.check_graph(graph)
    return enc.encode(graph, prompt_features(tape, list(graph.features), prompt), tape, ops)
