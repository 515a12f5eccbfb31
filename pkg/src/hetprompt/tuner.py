"""Prompt tuning over a frozen encoder, prediction, metrics and baselines.

One tuning step::

    X~ = prompt_features(X, F)          feature prompt
    H~ = f_theta*(G, X~)                frozen encoder
    z  = aggregate(H~)                  multi-view node tokens
    z', q' = head(z), head(Q)           shared projection
    L  = InfoNCE(z', q'; tau) + lam * ||Q Q^T - I||_F^2
"""
from __future__ import annotations

import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .aggregation import AggregationParams, AggregationPlan, aggregate
from .encoder import FrozenEncoder, GraphOperators, kaiming
from .errors import CheckpointError, ConfigError, SplitError
from .hetgraph import HetGraph, neighbor_index
from .prompts import FeaturePrompt, VirtualClassPrompt, init_class_prompt, init_feature_prompt, prompt_features

PROMPT_CHECKPOINT_VERSION = 1
LR_RANGE = (1e-4, 5e-3)
PATIENCE_RANGE = (20, 100)


class ProjectionHead:
    """Single linear layer ``x W + b``."""

    def __init__(self, dim, seed=0, name="proj"):
        rng = np.random.default_rng(seed)
        self.W = nx.Param(kaiming(rng, dim, (dim, dim)), f"W_{name}")
        self.b = nx.Param(np.zeros((1, dim)), f"b_{name}")

    @classmethod
    def identity(cls, dim, name="proj"):
        head = cls(dim, name=name)
        head.W.value = np.eye(dim)
        return head

    def params(self):
        return [self.W, self.b]

    def __call__(self, tape, x):
        return x @ tape.watch(self.W) + tape.watch(self.b)

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) @ self.W.value + self.b.value


@dataclass
class TuneConfig:
    lr: float = 5e-3
    patience: int = 50
    lam: float = 0.01
    tau: float = 0.5
    max_epochs: int = 300
    seed: int = 0
    K: int = 5
    shared_head: bool = True
    inference_tau: bool = False

    def validate(self):
        # lr = 0 is allowed as a no-update evaluation run
        if self.lr != 0 and not LR_RANGE[0] <= self.lr <= LR_RANGE[1]:
            raise ConfigError(f"lr must lie in [{LR_RANGE[0]}, {LR_RANGE[1]}] (or be 0), got {self.lr}")
        if not PATIENCE_RANGE[0] <= self.patience <= PATIENCE_RANGE[1]:
            raise ConfigError(f"patience must lie in [{PATIENCE_RANGE[0]}, {PATIENCE_RANGE[1]}], got {self.patience}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be non-negative")
        return self


# ------------------------------------------------------------------ pieces

def cosine_logits(tape, z, q):
    return nx.l2_normalize_rows(z) @ nx.l2_normalize_rows(q).T


def prompt_template(v, c, tokens, Q, head: ProjectionHead, class_head: ProjectionHead = None):
    """(z'_v, q'_c) for target node ``v`` and class ``c``."""
    tokens = np.asarray(tokens, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if not 0 <= c < Q.shape[0]:
        raise ValueError(f"class index {c} out of range for {Q.shape[0]} classes")
    if not 0 <= v < tokens.shape[0]:
        raise ValueError(f"node index {v} out of range for {tokens.shape[0]} target nodes")
    return head.apply(tokens[v:v + 1])[0], (class_head or head).apply(Q[c:c + 1])[0]


def orthogonality(tape, Q):
    C = Q.shape[0]
    return nx.frobenius_norm_sq(Q @ Q.T - np.eye(C))


def tuning_loss(tape, z_proj, q_proj, Q, labeled, labels, tau, lam):
    """-sum_v log softmax_c(sim(z'_v, q'_c) / tau)[y_v] + lam ||Q Q^T - I||_F^2.

    ``z_proj`` holds a row per target node (or already only the labeled
    rows when ``labeled`` is None).
    """
    labels = np.asarray(labels, dtype=np.int64)
    C = q_proj.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in 0..{C - 1}")
    z = z_proj if labeled is None else nx.gather_rows(z_proj, labeled)
    logp = nx.row_log_softmax(nx.scale(cosine_logits(tape, z, q_proj), 1.0 / tau))
    con = nx.scale(nx.reduce_sum(nx.pick(logp, labels)), -1.0)
    loss = con + nx.scale(orthogonality(tape, Q), lam) if lam else con
    if not np.isfinite(loss.value).all():
        raise nx.NumericError("tuning loss is not finite")
    return loss


def class_probabilities(z_proj, q_proj, tau=None):
    """Row-wise softmax of cosine similarities (optionally divided by tau)."""
    z = np.asarray(z_proj, dtype=np.float64)
    q = np.asarray(q_proj, dtype=np.float64)
    zn = z / np.where((nz := np.linalg.norm(z, axis=1, keepdims=True)) > 0, nz, 1.0)
    qn = q / np.where((nq := np.linalg.norm(q, axis=1, keepdims=True)) > 0, nq, 1.0)
    s = zn @ qn.T
    if tau:
        s = s / tau
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------- metrics

@dataclass
class Metrics:
    macro_f1: float
    micro_f1: float
    precision: dict
    recall: dict
    f1: dict
    confusion: np.ndarray
    classes: tuple


def evaluate(predictions, gold, num_classes=None) -> Metrics:
    """Macro/micro F1 over the classes seen in gold or predictions."""
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ValueError(f"{pred.shape[0] if pred.ndim else 0} predictions vs {gold.shape[0] if gold.ndim else 0} gold labels")
    if pred.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    size = max(int(pred.max()), int(gold.max())) + 1
    if num_classes is not None:
        size = max(size, num_classes)
    cm = np.zeros((size, size), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    classes = tuple(int(c) for c in np.flatnonzero(cm.sum(axis=0) + cm.sum(axis=1)))
    precision, recall, f1 = {}, {}, {}
    for c in classes:
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        precision[c] = tp / (tp + fp) if tp + fp else 0.0
        recall[c] = tp / (tp + fn) if tp + fn else 0.0
        f1[c] = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    macro = float(np.mean([f1[c] for c in classes]))
    micro = float(np.trace(cm) / cm.sum())
    return Metrics(macro, micro, precision, recall, f1, cm, classes)


# ------------------------------------------------------------------- state

class PromptTuneState:
    """Everything prompt tuning trains, plus the frozen context it runs in."""

    def __init__(self, graph, enc: FrozenEncoder, config: TuneConfig, class_prompt: VirtualClassPrompt,
                 feature_prompt: FeaturePrompt, agg: AggregationParams, head: ProjectionHead,
                 class_head: ProjectionHead = None, plan=None, ops=None):
        self.graph = graph
        self.encoder = enc
        self.config = config
        self.class_prompt = class_prompt
        self.feature_prompt = feature_prompt
        self.agg = agg
        self.head = head
        self.class_head = class_head
        self.plan = plan or AggregationPlan(graph, neighbor_index(graph))
        self.ops = ops or GraphOperators(graph)
        self.epoch = 0
        self.best_epoch = 0
        self.best_val = -np.inf
        self.best = None
        self.initial = self.snapshot()
        self.loss_history = []
        self.val_history = []
        self.stopped_early = False
        self.optimizer = nx.Adam(self.params(), lr=config.lr)

    def params(self):
        out = self.class_prompt.params() + self.feature_prompt.params() + self.agg.params() + self.head.params()
        if self.class_head is not None:
            out += self.class_head.params()
        return out

    @property
    def num_trainable(self):
        return sum(p.size for p in self.params() if p.trainable)

    def snapshot(self):
        return [p.value.copy() for p in self.params()]

    def restore(self, snap):
        for p, v in zip(self.params(), snap):
            p.value = v.copy()

    # ------------------------------------------------------------- forward

    def forward(self, tape):
        """Projected node tokens (all target nodes), projected class tokens, Q, node tokens."""
        xs = prompt_features(tape, list(self.graph.features), self.feature_prompt)
        H = self.encoder.encode(self.graph, xs, tape, self.ops)
        tokens = aggregate(tape, H, self.plan, self.agg)
        Q = tape.watch(self.class_prompt.Q)
        z_proj = self.head(tape, tokens.z)
        q_proj = (self.class_head or self.head)(tape, Q)
        return z_proj, q_proj, Q, tokens

    def loss(self, tape, labeled, labels):
        z_proj, q_proj, Q, _ = self.forward(tape)
        return tuning_loss(tape, z_proj, q_proj, Q, labeled, labels, self.config.tau, self.config.lam)

    def node_tokens(self):
        tape = nx.Tape(enabled=False)
        return self.forward(tape)[3]

    def projected(self):
        tape = nx.Tape(enabled=False)
        z_proj, q_proj, _, _ = self.forward(tape)
        return z_proj.value, q_proj.value

    def predict_proba(self, nodes=None):
        z, q = self.projected()
        p = class_probabilities(z, q, self.config.tau if self.config.inference_tau else None)
        return p if nodes is None else p[np.asarray(nodes)]

    def predict(self, nodes=None):
        return np.argmax(self.predict_proba(nodes), axis=1)

    # ---------------------------------------------------------- checkpoint

    def save(self, path):
        meta = {
            "version": PROMPT_CHECKPOINT_VERSION,
            "K": self.feature_prompt.K,
            "num_classes": self.class_prompt.num_classes,
            "fingerprint": self.graph.fingerprint,
            "encoder_digest": self.encoder.digest(),
            "config": asdict(self.config),
            "names": [p.name for p in self.params()],
            "best_epoch": self.best_epoch,
        }
        arrays = {f"p{k}": p.value for k, p in enumerate(self.params())}
        buf = io.BytesIO()
        np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path, graph: HetGraph, enc: FrozenEncoder):
        try:
            data = np.load(path, allow_pickle=False)
            meta = json.loads(str(data["meta"]))
        except (OSError, ValueError, KeyError) as exc:
            raise CheckpointError(f"cannot read prompt checkpoint {path}: {exc}") from exc
        if meta.get("version") != PROMPT_CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported prompt checkpoint version {meta.get('version')}")
        if meta["fingerprint"] != graph.fingerprint:
            raise CheckpointError("prompt checkpoint was tuned on a different graph")
        enc.check_graph(graph)
        if meta["encoder_digest"] != enc.digest():
            raise CheckpointError("prompt checkpoint was tuned against a different encoder")
        config = TuneConfig(**meta["config"])
        state = _fresh_state(graph, enc, config, np.zeros((meta["num_classes"], enc.dim)))
        params = state.params()
        if [p.name for p in params] != meta["names"]:
            raise CheckpointError("prompt checkpoint layout does not match this graph")
        for k, p in enumerate(params):
            p.value = np.array(data[f"p{k}"], dtype=np.float64)
        state.best_epoch = meta.get("best_epoch", 0)
        return state


def _fresh_state(graph, enc, config, Q, plan=None, ops=None):
    seed = config.seed
    fp = init_feature_prompt(graph, config.K, seed=seed)
    index = None
    if plan is None:
        index = neighbor_index(graph)
        plan = AggregationPlan(graph, index)
    agg = AggregationParams(enc.dim, plan.type_names, plan.metapath_names, seed=seed + 1)
    head = ProjectionHead(enc.dim, seed=seed + 2)
    class_head = None if config.shared_head else ProjectionHead(enc.dim, seed=seed + 3, name="proj_class")
    return PromptTuneState(graph, enc, config, VirtualClassPrompt(Q), fp, agg, head, class_head, plan, ops)


def _check_split(graph, labeled, num_classes):
    labels = graph.labels[labeled]
    if (labels < 0).any():
        raise SplitError("labeled split contains unlabeled nodes")
    missing = sorted(set(range(num_classes)) - set(labels.tolist()))
    if missing:
        raise SplitError(f"classes {missing} have no labeled nodes")
    return labels


def macro_f1_on(pred_all, graph, nodes, num_classes):
    return evaluate(pred_all[nodes], graph.labels[nodes], num_classes).macro_f1


def tune(graph: HetGraph, enc: FrozenEncoder, split, config: TuneConfig = None, plan=None, ops=None,
         callback=None) -> PromptTuneState:
    """Train the prompts, aggregation and projection; keep the best-validation snapshot.

    Epoch ``e`` evaluates the parameters after ``e`` updates; the returned
    state holds the earliest parameters with the highest validation
    Macro-F1. The encoder is never updated.
    """
    config = (config or TuneConfig()).validate()
    enc.check_graph(graph)
    C = graph.num_classes
    labeled = np.asarray(split.labeled)
    labels = _check_split(graph, labeled, C)
    val = np.asarray(split.val)
    H = enc.encode(graph, ops=ops)
    t0 = graph.offsets[graph.target_type]
    Q = init_class_prompt(H[t0:t0 + graph.num_target], labeled, labels, C).Q.value
    state = _fresh_state(graph, enc, config, Q, plan, ops)
    digest = enc.digest()
    for epoch in range(config.max_epochs + 1):
        state.epoch = epoch
        for p in state.params():
            p.zero_grad()
        tape = nx.Tape()
        z_proj, q_proj, Qv, _ = state.forward(tape)
        loss = tuning_loss(tape, z_proj, q_proj, Qv, labeled, labels, config.tau, config.lam)
        probs = class_probabilities(z_proj.value, q_proj.value, config.tau if config.inference_tau else None)
        val_f1 = macro_f1_on(np.argmax(probs, axis=1), graph, val, C)
        state.loss_history.append(float(loss.value[0, 0]))
        state.val_history.append(val_f1)
        if val_f1 > state.best_val:
            state.best_val = val_f1
            state.best_epoch = epoch
            state.best = state.snapshot()
        if callback is not None:
            callback(state, epoch, float(loss.value[0, 0]), val_f1)
        if epoch - state.best_epoch >= config.patience:
            state.stopped_early = True
            break
        if epoch == config.max_epochs:
            break
        tape.backward(loss)
        if config.lr > 0:
            state.optimizer.step()
    state.restore(state.best)
    if enc.digest() != digest:
        raise AssertionError("frozen encoder parameters changed during tuning")
    return state


def predict_proba(state: PromptTuneState, nodes=None):
    return state.predict_proba(nodes)


def predict(state: PromptTuneState, nodes=None):
    return state.predict(nodes)


# --------------------------------------------------------------- baselines

@dataclass
class FinetuneResult:
    metrics: Metrics
    val_metrics: Metrics
    best_epoch: int
    loss_history: list
    val_history: list
    num_trainable: int
    params: object = field(repr=False, default=None)
    head: object = field(repr=False, default=None)


def baseline_finetune(graph: HetGraph, enc: FrozenEncoder, split, config: TuneConfig = None,
                      ops=None) -> FinetuneResult:
    """Fine-tune a copy of theta* plus a linear head with cross-entropy.

    Uses the same optimizer, learning rate, patience and epoch budget as
    prompt tuning.
    """
    config = (config or TuneConfig()).validate()
    enc.check_graph(graph)
    C = graph.num_classes
    labeled = np.asarray(split.labeled)
    labels = _check_split(graph, labeled, C)
    val, test = np.asarray(split.val), np.asarray(split.test)
    ops = ops or GraphOperators(graph)
    theta = enc.params.copy(trainable=True)
    rng = np.random.default_rng(config.seed + 4)
    W = nx.Param(kaiming(rng, enc.dim, (enc.dim, C)), "W_head")
    b = nx.Param(np.zeros((1, C)), "b_head")
    params = theta.params() + [W, b]
    opt = nx.Adam(params, lr=config.lr)
    t0 = graph.offsets[graph.target_type]
    n_t = graph.num_target
    features = list(graph.features)
    from .encoder import encode

    best, best_epoch, best_val = None, 0, -np.inf
    losses, vals = [], []
    for epoch in range(config.max_epochs + 1):
        for p in params:
            p.zero_grad()
        tape = nx.Tape()
        H = encode(graph, features, theta, tape, ops)
        logits = nx.slice_rows(H, t0, t0 + n_t) @ tape.watch(W) + tape.watch(b)
        logp = nx.row_log_softmax(nx.gather_rows(logits, labeled))
        loss = nx.scale(nx.reduce_sum(nx.pick(logp, labels)), -1.0 / len(labeled))
        pred = np.argmax(logits.value, axis=1)
        val_f1 = macro_f1_on(pred, graph, val, C)
        losses.append(float(loss.value[0, 0]))
        vals.append(val_f1)
        if val_f1 > best_val:
            best_val, best_epoch = val_f1, epoch
            best = [p.value.copy() for p in params]
        if epoch - best_epoch >= config.patience or epoch == config.max_epochs:
            break
        tape.backward(loss)
        if config.lr > 0:
            opt.step()
    for p, v in zip(params, best):
        p.value = v
    H = encode(graph, features, theta, None, ops)
    pred = np.argmax(H[t0:t0 + n_t] @ W.value + b.value, axis=1)
    return FinetuneResult(
        metrics=evaluate(pred[test], graph.labels[test], C),
        val_metrics=evaluate(pred[val], graph.labels[val], C),
        best_epoch=best_epoch, loss_history=losses, val_history=vals,
        num_trainable=sum(p.size for p in params), params=theta, head=(W, b))


def raw_feature_baseline(graph: HetGraph, split, seed=0) -> Metrics:
    """Multinomial logistic regression on the raw target-type features."""
    from sklearn.linear_model import LogisticRegression

    x = graph.features[graph.target_type]
    labeled = np.asarray(split.labeled)
    clf = LogisticRegression(max_iter=5000, random_state=seed)
    clf.fit(x[labeled], graph.labels[labeled])
    test = np.asarray(split.test)
    return evaluate(clf.predict(x[test]), graph.labels[test], graph.num_classes)


def count_prompt_parameters(graph: HetGraph, dim: int, K: int, shared_head=True) -> int:
    """Trainable parameters prompt tuning adds for this graph."""
    index = neighbor_index(graph)
    n_types = len(index.type_adj)
    n_paths = len(index.metapath_adj)
    C = graph.num_classes
    feat = K * sum(graph.feature_dims)
    agg = (n_types + n_paths) * 2 * dim + 2 * (dim + dim * dim + dim) + 2 * dim * dim + dim
    heads = (1 if shared_head else 2) * (dim * dim + dim)
    return C * dim + feat + agg + heads


@dataclass
class RunRecord:
    """One tuning run as written to the results file."""

    dataset: str
    seed: int
    shots: int
    K: int
    lam: float
    tau: float
    lr: float
    epochs: int
    best_epoch: int
    macro_f1: float
    micro_f1: float
    wall_clock: float
    prompt_params: int
    finetune_params: int


def run_once(graph, enc, split, config, dataset="graph", ops=None, plan=None):
    """Tune, evaluate on the test split and return (state, test Metrics, RunRecord)."""
    start = time.perf_counter()
    state = tune(graph, enc, split, config, plan=plan, ops=ops)
    test = np.asarray(split.test)
    metrics = evaluate(state.predict(test), graph.labels[test], graph.num_classes)
    elapsed = time.perf_counter() - start
    record = RunRecord(dataset, config.seed, int(len(split.labeled) // graph.num_classes), config.K,
                       config.lam, config.tau, config.lr, len(state.loss_history), state.best_epoch,
                       metrics.macro_f1, metrics.micro_f1, elapsed, state.num_trainable,
                       enc.params.num_parameters + enc.dim * graph.num_classes + graph.num_classes)
    return state, metrics, record
