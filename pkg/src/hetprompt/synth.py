"""Typed stochastic-block graphs shaped like a small citation network,
and N-shot splits over their target nodes."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, SplitError
from .hetgraph import HetGraph

SHOT_CHOICES = (1, 5, 20, 40, 60)


@dataclass
class SyntheticSpec:
    """Paper/author/subject graph with planted classes.

    Papers get a uniform random class; authors a uniform random latent class.
    A paper-author edge appears with probability ``p_in`` when the classes
    agree and ``p_out`` otherwise. The first ``num_classes`` subjects belong
    to one class each and the rest are distractors; each paper picks its
    class subject with probability ``subject_affinity``, otherwise a uniform
    random subject. Paper and author features are a class mean of norm
    ``signal`` plus unit Gaussian noise; subject features are pure noise.
    """

    num_papers: int = 400
    num_authors: int = 700
    num_subjects: int = 6
    num_classes: int = 3
    p_in: float = 0.05
    p_out: float = 0.002
    signal: float = 1.5
    paper_dim: int = 512
    author_dim: int = 128
    subject_dim: int = 16
    subject_affinity: float = 0.5
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if not 0 <= self.p_out <= self.p_in <= 1:
            raise ConfigError(f"need 0 <= p_out <= p_in <= 1, got p_out={self.p_out}, p_in={self.p_in}")
        if self.signal < 0:
            raise ConfigError("signal strength must be non-negative")
        if self.num_subjects < self.num_classes:
            raise ConfigError("need at least one subject per class")
        if min(self.num_papers, self.num_authors) < self.num_classes:
            raise ConfigError("need at least as many papers and authors as classes")
        if min(self.paper_dim, self.author_dim, self.subject_dim) < 1:
            raise ConfigError("feature dimensions must be positive")
        if not 0 <= self.subject_affinity <= 1:
            raise ConfigError("subject_affinity must be a probability")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in d.items():
            if key not in kinds:
                raise ConfigError(f"unknown synthetic spec key {key!r}")
            out[key] = float(value) if kinds[key] == "float" else int(value)
        return cls(**out)


ACM_MINI = SyntheticSpec()


def _class_means(rng, num_classes, dim, norm):
    raw = rng.normal(size=(num_classes, dim))
    return norm * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def generate(spec: SyntheticSpec = ACM_MINI) -> HetGraph:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    y = rng.integers(0, C, size=spec.num_papers)
    z = rng.integers(0, C, size=spec.num_authors)
    prob = np.where(y[:, None] == z[None, :], spec.p_in, spec.p_out)
    hit = rng.random(prob.shape) < prob
    pa = np.argwhere(hit)  # (paper, author)
    own = rng.random(spec.num_papers) < spec.subject_affinity
    subj = np.where(own, y, rng.integers(0, spec.num_subjects, size=spec.num_papers))
    ps = np.column_stack([np.arange(spec.num_papers), subj])

    x_p = _class_means(rng, C, spec.paper_dim, spec.signal)[y] + rng.normal(size=(spec.num_papers, spec.paper_dim))
    x_a = _class_means(rng, C, spec.author_dim, spec.signal)[z] + rng.normal(size=(spec.num_authors, spec.author_dim))
    x_s = rng.normal(size=(spec.num_subjects, spec.subject_dim))

    return HetGraph.build(
        node_types={"paper": spec.num_papers, "author": spec.num_authors, "subject": spec.num_subjects},
        edge_types={"write": ("author", "paper"), "belong": ("paper", "subject")},
        edges={"write": pa[:, ::-1], "belong": ps},
        features={"paper": x_p, "author": x_a, "subject": x_s},
        target="paper",
        labels=y,
        metapaths={"PAP": ["write:rev", "write"], "PSP": ["belong", "belong:rev"]},
    )


@dataclass
class SplitSpec:
    shots: int = 5
    val_size: int = 100
    test_size: int = 200
    seed: int = 0


@dataclass(frozen=True)
class Split:
    labeled: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for part in (self.labeled, self.val, self.test):
            h.update(np.ascontiguousarray(part, dtype="<i8").tobytes())
            h.update(b"|")
        return h.hexdigest()


def split(graph: HetGraph, spec: SplitSpec = None, **overrides) -> Split:
    """Exactly ``shots`` labeled nodes per class, then validation and test
    drawn without replacement from the rest.

    When the remainder is smaller than ``val_size + test_size`` both shrink
    proportionally to fit.
    """
    spec = spec or SplitSpec()
    for key, value in overrides.items():
        setattr(spec, key, value)
    if spec.shots < 1:
        raise SplitError("shots must be at least 1")
    if graph.labels is None:
        raise SplitError("graph has no labels")
    rng = np.random.default_rng(spec.seed)
    y = graph.labels
    labeled = []
    for c in range(graph.num_classes):
        members = np.flatnonzero(y == c)
        if len(members) < spec.shots:
            raise SplitError(f"class {c} has {len(members)} nodes, fewer than shots={spec.shots}")
        labeled.append(rng.permutation(members)[:spec.shots])
    labeled = np.sort(np.concatenate(labeled))
    rest = np.setdiff1d(np.flatnonzero(y >= 0), labeled)
    rest = rng.permutation(rest)
    want = spec.val_size + spec.test_size
    n_val, n_test = spec.val_size, spec.test_size
    if want > len(rest):
        if want <= 0:
            raise SplitError("validation and test sizes must be positive")
        n_val = int(len(rest) * spec.val_size / want)
        n_test = len(rest) - n_val
    if n_val < 1 or n_test < 1:
        raise SplitError("not enough unlabeled nodes for validation and test")
    return Split(labeled, np.sort(rest[:n_val]), np.sort(rest[n_val:n_val + n_test]))
