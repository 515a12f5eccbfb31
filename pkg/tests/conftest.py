import numpy as np
import pytest

from hetprompt import encoder, synth
from hetprompt.hetgraph import HetGraph


def tiny_graph(seed=0, n_p=6, n_a=4, n_s=2, dims=(5, 4, 3)):
    """Paper/author/subject graph with at most 12 nodes and both metapaths."""
    rng = np.random.default_rng(seed)
    write = [(a, p) for a in range(n_a) for p in range(n_p) if rng.random() < 0.4]
    belong = [(p, p % n_s) for p in range(n_p)]
    return HetGraph.build(
        node_types={"paper": n_p, "author": n_a, "subject": n_s},
        edge_types={"write": ("author", "paper"), "belong": ("paper", "subject")},
        edges={"write": np.array(write, dtype=np.int64).reshape(-1, 2), "belong": np.array(belong)},
        features={"paper": rng.normal(size=(n_p, dims[0])), "author": rng.normal(size=(n_a, dims[1])),
                  "subject": rng.normal(size=(n_s, dims[2]))},
        target="paper",
        labels=np.arange(n_p) % 3,
        metapaths={"PAP": ["write:rev", "write"], "PSP": ["belong", "belong:rev"]},
    )


SMALL = synth.SyntheticSpec(num_papers=90, num_authors=150, paper_dim=24, author_dim=12, subject_dim=4,
                            p_in=0.1, p_out=0.004)


@pytest.fixture(scope="session")
def small_graph():
    return synth.generate(SMALL)


@pytest.fixture(scope="session")
def small_encoder(small_graph):
    return encoder.pretrain(small_graph, epochs=40, dim=16, seed=0)


@pytest.fixture(scope="session")
def small_split(small_graph):
    return synth.split(small_graph, shots=5, val_size=30, test_size=45, seed=0)


from hypothesis import settings  # noqa: E402

settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(ACCEPTANCE[key])
