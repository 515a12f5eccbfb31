"""Look inside a tuned prompt: feature-token attention and neighbor attention.

Run: python3 demos/inspect_attention.py
"""
import numpy as np

from hetprompt import synth, tuner
from hetprompt.aggregation import format_attention
from hetprompt.encoder import pretrain
from hetprompt.numerics import Tape
from hetprompt.prompts import attention_weights

spec = synth.SyntheticSpec(num_papers=150, num_authors=250, paper_dim=32, author_dim=16, subject_dim=4)
graph = synth.generate(spec)
enc = pretrain(graph, epochs=60, dim=32)
split = synth.split(graph, shots=5, val_size=45, test_size=60, seed=1)
state = tuner.tune(graph, enc, split, tuner.TuneConfig(seed=1, K=3))

tape = Tape(enabled=False)
# how strongly each paper leans on each of the K feature tokens
for name, x, f in zip([t.name for t in graph.node_types], graph.features, state.feature_prompt.tokens):
    w = attention_weights(tape, tape.constant(x), tape.constant(f.value)).value
    print(f"{name:8s} mean token weights {np.round(w.mean(axis=0), 3)}")

# semantic weights (which node type / metapath matters) and per-node neighbor weights
_, _, _, tokens = state.forward(tape)
print("type-view beta", np.round(tokens.type_beta.value.ravel(), 3))
print("path-view beta", np.round(tokens.path_beta.value.ravel(), 3))
print("\n".join(format_attention(tokens, state.plan, graph).splitlines()[:12]))
