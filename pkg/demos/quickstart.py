"""Quickstart: synthetic graph -> contrastive pre-training -> few-shot prompt tuning.

Run: python3 demos/quickstart.py
Takes about half a minute on one core.
"""
import numpy as np

from hetprompt import synth, tuner
from hetprompt.encoder import pretrain

# ACM-like toy graph: papers (labelled, 3 classes), authors, subjects
graph = synth.generate(synth.ACM_MINI)
print("node counts", dict(zip([t.name for t in graph.node_types], graph.node_counts)))

# pre-train once; the encoder is frozen from here on
enc = pretrain(graph, epochs=100)
print(f"pretext loss {enc.history[0]:.3f} -> {enc.history[-1]:.3f}")

# 5 labelled papers per class, the rest split into validation and test
split = synth.split(graph, shots=5, seed=0)
state = tuner.tune(graph, enc, split, tuner.TuneConfig(seed=0))
scores = tuner.evaluate(tuner.predict(state, split.test), graph.labels[split.test], 3)
print(f"best epoch {state.best_epoch}, test macro-F1 {scores.macro_f1:.3f}, micro-F1 {scores.micro_f1:.3f}")

# class membership probabilities for a few test nodes
probs = tuner.predict_proba(state, split.test[:5])
print(np.round(probs, 3))
