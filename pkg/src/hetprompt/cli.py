"""Command-line front end: synth, pretrain, tune, eval, compare.

Every subcommand reads an optional flat ``key=value`` config file; flags
win over the file. The seed falls back to ``HETGPT_SEED`` and then 0.

Exit codes: 0 ok, 2 config error, 3 checkpoint or fingerprint error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import synth as synth_mod
from .aggregation import AggregationPlan, format_attention
from .encoder import FrozenEncoder, GraphOperators, PretrainConfig, pretrain
from .errors import CheckpointError, ConfigError, SplitError
from .graphfile import GraphFormatError, dump_graph, load_graph
from .hetgraph import neighbor_index
from .numerics import NumericError
from .synth import SHOT_CHOICES, SplitSpec, SyntheticSpec
from .tuner import (PromptTuneState, RunRecord, TuneConfig, baseline_finetune, evaluate, raw_feature_baseline,
                    run_once)

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4

# Results rows hold only deterministic fields; wall-clock goes to a sidecar.
RESULT_FIELDS = [f.name for f in fields(RunRecord) if f.name != "wall_clock"]
EXTRA_KEYS = {"repeats": int, "dataset": str, "val_size": int, "test_size": int}


def _caster(cls):
    kinds = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        kinds[f.name] = {"int": int, "float": float, "bool": _bool, "str": str}[t]
    return kinds


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path, allowed):
    """Parse a key=value file; ``allowed`` maps key -> type."""
    out = {}
    if path is None:
        return out
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = allowed[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def resolve_seed(flag, cfg):
    if flag is not None:
        return flag
    if "seed" in cfg:
        return cfg["seed"]
    env = os.environ.get("HETGPT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"HETGPT_SEED must be an integer, got {env!r}") from None
    return 0


def _pick(cls, cfg):
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


def _out_dir(path):
    if path is None:
        raise ConfigError("--out-dir is required")
    if not os.path.isdir(path):
        raise ConfigError(f"output directory {path} does not exist")
    return path


def _need(path, what):
    if path is None:
        raise ConfigError(f"--{what} is required")
    if not os.path.exists(path):
        raise ConfigError(f"{what} file {path} does not exist")
    return path


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _append_rows(path, header, rows):
    """Append tab-separated rows, writing the header only for a new file."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


def _fmt(x):
    return f"{x:.6f}" if isinstance(x, float) else str(x)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    cfg = read_config(args.config, _caster(SyntheticSpec))
    cfg["seed"] = resolve_seed(args.seed, cfg)
    spec = SyntheticSpec(**cfg)
    out = _out_dir(args.out_dir)
    graph = synth_mod.generate(spec)
    path = os.path.join(out, "graph.tsv")
    dump_graph(graph, path, spec.to_dict())
    print(f"wrote {path}: {graph!r}")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = read_config(args.config, _caster(PretrainConfig))
    cfg["seed"] = resolve_seed(args.seed, cfg)
    out = _out_dir(args.out_dir)
    graph, _ = load_graph(_need(args.graph, "graph"))
    enc = pretrain(graph, PretrainConfig(**cfg))
    path = os.path.join(out, "encoder.npz")
    enc.save(path)
    _write(os.path.join(out, "pretrain_loss.tsv"),
           "epoch\tloss\n" + "".join(f"{e}\t{v!r}\n" for e, v in enumerate(enc.history)))
    print(f"initial loss {enc.history[0]:.6f} final loss {enc.history[-1]:.6f}")
    print(f"wrote {path} (digest {enc.digest()[:16]})")
    return EXIT_OK


def _tune_setup(args):
    allowed = {**_caster(TuneConfig), **EXTRA_KEYS, "shots": int}
    cfg = read_config(args.config, allowed)
    seed = resolve_seed(args.seed, cfg)
    shots = args.shots if args.shots is not None else cfg.get("shots", 5)
    if shots not in SHOT_CHOICES:
        raise ConfigError(f"shots must be one of {SHOT_CHOICES}, got {shots}")
    repeats = args.repeats if getattr(args, "repeats", None) is not None else cfg.get("repeats", 10)
    if repeats < 1:
        raise ConfigError("repeats must be at least 1")
    graph, _ = load_graph(_need(args.graph, "graph"))
    enc = FrozenEncoder.load(_need(args.checkpoint, "checkpoint"))
    enc.check_graph(graph)
    base = TuneConfig(**_pick(TuneConfig, {**cfg, "seed": seed})).validate()
    split_kw = {k: cfg[k] for k in ("val_size", "test_size") if k in cfg}
    return cfg, seed, shots, repeats, graph, enc, base, split_kw


def _split_for(graph, shots, seed, split_kw):
    return synth_mod.split(graph, SplitSpec(shots=shots, seed=seed, **split_kw))


def _summary_row(dataset, records):
    macro = np.array([r.macro_f1 for r in records])
    micro = np.array([r.micro_f1 for r in records])
    r0 = records[0]
    row = {f: "" for f in RESULT_FIELDS}
    row.update(dataset=dataset, seed="mean±std", shots=r0.shots, K=r0.K,
               lam=_fmt(r0.lam), tau=_fmt(r0.tau), lr=_fmt(r0.lr),
               macro_f1=f"{macro.mean():.6f}±{macro.std():.6f}",
               micro_f1=f"{micro.mean():.6f}±{micro.std():.6f}",
               prompt_params=r0.prompt_params, finetune_params=r0.finetune_params)
    return [row[f] for f in RESULT_FIELDS]


def cmd_tune(args):
    cfg, seed, shots, repeats, graph, enc, base, split_kw = _tune_setup(args)
    out = _out_dir(args.out_dir)
    dataset = cfg.get("dataset", "synthetic")
    ops = GraphOperators(graph)
    plan = AggregationPlan(graph, neighbor_index(graph))
    records, timings = [], []
    for r in range(repeats):
        s = seed + r
        config = TuneConfig(**{**asdict(base), "seed": s})
        sp = _split_for(graph, shots, s, split_kw)
        state, metrics, rec = run_once(graph, enc, sp, config, dataset, ops, plan)
        state.save(os.path.join(out, f"prompt_seed{s}.npz"))
        records.append(rec)
        timings.append((s, f"{rec.wall_clock:.3f}"))
        print(f"seed {s}: macro-F1 {metrics.macro_f1:.4f} micro-F1 {metrics.micro_f1:.4f} "
              f"best epoch {rec.best_epoch}")
    rows = [[_fmt(getattr(rec, f)) for f in RESULT_FIELDS] for rec in records]
    rows.append(_summary_row(dataset, records))
    _append_rows(os.path.join(out, "results.tsv"), RESULT_FIELDS, rows)
    _append_rows(os.path.join(out, "timings.tsv"), ["seed", "wall_clock"], timings)
    macro = np.array([r.macro_f1 for r in records])
    print(f"mean macro-F1 {macro.mean():.4f} ± {macro.std():.4f} over {repeats} seeds (lam={base.lam})")
    return EXIT_OK


def cmd_eval(args):
    cfg, seed, shots, _, graph, enc, _, split_kw = _tune_setup(args)
    state = PromptTuneState.load(_need(args.prompt, "prompt"), graph, enc)
    sp = _split_for(graph, shots, seed, split_kw)
    nodes = {"test": sp.test, "val": sp.val, "labeled": sp.labeled}[args.split]
    probs = state.predict_proba()
    pred = np.argmax(probs, axis=1)
    m = evaluate(pred[nodes], graph.labels[nodes], graph.num_classes)
    print(f"split={args.split} seed={seed} macro_f1={m.macro_f1:.6f} micro_f1={m.micro_f1:.6f}")
    if args.out_dir is not None:
        out = _out_dir(args.out_dir)
        _write(os.path.join(out, "eval.tsv"),
               "split\tseed\tmacro_f1\tmicro_f1\n" + f"{args.split}\t{seed}\t{m.macro_f1!r}\t{m.micro_f1!r}\n")
        tokens = state.node_tokens()
        _write(os.path.join(out, "attention.tsv"), format_attention(tokens, state.plan, graph))
    if args.dump_embeddings:
        z = state.node_tokens().z.value
        lines = ["node\tlabel\tpredicted\t" + "\t".join(f"z{k}" for k in range(z.shape[1]))]
        for i in range(z.shape[0]):
            lines.append("\t".join([str(i), str(int(graph.labels[i])), str(int(pred[i]))]
                                   + [repr(float(v)) for v in z[i]]))
        _write(args.dump_embeddings, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_compare(args):
    cfg, seed, shots, repeats, graph, enc, base, split_kw = _tune_setup(args)
    out = _out_dir(args.out_dir)
    ops = GraphOperators(graph)
    plan = AggregationPlan(graph, neighbor_index(graph))
    rows = []
    for r in range(repeats):
        s = seed + r
        config = TuneConfig(**{**asdict(base), "seed": s})
        sp = _split_for(graph, shots, s, split_kw)
        sp_ft = _split_for(graph, shots, s, split_kw)
        assert sp.digest() == sp_ft.digest(), "both arms must see the same split"
        state, metrics, rec = run_once(graph, enc, sp, config, cfg.get("dataset", "synthetic"), ops, plan)
        ft = baseline_finetune(graph, enc, sp_ft, config, ops)
        raw = raw_feature_baseline(graph, sp, seed=s)
        digest = sp.digest()[:16]
        rows.append([s, "prompt", _fmt(metrics.macro_f1), _fmt(metrics.micro_f1), rec.best_epoch,
                     state.num_trainable, digest])
        rows.append([s, "finetune", _fmt(ft.metrics.macro_f1), _fmt(ft.metrics.micro_f1), ft.best_epoch,
                     ft.num_trainable, digest])
        rows.append([s, "raw_logistic", _fmt(raw.macro_f1), _fmt(raw.micro_f1), "", "", digest])
        n = max(len(state.loss_history), len(ft.loss_history))
        curve = ["epoch\tprompt_loss\tprompt_val_f1\tfinetune_loss\tfinetune_val_f1"]
        for e in range(n):
            cols = [str(e)]
            for hist in (state.loss_history, state.val_history, ft.loss_history, ft.val_history):
                cols.append(repr(hist[e]) if e < len(hist) else "")
            curve.append("\t".join(cols))
        _write(os.path.join(out, f"curves_seed{s}.tsv"), "\n".join(curve) + "\n")
        print(f"seed {s}: prompt {metrics.macro_f1:.4f} (epoch {rec.best_epoch}, {state.num_trainable} params) "
              f"finetune {ft.metrics.macro_f1:.4f} (epoch {ft.best_epoch}, {ft.num_trainable} params)")
    header = ["seed", "arm", "macro_f1", "micro_f1", "best_epoch", "trainable_params", "split_digest"]
    _append_rows(os.path.join(out, "compare.tsv"), header, rows)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="hetprompt", description="Prompt tuning on heterogeneous graphs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, graph=True, checkpoint=False):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        if graph:
            sp.add_argument("--graph")
        if checkpoint:
            sp.add_argument("--checkpoint")
            sp.add_argument("--shots", type=int, choices=SHOT_CHOICES)

    s = sub.add_parser("synth", help="generate a synthetic graph file")
    common(s, graph=False)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="pre-train and freeze an encoder")
    common(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("tune", help="prompt-tune over several seeds")
    common(s, checkpoint=True)
    s.add_argument("--repeats", type=int)
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("eval", help="evaluate a tuned prompt checkpoint")
    common(s, checkpoint=True)
    s.add_argument("--prompt")
    s.add_argument("--split", choices=("test", "val", "labeled"), default="test")
    s.add_argument("--dump-embeddings")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="prompt tuning vs fine-tuning on shared splits")
    common(s, checkpoint=True)
    s.add_argument("--repeats", type=int)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SplitError, GraphFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
