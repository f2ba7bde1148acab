"""Command-line entry point: ``hdmi <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import HDMIError
from .harness import ExperimentConfig, fit_gated_probe, run_pipeline, stage_seed
from .interventions import AscentConfig, MarginObjective, hdmi_ascend, margin_loss, target_only_ascend
from .lookahead import EditConfig, EditSpec, la_hdmi_generate
from .model import (ModelConfig, TinyTransformer, forward_capture, forward_logits, load_model,
                    round_to_float32, save_model, train_lm)
from .probes import ProbeHParams, save_probe, train_probe
from .tasks import (AGREEMENT, SUITES, VOCAB, gen_corpus, gen_suite, make_splits, read_corpus,
                    read_dataset, write_corpus, write_dataset)
from .theory import verify


def _table(rows: list[tuple[str, bool, str]]) -> bool:
    width = max(len(name) for name, _, _ in rows)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    return all(ok for _, ok, _ in rows)


def cmd_gen_data(args) -> int:
    if args.corpus:
        corpus = gen_corpus(args.n, args.seed)
        write_corpus(args.out, corpus)
        print(f"wrote {len(corpus)} sentences to {args.out}")
    else:
        examples = gen_suite(args.suite, args.n, args.seed)
        write_dataset(args.out, examples)
        print(f"wrote {len(examples)} examples to {args.out}")
    return 0


def cmd_train(args) -> int:
    corpus = read_corpus(args.corpus)
    cfg = ModelConfig(len(VOCAB), args.hidden_size, None, args.layers, args.heads,
                      args.max_seq_len, args.seed)
    model, losses = train_lm(TinyTransformer(cfg), corpus, args.epochs, args.lr,
                             args.batch_size, args.seed)
    save_model(round_to_float32(model), args.out)
    print(f"trained {len(losses)} steps, final loss {np.mean(losses[-10:]):.4f}; saved {args.out}")
    return 0


def cmd_fit_probes(args) -> int:
    model = load_model(args.model)
    examples = read_dataset(args.data)
    split = make_splits(examples, seed=stage_seed(args.seed, "splits"))
    layer = args.layer or model.cfg.layers
    hp = ProbeHParams(epochs=args.epochs)
    k_e = max(e.z_e for e in examples) + 1

    def states(indices):
        return np.array([forward_capture(model, examples[i].prompt, layer)[1].vector for i in indices])

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inter, val = list(split.interventional), list(split.validation_probe)
    events: list[str] = []
    probes = {
        "interventional": fit_gated_probe(states(inter), [examples[i].z_c for i in inter],
                                          args.kind, hp, args.seed, 2, "interventional", 0.9, events),
    }
    Xv = states(val)
    probes["validation_zc"] = train_probe(Xv, [examples[i].z_c for i in val], "linear", hp,
                                          args.seed + 1, 2, "validation_probe")
    probes["validation_ze"] = train_probe(Xv, [examples[i].z_e for i in val], "linear", hp,
                                          args.seed + 2, k_e, "validation_probe")
    for name, probe in probes.items():
        save_probe(probe, out / f"{name}.bin")
        print(f"{name}\tholdout_accuracy={probe.holdout_accuracy:.4f}\t{out / (name + '.bin')}")
    for event in events:
        print(f"event: {event}")
    return 0


def cmd_intervene(args) -> int:
    model = load_model(args.model)
    tokens = VOCAB.encode(args.prompt)
    obj = MarginObjective(tuple(VOCAB.id(w) for w in args.target.split(",")),
                          tuple(VOCAB.id(w) for w in args.source.split(",")))
    ascend = target_only_ascend if args.target_only else hdmi_ascend
    state, logits = ascend(model, tokens, obj, AscentConfig(args.alpha, args.steps, args.layer))
    before = forward_logits(model, tokens)
    print(json.dumps({"prompt": args.prompt,
                      "margin_pre": margin_loss(before, obj), "margin_post": margin_loss(logits, obj),
                      "argmax_pre": VOCAB.words[int(np.argmax(before))],
                      "argmax_post": VOCAB.words[int(np.argmax(logits))],
                      "state_norm": float(np.linalg.norm(state))}))
    return 0


def cmd_edit(args) -> int:
    model = load_model(args.model)
    spec = EditSpec.from_text(args.text, args.edited, args.prefix)
    cfg = EditConfig(args.horizon, args.beta_f, args.beta_g, args.lambda_fact, args.alpha, args.steps)
    tokens, diags = la_hdmi_generate(model, spec, cfg)
    print(VOCAB.decode(tokens))
    for d in diags:
        print(json.dumps(d.record()))
    return 0


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if overrides:
        cfg = ExperimentConfig.from_text(cfg.to_text(), **overrides)
    if getattr(args, "model", None):
        cfg = replace(cfg, model_path=args.model)
    return cfg


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    result = run_pipeline(cfg)
    print(Path(cfg.output_dir, "results.tsv").read_text(encoding="utf-8"), end="")
    for event in result.manifest.events:
        print(f"event: {event}")
    return 0


def cmd_run_all(args) -> int:
    ok = _table([(c.name, c.passed, c.detail) for c in verify()])
    return cmd_evaluate(args) or (0 if ok else 1)


def cmd_verify_theory(args) -> int:
    checks = verify(args.instances, args.seed, args.directions)
    return 0 if _table([(c.name, c.passed, c.detail) for c in checks]) else 1


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks

    model = load_model(args.model) if args.model else None
    checks = run_gradchecks(model, args.cases, args.seed)
    return 0 if _table([(c.name, c.passed, c.detail) for c in checks]) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdmi", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a labeled suite or an LM corpus")
    g.add_argument("--suite", default=AGREEMENT, choices=(AGREEMENT,) + SUITES)
    g.add_argument("--n", type=int, default=600)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corpus", action="store_true", help="write training sentences instead")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the tiny transformer on a corpus file")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--hidden-size", type=int, default=64)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--max-seq-len", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit-probes", help="fit interventional and validation probes")
    f.add_argument("--model", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out-dir", required=True)
    f.add_argument("--kind", default="linear", choices=("linear", "mlp"))
    f.add_argument("--layer", type=int, default=0, help="0 means the final layer")
    f.add_argument("--epochs", type=int, default=100)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fit_probes)

    i = sub.add_parser("intervene", help="margin ascent on one prompt")
    i.add_argument("--model", required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--target", required=True, help="comma-separated target words")
    i.add_argument("--source", required=True, help="comma-separated source words")
    i.add_argument("--alpha", type=float, default=1.0)
    i.add_argument("--steps", type=int, default=30)
    i.add_argument("--layer", type=int, default=None)
    i.add_argument("--target-only", action="store_true")
    i.set_defaults(func=cmd_intervene)

    e = sub.add_parser("edit", help="lookahead text editing")
    e.add_argument("--model", required=True)
    e.add_argument("--text", required=True)
    e.add_argument("--edited", required=True)
    e.add_argument("--prefix", default="")
    d = EditConfig()
    e.add_argument("--horizon", type=int, default=d.horizon)
    e.add_argument("--beta-f", type=float, default=d.beta_f)
    e.add_argument("--beta-g", type=float, default=d.beta_g)
    e.add_argument("--lambda-fact", type=float, default=d.lambda_fact)
    e.add_argument("--alpha", type=float, default=d.step_size)
    e.add_argument("--steps", type=int, default=d.steps)
    e.set_defaults(func=cmd_edit)

    for name, func, text in (("evaluate", cmd_evaluate, "run the evaluation pipeline"),
                             ("run-all", cmd_run_all, "theory checks plus the full pipeline")):
        r = sub.add_parser(name, help=text)
        r.add_argument("--config", help="key = value config file")
        r.add_argument("--model", help="reuse this checkpoint instead of training")
        r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        r.set_defaults(func=func)

    v = sub.add_parser("verify-theory", help="numeric checks of the margin optimality result")
    v.add_argument("--instances", type=int, default=50)
    v.add_argument("--directions", type=int, default=10_000)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify_theory)

    c = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    c.add_argument("--model", help="checkpoint (default: a random tiny model)")
    c.add_argument("--cases", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (HDMIError, AssertionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
