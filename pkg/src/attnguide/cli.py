"""Command-line entry points.

Exit codes: 0 on success, 1 on validation errors (bad arguments, bad
config), 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


class CliValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map bad args to 1
        raise CliValidationError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attnguide", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="generate a synthetic snippet corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--num", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)

    tr = sub.add_parser("train", help="train baseline and guided arms")
    tr.add_argument("--task", choices=("cloze", "clone"), required=True)
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--alpha0", type=float)
    tr.add_argument("--lambda", dest="lam", type=float)
    tr.add_argument("--patterns", help="comma list: syntax,ast,global,local")
    tr.add_argument("--train-fraction", type=float)

    an = sub.add_parser("analyze", help="attention-bias report for a trained model")
    an.add_argument("--model", required=True, help="output directory of a train run")
    an.add_argument("--corpus", required=True, help="JSON-lines snippet file")
    an.add_argument("--out", required=True)
    an.add_argument("--arm", choices=("guided", "baseline"), default="guided")

    sw = sub.add_parser("sweep", help="grid sweep over lambda, alpha0, or fraction")
    sw.add_argument("--axis", choices=("lambda", "alpha0", "fraction"), required=True)
    sw.add_argument("--config", required=True)
    sw.add_argument("--out", required=True)

    sub.add_parser("selftest", help="gradient checks and oracle suites")
    return parser


def _cmd_gen_corpus(args) -> int:
    from .corpus import CorpusParams, gen_corpus, write_corpus_jsonl

    units = gen_corpus(CorpusParams(num_snippets=args.num, seed=args.seed))
    write_corpus_jsonl(units, args.out)
    print(f"wrote {len(units)} snippets to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .experiments import ExperimentSpec, run_experiment

    spec = ExperimentSpec.from_json_file(args.config)
    overrides: dict = {"task": args.task}
    if args.train_fraction is not None:
        overrides["train_fraction"] = args.train_fraction
    if args.patterns is not None:
        overrides["pattern_groups"] = tuple(
            p.strip() for p in args.patterns.split(",") if p.strip()
        )
    hyper = spec.hyper
    if args.alpha0 is not None:
        hyper = replace(hyper, alpha0=args.alpha0)
    if args.lam is not None:
        hyper = replace(hyper, lam=args.lam)
    spec = replace(spec, hyper=hyper, **overrides)

    result = run_experiment(spec, out_dir=args.out)
    print(json.dumps({"baseline": result.metrics_baseline, "guided": result.metrics_guided}))
    return 0


def _cmd_analyze(args) -> int:
    from .analysis import collect
    from .corpus import read_corpus_jsonl
    from .experiments import make_cloze_eval, predict_cloze
    from .model import load_model, prepare_instances
    from .report import build_bias_report
    from .subtok import Vocab, encode

    model_dir = Path(args.model)
    model = load_model(model_dir / f"{args.arm}.sglm")
    vocab = Vocab.load(model_dir / "vocab.txt")
    units = read_corpus_jsonl(args.corpus)
    seqs = [encode(u, vocab, model.config.max_len) for u in units]
    instances = prepare_instances(units, seqs, model.assignment)
    evals = make_cloze_eval(instances, np.random.default_rng(1234))
    if not evals:
        raise CliValidationError("corpus has no eligible cloze positions")
    preds = predict_cloze(model, evals)
    targets = np.array([e.target_id for e in evals])
    accuracy = float((preds == targets).mean())
    records = collect(model, evals, task="cloze")
    report = build_bias_report(
        records,
        "cloze",
        {"accuracy": accuracy},
        {"accuracy": accuracy},
        fixes=None,
        extra={"arm": args.arm, "instances": len(evals)},
    )
    report.save_json(args.out)
    print(f"wrote {args.out} ({len(evals)} instances, accuracy {accuracy:.4f})")
    return 0


def _cmd_sweep(args) -> int:
    from .experiments import ExperimentSpec, sweep

    spec = ExperimentSpec.from_json_file(args.config)
    rows = sweep(spec, args.axis, out_dir=args.out)
    for row in rows:
        print(row)
    return 0


def _cmd_selftest(args) -> int:
    failures = 0
    for name, check in _selftests():
        try:
            check()
            print(f"PASS {name}")
        except Exception as exc:  # a failed oracle is a runtime failure
            failures += 1
            print(f"FAIL {name}: {exc}")
    return 2 if failures else 0


def _selftests():
    def pattern_oracle():
        from .javacode import parse
        from .patterns import PatternSpec, build_pattern
        from .subtok import build_vocab, encode

        unit = parse("fig2", "sum = num1 + num2 ;")
        vocab = build_vocab([unit], 64)
        seq = encode(unit, vocab, 16)
        pm = build_pattern(seq, unit, PatternSpec.syntax("Identifier"))
        row = pm.values[0]
        hot = np.nonzero(row)[0]
        assert list(hot) == [1, 3, 5], f"identifier columns {hot}"
        assert np.allclose(row[hot], 1.0 / 3.0)

    def gradient_check():
        from .model import gradient_check as run_check
        from ._tiny import tiny_model_and_batch

        model, batch = tiny_model_and_batch()
        worst = run_check(model, batch, num_samples=60)
        assert worst < 1e-3, f"max relative error {worst}"

    def mann_whitney_oracle():
        from .analysis import mann_whitney

        res = mann_whitney([1, 2, 3], [4, 5, 6])
        assert res.statistic == 0.0
        assert abs(res.p_value - 0.1) < 1e-12, f"p {res.p_value}"

    def masking_proportions():
        from .corpus import CorpusParams, gen_corpus
        from .model import apply_mlm_mask
        from .subtok import build_vocab, encode

        units = gen_corpus(CorpusParams(200, 3))
        vocab = build_vocab(units, 256)
        rng = np.random.default_rng(0)
        chosen = total = 0
        for unit in units:
            seq = encode(unit, vocab, 64)
            _, sel = apply_mlm_mask(seq, 0.15, rng, len(vocab))
            maskable = sum(a is not None for a in seq.alignment)
            chosen += len(sel)
            total += maskable
        rate = chosen / total
        assert 0.12 < rate < 0.19, f"selection rate {rate}"

    return [
        ("pattern-oracle", pattern_oracle),
        ("gradient-check", gradient_check),
        ("mann-whitney-oracle", mann_whitney_oracle),
        ("masking-proportions", masking_proportions),
    ]


_COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "train": _cmd_train,
    "analyze": _cmd_analyze,
    "sweep": _cmd_sweep,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (CliValidationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
