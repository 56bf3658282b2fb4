"""Experiment orchestration: paired baseline/guided runs, folds, sweeps.

Both arms of every comparison consume identical fold splits, identical
initial parameters, and identical mask draws (the training RNG stream does
not depend on parameter values), so any outcome difference is attributable
to the guiding loss alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import (
    EvalInstance,
    FixAccounting,
    collect,
    fix_accounting,
    mann_whitney,
    metrics,
    pattern_mass,
)
from .corpus import CorpusParams, gen_clone_pairs, gen_corpus
from .javacode import CodeUnit, SyntaxClass
from .model import (
    GuidedModel,
    Hyper,
    Instance,
    ModelConfig,
    TrainStep,
    forward,
    prepare_instances,
    save_model,
    train,
    write_train_log_csv,
)
from .patterns import (
    PatternSpec,
    assign_heads,
    ast_pattern_specs,
    global_pattern_specs,
    local_pattern_specs,
    syntax_pattern_specs,
)
from .report import BiasReport, build_bias_report, write_bias_csv, write_strata_csv
from .subtok import MASK_ID, Vocab, build_vocab, encode, encode_pair, merge_units

PATTERN_GROUPS = {
    "syntax": syntax_pattern_specs,
    "ast": ast_pattern_specs,
    "global": global_pattern_specs,
    "local": local_pattern_specs,
}

TRAIN_FRACTION_GRID = (0.25, 0.5, 0.75, 1.0)
LAMBDA_GRID = (0.25, 0.5, 0.75, 1.0)
ALPHA0_GRID = (1.0, 10.0, 100.0)

# Cloze targets come only from these source-token classes (never specials,
# padding, or integer literals).
CLOZE_TARGET_CLASSES = frozenset(
    c
    for c in SyntaxClass
    if c is not SyntaxClass.NUM_LITERAL
)


def specs_from_groups(groups: Sequence[str]) -> tuple[PatternSpec, ...]:
    specs: list[PatternSpec] = []
    for group in groups:
        if group not in PATTERN_GROUPS:
            raise ValueError(
                f"unknown pattern group {group!r}; choose from {sorted(PATTERN_GROUPS)}"
            )
        specs.extend(PATTERN_GROUPS[group]())
    return tuple(specs)


@dataclass
class ExperimentSpec:
    task: str = "cloze"
    corpus: CorpusParams = field(default_factory=lambda: CorpusParams(2000, 7))
    model: ModelConfig = field(default_factory=ModelConfig)
    hyper: Hyper = field(default_factory=Hyper)
    pattern_groups: tuple[str, ...] = ("syntax", "ast")
    train_fraction: float = 1.0
    vocab_max_size: int = 512
    eval_seed: int = 1234

    def __post_init__(self):
        if self.task not in ("cloze", "clone"):
            raise ValueError(f"unknown task {self.task!r}")
        if not (0.0 < self.train_fraction <= 1.0):
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.hyper.folds < 1:
            raise ValueError("folds must be at least 1")
        if self.pattern_groups:
            self.hyper.specs = specs_from_groups(self.pattern_groups)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "corpus": {
                "num_snippets": self.corpus.num_snippets,
                "seed": self.corpus.seed,
                "profile": self.corpus.profile,
            },
            "model": {
                "num_layers": self.model.num_layers,
                "heads": self.model.heads,
                "d_model": self.model.d_model,
                "ffn_dim": self.model.ffn_dim,
                "max_len": self.model.max_len,
                "mask_rate": self.model.mask_rate,
                "seed": self.model.seed,
            },
            "hyper": {
                "lr": self.hyper.lr,
                "epochs": self.hyper.epochs,
                "batch_size": self.hyper.batch_size,
                "alpha0": self.hyper.alpha0,
                "lambda": self.hyper.lam,
                "folds": self.hyper.folds,
            },
            "patterns": list(self.pattern_groups),
            "train_fraction": self.train_fraction,
            "vocab_max_size": self.vocab_max_size,
            "eval_seed": self.eval_seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentSpec":
        corpus_raw = raw.get("corpus", {})
        model_raw = dict(raw.get("model", {}))
        hyper_raw = dict(raw.get("hyper", {}))
        if "lambda" in hyper_raw:
            hyper_raw["lam"] = hyper_raw.pop("lambda")
        return cls(
            task=raw.get("task", "cloze"),
            corpus=CorpusParams(
                num_snippets=corpus_raw.get("num_snippets", 2000),
                seed=corpus_raw.get("seed", 7),
                profile=corpus_raw.get("profile"),
            ),
            model=ModelConfig(**model_raw),
            hyper=Hyper(**hyper_raw),
            pattern_groups=tuple(raw.get("patterns", ("syntax", "ast"))),
            train_fraction=raw.get("train_fraction", 1.0),
            vocab_max_size=raw.get("vocab_max_size", 512),
            eval_seed=raw.get("eval_seed", 1234),
        )

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fold_splits(
    count: int, folds: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic k-fold index splits; folds=1 is a single 80/20 split."""
    perm = np.random.default_rng(seed).permutation(count)
    if folds == 1:
        cut = max(1, count // 5)
        return [(perm[cut:], perm[:cut])]
    parts = np.array_split(perm, folds)
    return [
        (np.concatenate([p for j, p in enumerate(parts) if j != i]), parts[i])
        for i in range(folds)
    ]


def _subsample(indices: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    if fraction >= 1.0:
        return indices
    keep = max(1, int(round(len(indices) * fraction)))
    rng = np.random.default_rng(seed)
    return indices[rng.permutation(len(indices))[:keep]]


def _single_piece_positions(inst: Instance) -> list[int]:
    """Positions whose source token is a single subtoken of a target class."""
    seq = inst.seq
    counts: dict[int, int] = {}
    for pos in range(seq.real_len):
        src = seq.alignment[pos]
        if src is not None:
            counts[src] = counts.get(src, 0) + 1
    eligible = []
    for pos in range(seq.real_len):
        src = seq.alignment[pos]
        if src is None or counts[src] != 1:
            continue
        if inst.unit.tokens[src].syntax_class in CLOZE_TARGET_CLASSES:
            eligible.append(pos)
    return eligible


def make_cloze_eval(
    instances: Sequence[Instance], rng: np.random.Generator
) -> list[EvalInstance]:
    """Mask one eligible position per instance; skip units with none."""
    out = []
    for inst in instances:
        eligible = _single_piece_positions(inst)
        if not eligible:
            continue
        pos = int(eligible[rng.integers(len(eligible))])
        ids = inst.seq.ids.copy()
        target = int(ids[pos])
        ids[pos] = MASK_ID
        out.append(EvalInstance(inst, ids, target_position=pos, target_id=target))
    return out


def make_clone_eval(instances: Sequence[Instance]) -> list[EvalInstance]:
    return [
        EvalInstance(inst, inst.seq.ids.copy(), label=inst.label) for inst in instances
    ]


def _forward_chunks(model: GuidedModel, evals: Sequence[EvalInstance], chunk=128):
    cfg = model.config
    for start in range(0, len(evals), chunk):
        part = evals[start : start + chunk]
        ids = np.stack([e.ids for e in part])
        valid = np.stack([np.arange(cfg.max_len) < e.inst.seq.real_len for e in part])
        yield part, forward(model, ids, valid)


def predict_cloze(model: GuidedModel, evals: Sequence[EvalInstance]) -> np.ndarray:
    preds = np.zeros(len(evals), dtype=np.int64)
    pos = 0
    for part, trace in _forward_chunks(model, evals):
        for b, ev in enumerate(part):
            preds[pos] = int(np.argmax(trace.logits.data[b, ev.target_position]))
            pos += 1
    return preds


def predict_clone(model: GuidedModel, evals: Sequence[EvalInstance]) -> np.ndarray:
    preds = np.zeros(len(evals), dtype=np.int64)
    pos = 0
    for part, trace in _forward_chunks(model, evals):
        for b in range(len(part)):
            preds[pos] = int(trace.cls_logit.data[b] > 0.0)
            pos += 1
    return preds


def collect_masses(model: GuidedModel, evals: Sequence[EvalInstance]) -> list[float]:
    """Per-instance mean attention mass of guided heads on their targets."""
    masses = []
    for part, trace in _forward_chunks(model, evals):
        for b, ev in enumerate(part):
            value = pattern_mass(
                trace.attention_array(b),
                model.assignment,
                ev.inst.patterns,
                ev.inst.seq.real_len,
            )
            if value is not None:
                masses.append(value)
    return masses


@dataclass
class RunResult:
    task: str
    metrics_baseline: dict
    metrics_guided: dict
    fixes: FixAccounting
    report: BiasReport
    train_size: int
    masses_baseline: list[float]
    masses_guided: list[float]
    log_baseline: list[TrainStep]
    log_guided: list[TrainStep]
    models: tuple[GuidedModel, GuidedModel]  # (baseline, guided) from the last fold
    vocab: Vocab


def _train_pair(
    config: ModelConfig,
    assignment,
    train_insts: list[Instance],
    hyper: Hyper,
    task: str,
) -> tuple[GuidedModel, GuidedModel, list[TrainStep], list[TrainStep]]:
    baseline = GuidedModel(config, assignment, alpha0=0.0)
    guided = GuidedModel(config, assignment, alpha0=hyper.alpha0)
    log_b = train(baseline, train_insts, replace(hyper, alpha0=0.0), task=task)
    log_g = train(guided, train_insts, hyper, task=task)
    return baseline, guided, log_b, log_g


def _run(spec: ExperimentSpec, out_dir: Optional[str | Path] = None) -> RunResult:
    task = spec.task
    if task == "cloze":
        units = gen_corpus(spec.corpus)
        vocab = build_vocab(units, spec.vocab_max_size)
        config = replace(spec.model, vocab_size=len(vocab))
        assignment = assign_heads(
            config.num_layers, config.heads, spec.hyper.lam, spec.hyper.specs
        )
        seqs = [encode(u, vocab, config.max_len) for u in units]
        instances = prepare_instances(units, seqs, assignment)
    else:
        pairs = gen_clone_pairs(spec.corpus.num_snippets, spec.corpus.seed)
        merged = [merge_units(a, b) for a, b, _ in pairs]
        vocab = build_vocab(merged, spec.vocab_max_size)
        config = replace(spec.model, vocab_size=len(vocab))
        assignment = assign_heads(
            config.num_layers, config.heads, spec.hyper.lam, spec.hyper.specs
        )
        seqs = [
            encode_pair(a, b, vocab, config.max_len) for a, b, _ in pairs
        ]
        labels = [label for _, _, label in pairs]
        instances = prepare_instances(merged, seqs, assignment, labels)

    splits = fold_splits(len(instances), spec.hyper.folds, spec.corpus.seed)
    eval_rng_seed = spec.eval_seed

    all_preds_b: list[np.ndarray] = []
    all_preds_g: list[np.ndarray] = []
    all_targets: list[np.ndarray] = []
    all_records = []
    masses_b: list[float] = []
    masses_g: list[float] = []
    train_size = 0
    models = logs = None

    for fold_no, (train_idx, test_idx) in enumerate(splits):
        train_idx = _subsample(
            train_idx, spec.train_fraction, spec.corpus.seed + 1000 + fold_no
        )
        train_size = max(train_size, len(train_idx))
        train_insts = [instances[i] for i in train_idx]
        test_insts = [instances[i] for i in test_idx]

        baseline, guided, log_b, log_g = _train_pair(
            config, assignment, train_insts, spec.hyper, task
        )
        models = (baseline, guided)
        logs = (log_b, log_g)

        if task == "cloze":
            evals = make_cloze_eval(
                test_insts, np.random.default_rng(eval_rng_seed + fold_no)
            )
            preds_b = predict_cloze(baseline, evals)
            preds_g = predict_cloze(guided, evals)
            targets = np.array([e.target_id for e in evals], dtype=np.int64)
        else:
            evals = make_clone_eval(test_insts)
            preds_b = predict_clone(baseline, evals)
            preds_g = predict_clone(guided, evals)
            targets = np.array([e.label for e in evals], dtype=np.int64)

        all_preds_b.append(preds_b)
        all_preds_g.append(preds_g)
        all_targets.append(targets)
        all_records.extend(collect(baseline, evals, task=task))
        masses_b.extend(collect_masses(baseline, evals))
        masses_g.extend(collect_masses(guided, evals))

    preds_b = np.concatenate(all_preds_b)
    preds_g = np.concatenate(all_preds_g)
    targets = np.concatenate(all_targets)
    metrics_b = metrics(preds_b, targets)
    metrics_g = metrics(preds_g, targets)
    fixes = fix_accounting(preds_b, preds_g, targets)
    report = build_bias_report(
        all_records,
        task,
        metrics_b,
        metrics_g,
        fixes,
        extra={
            "train_size": train_size,
            "folds": spec.hyper.folds,
            "mean_mass_baseline": float(np.mean(masses_b)) if masses_b else None,
            "mean_mass_guided": float(np.mean(masses_g)) if masses_g else None,
        },
    )
    result = RunResult(
        task,
        metrics_b,
        metrics_g,
        fixes,
        report,
        train_size,
        masses_b,
        masses_g,
        logs[0],
        logs[1],
        models,
        vocab,
    )
    if out_dir is not None:
        _write_outputs(result, spec, Path(out_dir))
    return result


def run_cloze(spec: ExperimentSpec, out_dir: Optional[str | Path] = None) -> RunResult:
    """Train baseline (alpha0=0) and guided arms on shared folds and report."""
    if spec.task != "cloze":
        raise ValueError("run_cloze needs a cloze spec")
    return _run(spec, out_dir)


def run_clone_toy(spec: ExperimentSpec, out_dir: Optional[str | Path] = None) -> RunResult:
    """Toy clone detection over [SEP]-joined pairs; reports precision/recall/F1."""
    if spec.task != "clone":
        raise ValueError("run_clone_toy needs a clone spec")
    return _run(spec, out_dir)


def run_experiment(spec: ExperimentSpec, out_dir: Optional[str | Path] = None) -> RunResult:
    return run_cloze(spec, out_dir) if spec.task == "cloze" else run_clone_toy(spec, out_dir)


def _write_outputs(result: RunResult, spec: ExperimentSpec, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    result.report.save_json(out_dir / "report.json")
    write_bias_csv(result.report, out_dir / "bias.csv")
    write_strata_csv(result.report, out_dir / "strata.csv")
    write_train_log_csv(result.log_baseline, out_dir / "train_log_baseline.csv")
    write_train_log_csv(result.log_guided, out_dir / "train_log_guided.csv")
    save_model(result.models[0], out_dir / "baseline.sglm")
    save_model(result.models[1], out_dir / "guided.sglm")
    result.vocab.save(out_dir / "vocab.txt")
    (out_dir / "config.json").write_text(
        json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    (out_dir / "metrics.json").write_text(
        json.dumps(
            {
                "baseline": result.metrics_baseline,
                "guided": result.metrics_guided,
                "train_size": result.train_size,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )


SWEEP_AXES = {
    "lambda": LAMBDA_GRID,
    "alpha0": ALPHA0_GRID,
    "fraction": TRAIN_FRACTION_GRID,
}


def sweep(
    spec: ExperimentSpec, axis: str, out_dir: Optional[str | Path] = None
) -> list[dict]:
    """One paired run per grid point, shared seeds; returns one row per point."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    rows = []
    for value in SWEEP_AXES[axis]:
        if axis == "lambda":
            point = replace(spec, hyper=replace(spec.hyper, lam=value))
        elif axis == "alpha0":
            point = replace(spec, hyper=replace(spec.hyper, alpha0=value))
        else:
            point = replace(spec, train_fraction=value)
        result = run_experiment(point)
        metric = "accuracy" if spec.task == "cloze" else "f1"
        rows.append(
            {
                "axis": axis,
                "value": value,
                "train_size": result.train_size,
                "metric": metric,
                "baseline": result.metrics_baseline[metric],
                "guided": result.metrics_guided[metric],
                "fixed": result.fixes.fixed,
                "broken": result.fixes.broken,
            }
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(rows, out / f"sweep_{axis}.csv")
    return rows


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    header = ["axis", "value", "train_size", "metric", "baseline", "guided", "fixed", "broken"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join(
                "" if row[col] is None else repr(row[col]) if isinstance(row[col], float) else str(row[col])
                for col in header
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class DirectionalResult:
    """Multi-seed guided-vs-baseline comparison on the cloze task."""

    per_seed: list[dict]
    mass_p_value: float
    masses_baseline: list[float]
    masses_guided: list[float]

    @property
    def accuracy_never_damaged(self) -> bool:
        return all(
            s["accuracy_guided"] >= s["accuracy_baseline"] - 0.005 for s in self.per_seed
        )


def run_directional_experiment(
    spec: ExperimentSpec, seeds: Sequence[int]
) -> DirectionalResult:
    """Run the paired experiment once per model seed and pool the masses.

    The pooled Mann-Whitney compares, per evaluation instance, the guided
    model's attention mass on its target columns against the baseline's.
    """
    per_seed = []
    pooled_b: list[float] = []
    pooled_g: list[float] = []
    for seed in seeds:
        point = replace(spec, model=replace(spec.model, seed=seed))
        result = run_experiment(point)
        per_seed.append(
            {
                "seed": seed,
                "accuracy_baseline": result.metrics_baseline["accuracy"],
                "accuracy_guided": result.metrics_guided["accuracy"],
                "mean_mass_baseline": float(np.mean(result.masses_baseline)),
                "mean_mass_guided": float(np.mean(result.masses_guided)),
            }
        )
        pooled_b.extend(result.masses_baseline)
        pooled_g.extend(result.masses_guided)
    test = mann_whitney(pooled_g, pooled_b)
    return DirectionalResult(per_seed, test.p_value, pooled_b, pooled_g)
