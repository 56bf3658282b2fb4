"""Attention-bias analysis: aggregation, hypothesis tests, partitioning.

Given per-instance attention collected from a model, this module compares
attention mass on syntax classes and statement kinds between correct and
incorrect predictions (Mann-Whitney and a per-head paired t-test, Bonferroni
corrected), partitions instances into high/low attention groups, computes
stratified accuracies, and accounts for predictions fixed or broken by a
guided model relative to a baseline.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import stats as scipy_stats

from .javacode import AstKind, CodeUnit, SyntaxClass
from .model import ForwardTrace, GuidedModel, Instance, forward
from .patterns import HeadAssignment, PatternMatrix, PatternSpec
from .subtok import aggregate_to_source

ANALYZED_SYNTAX_CLASSES = (
    SyntaxClass.IDENTIFIER,
    SyntaxClass.MODIFIER,
    SyntaxClass.OPERATOR,
    SyntaxClass.DATA_TYPE,
    SyntaxClass.SEPARATOR,
    SyntaxClass.KEYWORD,
    SyntaxClass.STRING_LIT,
    SyntaxClass.BOOLEAN_LIT,
)
ANALYZED_AST_KINDS = (
    AstKind.METHOD_SIGNATURE,
    AstKind.IF_ELSE,
    AstKind.WHILE,
    AstKind.RETURN,
)


class EmptyGroup(ValueError):
    """Both comparison groups must be non-empty."""


class ZeroVariance(ValueError):
    """Paired t-test is undefined when all differences are identical."""


@dataclass(frozen=True)
class TestResult:
    element: str
    statistic: float
    p_value: float
    test: str  # "MannWhitney" | "PairedT"
    significant_after_bonferroni: bool = False

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0):
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    ordered = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and ordered[j + 1] == ordered[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def u_statistic(group_a: Sequence[float], group_b: Sequence[float]) -> float:
    """Rank-formula U for group A, with midrank tie handling."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    ranks = _midranks(np.concatenate([a, b]))
    rank_sum_a = ranks[: len(a)].sum()
    return float(rank_sum_a - len(a) * (len(a) + 1) / 2.0)


def _exact_two_sided_p(ranks: np.ndarray, n_a: int, u_obs: float) -> float:
    """Enumerate all group-A index choices; p = share at least as extreme."""
    total_n = len(ranks)
    n_b = total_n - n_a
    mu = n_a * n_b / 2.0
    observed_dev = abs(u_obs - mu)
    offset = n_a * (n_a + 1) / 2.0
    hits = 0
    count = 0
    for combo in itertools.combinations(range(total_n), n_a):
        u = ranks[list(combo)].sum() - offset
        if abs(u - mu) >= observed_dev - 1e-12:
            hits += 1
        count += 1
    return hits / count


def mann_whitney(
    group_a: Sequence[float],
    group_b: Sequence[float],
    element: str = "",
    exact_limit: int = 12,
) -> TestResult:
    """Two-sided Mann-Whitney U test.

    Exact enumeration when the pooled size is at most exact_limit; otherwise
    the normal approximation with tie correction and continuity correction.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise EmptyGroup("both groups must contain at least one value")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    n_a, n_b, total_n = len(a), len(b), len(pooled)
    u = float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)

    if total_n <= exact_limit:
        p = _exact_two_sided_p(ranks, n_a, u)
        return TestResult(element, u, min(p, 1.0), "MannWhitney")

    mu = n_a * n_b / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = (tie_counts.astype(np.float64) ** 3 - tie_counts).sum()
    sigma_sq = n_a * n_b / 12.0 * ((total_n + 1) - tie_term / (total_n * (total_n - 1)))
    if sigma_sq <= 0.0:
        return TestResult(element, u, 1.0, "MannWhitney")
    delta = u - mu
    if delta > 0:
        delta -= 0.5
    elif delta < 0:
        delta += 0.5
    z = delta / math.sqrt(sigma_sq)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return TestResult(element, u, min(max(p, 0.0), 1.0), "MannWhitney")


def paired_t(diffs: Sequence[float], element: str = "") -> TestResult:
    """Two-sided one-sample t-test on paired differences."""
    d = np.asarray(diffs, dtype=np.float64)
    if len(d) < 2:
        raise ValueError("paired t-test needs at least two differences")
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise ZeroVariance("all paired differences are identical")
    t = float(d.mean() / (sd / math.sqrt(len(d))))
    p = float(2.0 * scipy_stats.t.sf(abs(t), df=len(d) - 1))
    return TestResult(element, t, min(p, 1.0), "PairedT")


def bonferroni(
    results: Sequence[TestResult], base_alpha: float, k: int
) -> list[TestResult]:
    """Flag results significant iff p is strictly below base_alpha / k."""
    if k < 1:
        raise ValueError("k must be at least 1")
    threshold = base_alpha / k
    return [
        replace(r, significant_after_bonferroni=bool(r.p_value < threshold))
        for r in results
    ]


class PartitionLabel(Enum):
    HIGH = "High"
    LOW = "Low"
    EXCLUDED = "Excluded"

    def __str__(self) -> str:
        return self.value


def partition_from_weights(weights: np.ndarray) -> list[PartitionLabel]:
    """Three-stage high/low labeling of an (instances, layers, heads) tensor.

    Per layer, the threshold is the mean weight over all instances and heads;
    a head is high only if strictly above it. A layer is high/low by strict
    head majority (exact half -> uncategorized). An instance is High/Low by
    strict majority among its categorized layers, Excluded on ties.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 3:
        raise ValueError("expected an (instances, layers, heads) tensor")
    _, _, heads = w.shape
    thresholds = w.mean(axis=(0, 2))
    high_heads = w > thresholds[None, :, None]
    counts = high_heads.sum(axis=2)
    layer_high = counts > heads / 2.0
    layer_low = counts < heads / 2.0
    n_high = layer_high.sum(axis=1)
    n_low = layer_low.sum(axis=1)
    labels = []
    for hi, lo in zip(n_high, n_low):
        if hi > lo:
            labels.append(PartitionLabel.HIGH)
        elif lo > hi:
            labels.append(PartitionLabel.LOW)
        else:
            labels.append(PartitionLabel.EXCLUDED)
    return labels


@dataclass(eq=False)
class AttentionRecord:
    """Per-instance aggregated attention and prediction outcome."""

    unit_id: str
    weights: np.ndarray  # (L, h, T) attention received per source token
    specials_weight: np.ndarray  # (L, h) mass on specials and padding
    prediction_correct: bool
    element_weights: dict[str, np.ndarray]  # element -> (L, h)
    syntax_means: dict[str, float]
    ast_means: dict[str, float]


def partition_high_low(
    records: Sequence[AttentionRecord], element: str
) -> list[PartitionLabel]:
    """Label each record High/Low/Excluded for one element.

    Records whose unit lacks the element entirely are Excluded and do not
    contribute to the per-layer thresholds.
    """
    present = [r for r in records if element in r.element_weights]
    if not present:
        return [PartitionLabel.EXCLUDED] * len(records)
    labels_present = iter(
        partition_from_weights(np.stack([r.element_weights[element] for r in present]))
    )
    return [
        next(labels_present) if element in r.element_weights else PartitionLabel.EXCLUDED
        for r in records
    ]


def stratified_accuracy(
    records: Sequence[AttentionRecord], labels: Sequence[PartitionLabel]
) -> dict[str, Optional[float]]:
    """Accuracy within the High and the Low stratum; None for empty strata."""
    out: dict[str, Optional[float]] = {}
    for key, wanted in (("acc_high", PartitionLabel.HIGH), ("acc_low", PartitionLabel.LOW)):
        hits = [r.prediction_correct for r, l in zip(records, labels) if l is wanted]
        out[key] = float(np.mean(hits)) if hits else None
    return out


@dataclass(frozen=True)
class FixAccounting:
    correct: int  # guided-model correct count
    wrong: int  # guided-model wrong count
    fixed: int  # wrong under baseline, correct under guided
    broken: int  # correct under baseline, wrong under guided
    fix_pct: Optional[float]  # fixed / baseline_wrong, None if nothing was wrong
    baseline_correct: int
    baseline_wrong: int


def fix_accounting(
    baseline_preds: Sequence, guided_preds: Sequence, targets: Sequence
) -> FixAccounting:
    base = np.asarray(baseline_preds)
    guided = np.asarray(guided_preds)
    truth = np.asarray(targets)
    if not (base.shape == guided.shape == truth.shape):
        raise ValueError("prediction and target arrays must share one shape")
    correct_base = base == truth
    correct_guided = guided == truth
    fixed = int((~correct_base & correct_guided).sum())
    broken = int((correct_base & ~correct_guided).sum())
    baseline_wrong = int((~correct_base).sum())
    return FixAccounting(
        correct=int(correct_guided.sum()),
        wrong=int((~correct_guided).sum()),
        fixed=fixed,
        broken=broken,
        fix_pct=(fixed / baseline_wrong) if baseline_wrong else None,
        baseline_correct=int(correct_base.sum()),
        baseline_wrong=baseline_wrong,
    )


def metrics(preds: Sequence, targets: Sequence) -> dict[str, Optional[float]]:
    """Accuracy plus binary precision/recall/F1 with positive label 1.

    Undefined ratios (no predicted positives, no actual positives) are
    reported as None rather than 0.
    """
    p = np.asarray(preds)
    t = np.asarray(targets)
    accuracy = float((p == t).mean()) if p.size else None
    tp = int(((p == 1) & (t == 1)).sum())
    fp = int(((p == 1) & (t != 1)).sum())
    fn = int(((p != 1) & (t == 1)).sum())
    precision = tp / (tp + fp) if (tp + fp) > 0 else None
    recall = tp / (tp + fn) if (tp + fn) > 0 else None
    if precision is None or recall is None or (precision + recall) == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


@dataclass(eq=False)
class EvalInstance:
    """One evaluation item: prepared instance plus its model input."""

    inst: Instance
    ids: np.ndarray  # (n,) input ids (cloze: with one [MASK])
    target_position: Optional[int] = None
    target_id: Optional[int] = None
    label: Optional[int] = None


def _received_vector(head_attention: np.ndarray, real_len: int) -> np.ndarray:
    """Mean attention each position receives, averaged over real query rows."""
    return head_attention[:real_len, :].mean(axis=0)


def _element_members(unit: CodeUnit) -> dict[str, list[int]]:
    members: dict[str, list[int]] = {}
    for cls in ANALYZED_SYNTAX_CLASSES:
        idx = [t.index for t in unit.tokens if t.syntax_class is cls]
        if idx:
            members[cls.value] = idx
    for kind in ANALYZED_AST_KINDS:
        idx = sorted(unit.token_indices_of_kind(kind))
        if idx:
            members[kind.value] = idx
    return members


def collect(
    model: GuidedModel,
    eval_instances: Sequence[EvalInstance],
    task: str = "cloze",
    chunk_size: int = 64,
) -> list[AttentionRecord]:
    """Forward each instance and aggregate attention onto source tokens."""
    records: list[AttentionRecord] = []
    cfg = model.config
    for start in range(0, len(eval_instances), chunk_size):
        chunk = eval_instances[start : start + chunk_size]
        ids = np.stack([e.ids for e in chunk])
        valid = np.stack(
            [np.arange(cfg.max_len) < e.inst.seq.real_len for e in chunk]
        )
        trace = forward(model, ids, valid)
        for b, ev in enumerate(chunk):
            records.append(_record_from_trace(trace, b, ev, task))
    return records


def _record_from_trace(
    trace: ForwardTrace, b: int, ev: EvalInstance, task: str
) -> AttentionRecord:
    seq = ev.inst.seq
    unit = ev.inst.unit
    attn = trace.attention_array(b)  # (L, h, n, n)
    layers, heads = attn.shape[:2]
    token_count = len(unit.tokens)
    weights = np.zeros((layers, heads, token_count))
    specials = np.zeros((layers, heads))
    for l in range(layers):
        for h in range(heads):
            received = _received_vector(attn[l, h], seq.real_len)
            per_token, special = aggregate_to_source(
                received, seq.alignment, num_source_tokens=token_count
            )
            weights[l, h] = per_token
            specials[l, h] = special

    if task == "cloze":
        predicted = int(np.argmax(trace.logits.data[b, ev.target_position]))
        correct = predicted == ev.target_id
    else:
        predicted = int(trace.cls_logit.data[b] > 0.0)
        correct = predicted == ev.label

    element_weights: dict[str, np.ndarray] = {}
    syntax_means: dict[str, float] = {}
    ast_means: dict[str, float] = {}
    members = _element_members(unit)
    for name, idx in members.items():
        per_head = weights[:, :, idx].mean(axis=2)
        element_weights[name] = per_head
        target = (
            syntax_means
            if name in {c.value for c in ANALYZED_SYNTAX_CLASSES}
            else ast_means
        )
        target[name] = float(per_head.mean())

    return AttentionRecord(
        unit_id=unit.id,
        weights=weights,
        specials_weight=specials,
        prediction_correct=bool(correct),
        element_weights=element_weights,
        syntax_means=syntax_means,
        ast_means=ast_means,
    )


def pattern_mass(
    attention: np.ndarray,
    assignment: HeadAssignment,
    unit_patterns: dict[PatternSpec, PatternMatrix],
    real_len: int,
) -> Optional[float]:
    """Mean attention mass guided heads place on their pattern's columns.

    attention is (L, h, n, n) for one sequence. Heads whose pattern has no
    matching column on this sequence are skipped; None if every guided head
    is skipped.
    """
    masses = []
    for layer in range(assignment.num_layers):
        for head, spec in assignment.guided_heads:
            pm = unit_patterns[spec]
            support = pm.values.any(axis=0)
            if not support.any():
                continue
            rows = attention[layer, head, :real_len, :]
            masses.append(float(rows[:, support].sum(axis=1).mean()))
    return float(np.mean(masses)) if masses else None
