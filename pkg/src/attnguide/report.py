"""Bias report assembly, JSON schema, and plot-ready CSV emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from jsonschema import validate as _jsonschema_validate

from .analysis import (
    ANALYZED_AST_KINDS,
    ANALYZED_SYNTAX_CLASSES,
    AttentionRecord,
    FixAccounting,
    PartitionLabel,
    TestResult,
    ZeroVariance,
    bonferroni,
    mann_whitney,
    paired_t,
    partition_high_low,
    stratified_accuracy,
)

DEFAULT_BASE_ALPHA = 0.12  # over the default 12 elements this corrects to 0.01


@dataclass
class ElementReport:
    name: str
    kind: str  # "syntax" | "ast"
    mean_correct: Optional[float]
    mean_incorrect: Optional[float]
    mann_whitney: Optional[TestResult]
    paired_t: Optional[TestResult]
    paired_t_note: Optional[str]
    partition: dict[str, int]
    acc_high: Optional[float]
    acc_low: Optional[float]


@dataclass
class BiasReport:
    task: str
    elements: list[ElementReport]
    base_alpha: float
    k: int
    metrics_baseline: dict
    metrics_guided: dict
    fixes: Optional[FixAccounting] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def test_dict(r: Optional[TestResult]) -> Optional[dict]:
            if r is None:
                return None
            return {
                "statistic": r.statistic,
                "p_value": r.p_value,
                "test": r.test,
                "significant_after_bonferroni": r.significant_after_bonferroni,
            }

        return {
            "task": self.task,
            "bonferroni": {
                "base_alpha": self.base_alpha,
                "k": self.k,
                "threshold": self.base_alpha / self.k,
            },
            "elements": [
                {
                    "name": e.name,
                    "kind": e.kind,
                    "mean_correct": e.mean_correct,
                    "mean_incorrect": e.mean_incorrect,
                    "mann_whitney": test_dict(e.mann_whitney),
                    "paired_t": test_dict(e.paired_t),
                    "paired_t_note": e.paired_t_note,
                    "partition": e.partition,
                    "acc_high": e.acc_high,
                    "acc_low": e.acc_low,
                }
                for e in self.elements
            ],
            "metrics": {
                "baseline": self.metrics_baseline,
                "guided": self.metrics_guided,
            },
            "fixes": None
            if self.fixes is None
            else {
                "correct": self.fixes.correct,
                "wrong": self.fixes.wrong,
                "fixed": self.fixes.fixed,
                "broken": self.fixes.broken,
                "fix_pct": self.fixes.fix_pct,
                "baseline_correct": self.fixes.baseline_correct,
                "baseline_wrong": self.fixes.baseline_wrong,
            },
            "extra": self.extra,
        }

    def save_json(self, path: str | Path) -> None:
        payload = self.to_dict()
        validate_report(payload)
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


_NUMBER_OR_NULL = {"type": ["number", "null"]}
_TEST_SCHEMA = {
    "type": ["object", "null"],
    "properties": {
        "statistic": {"type": "number"},
        "p_value": {"type": "number", "minimum": 0, "maximum": 1},
        "test": {"enum": ["MannWhitney", "PairedT"]},
        "significant_after_bonferroni": {"type": "boolean"},
    },
    "required": ["statistic", "p_value", "test", "significant_after_bonferroni"],
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "task": {"enum": ["cloze", "clone"]},
        "bonferroni": {
            "type": "object",
            "properties": {
                "base_alpha": {"type": "number"},
                "k": {"type": "integer", "minimum": 1},
                "threshold": {"type": "number"},
            },
            "required": ["base_alpha", "k", "threshold"],
        },
        "elements": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "kind": {"enum": ["syntax", "ast"]},
                    "mean_correct": _NUMBER_OR_NULL,
                    "mean_incorrect": _NUMBER_OR_NULL,
                    "mann_whitney": _TEST_SCHEMA,
                    "paired_t": _TEST_SCHEMA,
                    "paired_t_note": {"type": ["string", "null"]},
                    "partition": {
                        "type": "object",
                        "properties": {
                            "high": {"type": "integer"},
                            "low": {"type": "integer"},
                            "excluded": {"type": "integer"},
                        },
                        "required": ["high", "low", "excluded"],
                    },
                    "acc_high": _NUMBER_OR_NULL,
                    "acc_low": _NUMBER_OR_NULL,
                },
                "required": [
                    "name",
                    "kind",
                    "mean_correct",
                    "mean_incorrect",
                    "mann_whitney",
                    "paired_t",
                    "partition",
                    "acc_high",
                    "acc_low",
                ],
            },
        },
        "metrics": {"type": "object"},
        "fixes": {
            "type": ["object", "null"],
            "properties": {
                "correct": {"type": "integer"},
                "wrong": {"type": "integer"},
                "fixed": {"type": "integer"},
                "broken": {"type": "integer"},
                "fix_pct": _NUMBER_OR_NULL,
                "baseline_correct": {"type": "integer"},
                "baseline_wrong": {"type": "integer"},
            },
            "required": ["correct", "wrong", "fixed", "broken", "fix_pct"],
        },
        "extra": {"type": "object"},
    },
    "required": ["task", "bonferroni", "elements", "metrics", "fixes"],
}


def validate_report(payload: dict) -> None:
    """Raise jsonschema.ValidationError if the payload breaks the schema."""
    _jsonschema_validate(payload, REPORT_SCHEMA)


def _group_means(
    records: Sequence[AttentionRecord], element: str
) -> tuple[list[float], list[float]]:
    correct, incorrect = [], []
    for r in records:
        combined = {**r.syntax_means, **r.ast_means}
        if element not in combined:
            continue
        (correct if r.prediction_correct else incorrect).append(combined[element])
    return correct, incorrect


def _paired_head_diffs(
    records: Sequence[AttentionRecord], element: str
) -> Optional[np.ndarray]:
    """Per-(layer, head) mean-weight differences, correct minus incorrect."""
    grp = {True: [], False: []}
    for r in records:
        if element in r.element_weights:
            grp[r.prediction_correct].append(r.element_weights[element])
    if not grp[True] or not grp[False]:
        return None
    diff = np.stack(grp[True]).mean(axis=0) - np.stack(grp[False]).mean(axis=0)
    return diff.ravel()


def build_bias_report(
    records: Sequence[AttentionRecord],
    task: str,
    metrics_baseline: dict,
    metrics_guided: dict,
    fixes: Optional[FixAccounting],
    base_alpha: float = DEFAULT_BASE_ALPHA,
    k: Optional[int] = None,
    extra: Optional[dict] = None,
) -> BiasReport:
    """Run the full element-wise comparison over collected records.

    k defaults to the number of elements actually tested, so with the full
    default element set (8 syntax + 4 AST) the corrected threshold is
    base_alpha / 12.
    """
    element_names = [(c.value, "syntax") for c in ANALYZED_SYNTAX_CLASSES]
    element_names += [(a.value, "ast") for a in ANALYZED_AST_KINDS]

    partial: list[dict] = []
    mw_tests: list[TestResult] = []
    for name, kind in element_names:
        correct, incorrect = _group_means(records, name)
        mw = None
        if correct and incorrect:
            mw = mann_whitney(correct, incorrect, element=name)
            mw_tests.append(mw)
        pt = None
        pt_note = None
        diffs = _paired_head_diffs(records, name)
        if diffs is None:
            pt_note = "missing group"
        else:
            try:
                pt = paired_t(diffs, element=name)
            except ZeroVariance:
                pt_note = "zero variance"
        labels = partition_high_low(records, name)
        strata = stratified_accuracy(records, labels)
        partial.append(
            {
                "name": name,
                "kind": kind,
                "mean_correct": float(np.mean(correct)) if correct else None,
                "mean_incorrect": float(np.mean(incorrect)) if incorrect else None,
                "mw": mw,
                "pt": pt,
                "pt_note": pt_note,
                "partition": {
                    "high": sum(l is PartitionLabel.HIGH for l in labels),
                    "low": sum(l is PartitionLabel.LOW for l in labels),
                    "excluded": sum(l is PartitionLabel.EXCLUDED for l in labels),
                },
                "acc_high": strata["acc_high"],
                "acc_low": strata["acc_low"],
            }
        )

    k_effective = k if k is not None else max(len(mw_tests), 1)
    flagged = {r.element: r for r in bonferroni(mw_tests, base_alpha, k_effective)}
    pt_results = [p["pt"] for p in partial if p["pt"] is not None]
    pt_flagged = {r.element: r for r in bonferroni(pt_results, base_alpha, k_effective)}

    elements = [
        ElementReport(
            name=p["name"],
            kind=p["kind"],
            mean_correct=p["mean_correct"],
            mean_incorrect=p["mean_incorrect"],
            mann_whitney=flagged.get(p["name"], p["mw"]),
            paired_t=pt_flagged.get(p["name"], p["pt"]),
            paired_t_note=p["pt_note"],
            partition=p["partition"],
            acc_high=p["acc_high"],
            acc_low=p["acc_low"],
        )
        for p in partial
    ]
    return BiasReport(
        task=task,
        elements=elements,
        base_alpha=base_alpha,
        k=k_effective,
        metrics_baseline=metrics_baseline,
        metrics_guided=metrics_guided,
        fixes=fixes,
        extra=extra or {},
    )


def write_bias_csv(report: BiasReport, path: str | Path) -> None:
    """Plot-ready rows: element, group, mean, p (Mann-Whitney)."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["element", "group", "mean", "p"])
        for e in report.elements:
            p_value = "" if e.mann_whitney is None else repr(e.mann_whitney.p_value)
            for group, mean in (("correct", e.mean_correct), ("incorrect", e.mean_incorrect)):
                writer.writerow(
                    [e.name, group, "" if mean is None else repr(mean), p_value]
                )


def write_strata_csv(report: BiasReport, path: str | Path) -> None:
    """Stratified accuracy rows: element, stratum, accuracy, count."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["element", "stratum", "accuracy", "count"])
        for e in report.elements:
            for stratum, acc, count in (
                ("high", e.acc_high, e.partition["high"]),
                ("low", e.acc_low, e.partition["low"]),
            ):
                writer.writerow(
                    [e.name, stratum, "" if acc is None else repr(acc), count]
                )
