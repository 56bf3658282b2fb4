"""Guiding target matrices over aligned sequences.

A pattern picks, for every query row, the set of key columns an attention
head should concentrate on: positions of one syntax class, positions inside
one statement kind, a fixed global position, or the previous/next position.
Indicator rows are normalized to probability distributions so they live on
the same scale as softmax attention rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import floor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .javacode import AstKind, CodeUnit, SyntaxClass
from .subtok import AlignedSequence, CLS_ID, SEP_ID

# Boolean literals are analyzed but never guided; While statements likewise.
GUIDED_SYNTAX_CLASSES = (
    SyntaxClass.MODIFIER,
    SyntaxClass.SEPARATOR,
    SyntaxClass.KEYWORD,
    SyntaxClass.IDENTIFIER,
    SyntaxClass.DATA_TYPE,
    SyntaxClass.OPERATOR,
    SyntaxClass.STRING_LIT,
)
GUIDED_AST_KINDS = (AstKind.METHOD_SIGNATURE, AstKind.IF_ELSE, AstKind.RETURN)

GLOBAL_TARGETS = ("First", "CLS", "SEP")
LOCAL_TARGETS = ("Next", "Prev")

ALLOWED_LAMBDAS = (0.25, 0.5, 0.75, 1.0)


class SequenceUnitMismatch(ValueError):
    """The aligned sequence was not derived from the given code unit."""


class InvalidLambda(ValueError):
    """Guided-head fraction must be one of 1/4, 1/2, 3/4, 1."""


@dataclass(frozen=True)
class PatternSpec:
    """What a guided head should attend to."""

    kind: str  # "syntax" | "ast" | "global" | "local"
    target: str

    def __post_init__(self):
        if self.kind == "syntax":
            allowed = {c.value for c in GUIDED_SYNTAX_CLASSES}
        elif self.kind == "ast":
            allowed = {k.value for k in GUIDED_AST_KINDS}
        elif self.kind == "global":
            allowed = set(GLOBAL_TARGETS)
        elif self.kind == "local":
            allowed = set(LOCAL_TARGETS)
        else:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if self.target not in allowed:
            raise ValueError(f"{self.target!r} is not a valid {self.kind} pattern target")

    @classmethod
    def syntax(cls, syntax_class: SyntaxClass | str) -> "PatternSpec":
        value = syntax_class.value if isinstance(syntax_class, SyntaxClass) else syntax_class
        return cls("syntax", value)

    @classmethod
    def ast(cls, kind: AstKind | str) -> "PatternSpec":
        value = kind.value if isinstance(kind, AstKind) else kind
        return cls("ast", value)

    @classmethod
    def global_position(cls, target: str) -> "PatternSpec":
        return cls("global", target)

    @classmethod
    def local(cls, target: str) -> "PatternSpec":
        return cls("local", target)

    def __str__(self) -> str:
        return f"{self.kind}:{self.target}"

    @classmethod
    def from_string(cls, text: str) -> "PatternSpec":
        kind, _, target = text.partition(":")
        return cls(kind, target)


def syntax_pattern_specs() -> tuple[PatternSpec, ...]:
    """The seven syntax-token guiding patterns, identifier first."""
    order = (
        SyntaxClass.IDENTIFIER,
        SyntaxClass.SEPARATOR,
        SyntaxClass.OPERATOR,
        SyntaxClass.KEYWORD,
        SyntaxClass.DATA_TYPE,
        SyntaxClass.MODIFIER,
        SyntaxClass.STRING_LIT,
    )
    return tuple(PatternSpec.syntax(c) for c in order)


def ast_pattern_specs() -> tuple[PatternSpec, ...]:
    return tuple(PatternSpec.ast(k) for k in GUIDED_AST_KINDS)


def global_pattern_specs() -> tuple[PatternSpec, ...]:
    return tuple(PatternSpec.global_position(t) for t in GLOBAL_TARGETS)


def local_pattern_specs() -> tuple[PatternSpec, ...]:
    return tuple(PatternSpec.local(t) for t in LOCAL_TARGETS)


@dataclass(eq=False)
class PatternMatrix:
    """Row-stochastic guiding target; excluded rows are all-zero."""

    values: np.ndarray  # (n, n) float64
    row_included: np.ndarray  # (n,) bool
    spec: PatternSpec
    unit_id: str
    real_len: int


def _match_columns(seq: AlignedSequence, unit: CodeUnit, spec: PatternSpec) -> list[int]:
    real = seq.real_len
    if spec.kind == "syntax":
        wanted = SyntaxClass(spec.target)
        return [
            q
            for q in range(real)
            if seq.alignment[q] is not None
            and unit.tokens[seq.alignment[q]].syntax_class is wanted
        ]
    if spec.kind == "ast":
        member = unit.token_indices_of_kind(AstKind(spec.target))
        return [q for q in range(real) if seq.alignment[q] in member]
    if spec.kind == "global":
        if spec.target == "First":
            return [0]
        if spec.target == "CLS":
            return [q for q in range(real) if seq.ids[q] == CLS_ID][:1]
        # SEP: absent in single-segment sequences, leaving every row excluded
        return [q for q in range(real) if seq.ids[q] == SEP_ID][:1]
    raise ValueError(f"no static column set for {spec}")


def build_pattern(seq: AlignedSequence, unit: CodeUnit, spec: PatternSpec) -> PatternMatrix:
    """Construct the n x n guiding target for one pattern over one sequence.

    Rows whose match set is empty are excluded (flag False, all-zero row);
    included rows are uniform over the matching columns. Padding columns are
    zero everywhere.
    """
    if not (seq.unit_id == unit.id):
        raise SequenceUnitMismatch(
            f"sequence for unit {seq.unit_id!r} paired with unit {unit.id!r}"
        )
    n = len(seq)
    real = seq.real_len
    values = np.zeros((n, n), dtype=np.float64)
    included = np.zeros(n, dtype=bool)

    if spec.kind == "local":
        step = 1 if spec.target == "Next" else -1
        for p in range(real):
            q = p + step
            if 0 <= q < real:
                values[p, q] = 1.0
                included[p] = True
        return PatternMatrix(values, included, spec, unit.id, real)

    columns = _match_columns(seq, unit, spec)
    if columns:
        weight = 1.0 / len(columns)
        for p in range(real):
            values[p, columns] = weight
            included[p] = True
    return PatternMatrix(values, included, spec, unit.id, real)


@dataclass(frozen=True)
class HeadAssignment:
    """Per-head guiding map, identical across layers."""

    num_layers: int
    heads_per_layer: int
    head_specs: tuple[Optional[PatternSpec], ...]

    def spec_for(self, layer: int, head: int) -> Optional[PatternSpec]:
        if not (0 <= layer < self.num_layers):
            raise IndexError(f"layer {layer} out of range")
        return self.head_specs[head]

    @property
    def guided_heads(self) -> tuple[tuple[int, PatternSpec], ...]:
        return tuple(
            (j, spec) for j, spec in enumerate(self.head_specs) if spec is not None
        )

    @property
    def distinct_specs(self) -> tuple[PatternSpec, ...]:
        seen: dict[PatternSpec, None] = {}
        for _, spec in self.guided_heads:
            seen.setdefault(spec)
        return tuple(seen)


def assign_heads(
    num_layers: int,
    heads_per_layer: int,
    lam: float,
    specs: Sequence[PatternSpec],
) -> HeadAssignment:
    """Guide the first floor(lam * heads) head indices, in every layer.

    Guided head j receives specs[j mod len(specs)]; the per-head mapping is
    constant across layers.
    """
    if lam not in ALLOWED_LAMBDAS:
        raise InvalidLambda(f"lambda must be one of {ALLOWED_LAMBDAS}, got {lam}")
    if not specs:
        raise ValueError("at least one pattern spec is required")
    guided = floor(lam * heads_per_layer)
    head_specs = tuple(
        specs[j % len(specs)] if j < guided else None for j in range(heads_per_layer)
    )
    return HeadAssignment(num_layers, heads_per_layer, head_specs)


def dump_pattern_csv(matrix: PatternMatrix, path: str | Path) -> None:
    """One matrix per file: header "spec,unit_id,n", then n rows of n decimals."""
    n = matrix.values.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([str(matrix.spec), matrix.unit_id, n])
        for row in matrix.values:
            writer.writerow([repr(float(x)) for x in row])
