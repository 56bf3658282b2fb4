"""Pattern matrix construction and head assignment tests."""

import numpy as np
import pytest

from attnguide.corpus import CorpusParams, gen_corpus
from attnguide.javacode import SyntaxClass, parse
from attnguide.patterns import (
    InvalidLambda,
    PatternSpec,
    SequenceUnitMismatch,
    assign_heads,
    ast_pattern_specs,
    build_pattern,
    dump_pattern_csv,
    global_pattern_specs,
    local_pattern_specs,
    syntax_pattern_specs,
)
from attnguide.subtok import build_vocab, encode, encode_pair, merge_units


def brute_force_pattern(seq, unit, spec):
    """Independent construction: loop over every (row, column) pair."""
    n = len(seq.ids)
    values = np.zeros((n, n))
    included = np.zeros(n, dtype=bool)
    for p in range(seq.real_len):
        cols = []
        for q in range(seq.real_len):
            if spec.kind == "syntax":
                src = seq.alignment[q]
                if src is not None and unit.tokens[src].syntax_class.value == spec.target:
                    cols.append(q)
            elif spec.kind == "ast":
                src = seq.alignment[q]
                if src is not None and any(
                    s.kind.value == spec.target and s.covers(src)
                    for s in unit.ast_spans
                ):
                    cols.append(q)
            elif spec.kind == "local":
                if (spec.target == "Next" and q == p + 1) or (
                    spec.target == "Prev" and q == p - 1
                ):
                    cols.append(q)
            elif spec.kind == "global":
                wanted = {"First": 0, "CLS": 0}.get(spec.target)
                if wanted is not None and q == wanted:
                    cols.append(q)
                if spec.target == "SEP" and seq.ids[q] == 1:
                    cols.append(q)
        if cols:
            included[p] = True
            for q in cols:
                values[p, q] = 1.0 / len(cols)
    return values, included


@pytest.fixture()
def fig2():
    unit = parse("fig2", "sum = num1 + num2 ;")
    vocab = build_vocab([unit], 64)
    return unit, encode(unit, vocab, 16)


def test_identifier_pattern_matches_brute_force_bit_exactly(fig2):
    unit, seq = fig2
    pm = build_pattern(seq, unit, PatternSpec.syntax("Identifier"))
    values, included = brute_force_pattern(seq, unit, pm.spec)
    assert np.array_equal(pm.values, values)
    assert np.array_equal(pm.row_included, included)
    for p in range(seq.real_len):
        row = pm.values[p]
        assert row[1] == row[3] == row[5] == 1.0 / 3.0
        assert row.sum() == pytest.approx(1.0)
        assert np.count_nonzero(row) == 3


def test_operator_pattern_halves(fig2):
    unit, seq = fig2
    pm = build_pattern(seq, unit, PatternSpec.syntax("Operator"))
    for p in range(seq.real_len):
        assert pm.values[p][2] == pm.values[p][4] == 0.5
        assert np.count_nonzero(pm.values[p]) == 2


def test_pattern_without_matches_excludes_all_rows(fig2):
    unit, seq = fig2
    pm = build_pattern(seq, unit, PatternSpec.syntax("Modifier"))
    assert not pm.row_included.any()
    assert not pm.values.any()


def test_local_next_pattern():
    unit = parse("ln", "a b")
    vocab = build_vocab([unit], 32)
    seq = encode(unit, vocab, 8)  # 4 real positions
    assert seq.real_len == 4
    pm = build_pattern(seq, unit, PatternSpec.local("Next"))
    for p in range(3):
        assert pm.values[p][p + 1] == 1.0
        assert pm.row_included[p]
    assert not pm.row_included[3]
    values, included = brute_force_pattern(seq, unit, pm.spec)
    assert np.array_equal(pm.values, values)
    assert np.array_equal(pm.row_included, included)


def test_local_prev_excludes_first_row(fig2):
    unit, seq = fig2
    pm = build_pattern(seq, unit, PatternSpec.local("Prev"))
    assert not pm.row_included[0]
    assert pm.values[1][0] == 1.0


def test_global_sep_excluded_without_sep(fig2):
    unit, seq = fig2
    pm = build_pattern(seq, unit, PatternSpec.global_position("SEP"))
    assert not pm.row_included.any()


def test_global_sep_on_paired_sequence():
    u1, u2 = parse("a", "x = 1 ;"), parse("b", "y = 2 ;")
    vocab = build_vocab([u1, u2], 64)
    merged = merge_units(u1, u2)
    seq = encode_pair(u1, u2, vocab, 24)
    pm = build_pattern(seq, merged, PatternSpec.global_position("SEP"))
    assert pm.row_included[: seq.real_len].all()
    sep_col = int(np.nonzero(pm.values[0])[0][0])
    assert seq.ids[sep_col] == 1


def test_ast_pattern_covers_span_positions():
    unit = parse("m", "public int f ( int a ) { return a ; }")
    vocab = build_vocab([unit], 128)
    seq = encode(unit, vocab, 32)
    pm = build_pattern(seq, unit, PatternSpec.ast("Return"))
    values, included = brute_force_pattern(seq, unit, pm.spec)
    assert np.array_equal(pm.values, values)
    assert np.array_equal(pm.row_included, included)


def test_row_stochastic_and_pad_columns_zero():
    units = gen_corpus(CorpusParams(40, 8))
    vocab = build_vocab(units, 256)
    all_specs = (
        syntax_pattern_specs()
        + ast_pattern_specs()
        + global_pattern_specs()
        + local_pattern_specs()
    )
    for unit in units[:20]:
        seq = encode(unit, vocab, 48)
        for spec in all_specs:
            pm = build_pattern(seq, unit, spec)
            for p in range(len(seq.ids)):
                if pm.row_included[p]:
                    assert pm.values[p].sum() == pytest.approx(1.0, abs=1e-9)
                    assert (pm.values[p] >= 0).all()
                else:
                    assert not pm.values[p].any()
                assert not pm.values[p][seq.real_len :].any()


def test_identifier_swap_symmetry():
    base = parse("s1", "num1 = num2 + num1 ;")
    swapped = parse("s2", "num2 = num1 + num2 ;")
    vocab = build_vocab([base, swapped], 64)
    seq_a = encode(base, vocab, 16)
    seq_b = encode(swapped, vocab, 16)
    pa = build_pattern(seq_a, base, PatternSpec.syntax("Identifier"))
    pb = build_pattern(seq_b, swapped, PatternSpec.syntax("Identifier"))
    # both identifiers are single subtokens, so the column sets coincide and
    # the matrices are identical
    assert np.array_equal(pa.values, pb.values)


def test_sequence_unit_mismatch(fig2):
    unit, seq = fig2
    other = parse("other", "x = 1 ;")
    with pytest.raises(SequenceUnitMismatch):
        build_pattern(seq, other, PatternSpec.syntax("Identifier"))


def test_while_not_guidable():
    with pytest.raises(ValueError):
        PatternSpec.ast("While")


def test_boolean_not_guidable():
    with pytest.raises(ValueError):
        PatternSpec.syntax("BooleanLit")


def test_spec_string_roundtrip():
    for spec in syntax_pattern_specs() + ast_pattern_specs():
        assert PatternSpec.from_string(str(spec)) == spec


def test_assign_heads_twelve_by_twelve():
    specs = syntax_pattern_specs()
    assert len(specs) == 7
    assignment = assign_heads(12, 12, 0.5, specs)
    for layer in range(12):
        for head in range(6):
            assert assignment.spec_for(layer, head) == specs[head]
        for head in range(6, 12):
            assert assignment.spec_for(layer, head) is None


def test_assign_heads_full_fraction():
    assignment = assign_heads(2, 4, 1.0, syntax_pattern_specs())
    assert all(s is not None for s in assignment.head_specs)


def test_assign_heads_quarter_single_spec():
    spec = PatternSpec.syntax("Identifier")
    assignment = assign_heads(3, 4, 0.25, [spec])
    assert assignment.head_specs == (spec, None, None, None)
    assert all(
        assignment.spec_for(layer, 0) == spec for layer in range(3)
    )


def test_assign_heads_layer_invariance():
    assignment = assign_heads(5, 8, 0.75, syntax_pattern_specs())
    for head in range(8):
        seen = {assignment.spec_for(layer, head) for layer in range(5)}
        assert len(seen) == 1


def test_invalid_lambda():
    with pytest.raises(InvalidLambda):
        assign_heads(2, 4, 0.3, [PatternSpec.syntax("Identifier")])


def test_pattern_csv_dump(tmp_path, fig2):
    unit, seq = fig2
    pm = build_pattern(seq, unit, PatternSpec.syntax("Identifier"))
    path = tmp_path / "pattern.csv"
    dump_pattern_csv(pm, path)
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header == ["syntax:Identifier", "fig2", "16"]
    assert len(lines) == 1 + 16
    parsed = np.array([[float(x) for x in line.split(",")] for line in lines[1:]])
    assert np.array_equal(parsed, pm.values)
