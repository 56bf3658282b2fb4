"""Synthetic Java-subset corpus generation and JSON-lines IO.

Snippets are grammar-driven, space-separated token streams drawn from a
fixed identifier/literal pool, so every one of them lexes, parses, and
reconstructs exactly. Template weights control how often each statement
shape appears; the default profile keeps every syntax class and statement
kind above one percent of snippets.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .javacode import CodeUnit, SyntaxClass, parse

IDENT_POOL = (
    "sum", "num1", "num2", "count", "total", "value", "result",
    "idx", "limit", "acc", "size", "temp", "left", "right",
)
RENAME_POOL = (
    "alpha", "beta", "gamma", "delta", "omega", "theta", "kappa",
    "sigma", "zeta", "lambda1", "mu", "nu", "xi", "rho",
)
WORD_POOL = ("alpha", "beta", "hello", "world", "data", "input", "done", "ok")
METHOD_NAMES = ("add", "scale", "combine", "check", "compute", "update")

ARITH_OPS = ("+", "-", "*", "/", "%")
REL_OPS = ("<", ">", "<=", ">=", "==", "!=")
COMPOUND_OPS = ("+=", "-=", "*=")

DEFAULT_PROFILE: dict[str, float] = {
    "assign": 0.16,
    "compound": 0.06,
    "decl": 0.12,
    "bool_decl": 0.08,
    "string_decl": 0.08,
    "if_else": 0.15,
    "while": 0.12,
    "return": 0.08,
    "method": 0.15,
}


@dataclass(frozen=True)
class CorpusParams:
    num_snippets: int
    seed: int
    profile: Optional[dict[str, float]] = None


def _ident(rng: random.Random) -> str:
    return rng.choice(IDENT_POOL)


def _operand(rng: random.Random) -> str:
    return _ident(rng) if rng.random() < 0.7 else str(rng.randrange(10))


def _arith(rng: random.Random, max_terms: int = 3) -> str:
    terms = rng.randint(1, max_terms)
    parts = [_operand(rng)]
    for _ in range(terms - 1):
        parts += [rng.choice(ARITH_OPS), _operand(rng)]
    return " ".join(parts)


def _condition(rng: random.Random) -> str:
    first = f"{_operand(rng)} {rng.choice(REL_OPS)} {_operand(rng)}"
    if rng.random() < 0.25:
        second = f"{_operand(rng)} {rng.choice(REL_OPS)} {_operand(rng)}"
        return f"{first} {rng.choice(('&&', '||'))} {second}"
    if rng.random() < 0.15:
        return rng.choice(("true", "false"))
    return first


def _simple_statement(rng: random.Random) -> str:
    roll = rng.random()
    if roll < 0.6:
        return f"{_ident(rng)} = {_arith(rng, 2)} ;"
    if roll < 0.8:
        return f"{_ident(rng)} {rng.choice(COMPOUND_OPS)} {_operand(rng)} ;"
    return f"return {_arith(rng, 2)} ;"


def _t_assign(rng: random.Random) -> str:
    return f"{_ident(rng)} = {_arith(rng)} ;"


def _t_compound(rng: random.Random) -> str:
    return f"{_ident(rng)} {rng.choice(COMPOUND_OPS)} {_operand(rng)} ;"


def _t_decl(rng: random.Random) -> str:
    prefix = "final " if rng.random() < 0.3 else ""
    dtype = rng.choice(("int", "long", "double"))
    return f"{prefix}{dtype} {_ident(rng)} = {_arith(rng, 2)} ;"


def _t_bool_decl(rng: random.Random) -> str:
    value = rng.choice(("true", "false", _condition(rng)))
    return f"boolean {_ident(rng)} = {value} ;"


def _t_string_decl(rng: random.Random) -> str:
    return f'String {_ident(rng)} = "{rng.choice(WORD_POOL)}" ;'


def _t_if_else(rng: random.Random) -> str:
    then_part = _simple_statement(rng)
    if rng.random() < 0.7:
        return f"if ( {_condition(rng)} ) {{ {then_part} }} else {{ {_simple_statement(rng)} }}"
    return f"if ( {_condition(rng)} ) {{ {then_part} }}"


def _t_while(rng: random.Random) -> str:
    body = _simple_statement(rng)
    if rng.random() < 0.4:
        body += f" {_simple_statement(rng)}"
    return f"while ( {_condition(rng)} ) {{ {body} }}"


def _t_return(rng: random.Random) -> str:
    return f"return {_arith(rng)} ;"


def _t_method(rng: random.Random) -> str:
    mods = rng.choice(("public", "public static", "private", "static"))
    name = rng.choice(METHOD_NAMES)
    arity = rng.randint(0, 2)
    params = " , ".join(f"int {rng.choice(RENAME_POOL)}" for _ in range(arity))
    body = []
    if rng.random() < 0.5:
        body.append(_simple_statement(rng))
    body.append(f"return {_arith(rng, 2)} ;")
    return f"{mods} int {name} ( {params} ) {{ {' '.join(body)} }}"


_TEMPLATES = {
    "assign": _t_assign,
    "compound": _t_compound,
    "decl": _t_decl,
    "bool_decl": _t_bool_decl,
    "string_decl": _t_string_decl,
    "if_else": _t_if_else,
    "while": _t_while,
    "return": _t_return,
    "method": _t_method,
}


def gen_snippets(params: CorpusParams) -> list[tuple[str, str, str]]:
    """Generate (id, template name, code) triples, deterministic per seed."""
    rng = random.Random(params.seed)
    profile = params.profile or DEFAULT_PROFILE
    names = sorted(profile)
    weights = [profile[name] for name in names]
    out = []
    for i in range(params.num_snippets):
        template = rng.choices(names, weights=weights, k=1)[0]
        out.append((f"s{i:06d}", template, _TEMPLATES[template](rng)))
    return out


def gen_corpus(params: CorpusParams) -> list[CodeUnit]:
    """Generate and parse a corpus; every snippet is valid by construction."""
    return [parse(uid, code) for uid, _, code in gen_snippets(params)]


def rename_identifiers(unit: CodeUnit, rng: random.Random, new_id: str) -> CodeUnit:
    """Rewrite the unit with a fresh injective identifier mapping.

    "String" stays fixed (it acts as a type name); all other identifiers are
    mapped onto a disjoint pool, giving a structurally identical clone.
    """
    originals = []
    for tok in unit.tokens:
        if (
            tok.syntax_class is SyntaxClass.IDENTIFIER
            and tok.lexeme != "String"
            and tok.lexeme not in originals
        ):
            originals.append(tok.lexeme)
    fresh = [name for name in RENAME_POOL if name not in originals]
    rng.shuffle(fresh)
    mapping = dict(zip(originals, fresh))
    lexemes = [
        mapping.get(t.lexeme, t.lexeme)
        if t.syntax_class is SyntaxClass.IDENTIFIER
        else t.lexeme
        for t in unit.tokens
    ]
    return parse(new_id, " ".join(lexemes))


def gen_clone_pairs(
    num_pairs: int, seed: int
) -> list[tuple[CodeUnit, CodeUnit, int]]:
    """Balanced toy clone task: positives are identifier-renamed duplicates,
    negatives pair snippets from different templates."""
    rng = random.Random(seed)
    params = CorpusParams(num_snippets=max(2 * num_pairs, 8), seed=seed)
    tagged = [
        (parse(uid, code), template) for uid, template, code in gen_snippets(params)
    ]
    pairs: list[tuple[CodeUnit, CodeUnit, int]] = []
    cursor = 0
    while len(pairs) < num_pairs and cursor < len(tagged):
        unit, template = tagged[cursor]
        if len(pairs) % 2 == 0:
            clone = rename_identifiers(unit, rng, f"{unit.id}r")
            pairs.append((unit, clone, 1))
            cursor += 1
        else:
            partner = None
            for j in range(cursor + 1, len(tagged)):
                if tagged[j][1] != template:
                    partner = tagged[j][0]
                    cursor_next = j
                    break
            if partner is None:
                cursor += 1
                continue
            pairs.append((unit, partner, 0))
            # consume both ends so negatives do not reuse snippets
            tagged.pop(cursor_next)
            cursor += 1
    return pairs


def write_corpus_jsonl(units: list[CodeUnit], path: str | Path) -> None:
    """One {"id", "code"} object per line, UTF-8 with LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for unit in units:
            handle.write(json.dumps({"id": unit.id, "code": unit.raw}) + "\n")


def read_corpus_jsonl(path: str | Path) -> list[CodeUnit]:
    units = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            units.append(parse(obj["id"], obj["code"]))
    return units
