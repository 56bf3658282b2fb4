"""Lexing and statement-span extraction for a compact Java subset.

The supported grammar covers declarations, assignments, arithmetic /
relational / logical expressions, if-else, while, return, and method
definitions inside a single class, with string / boolean / integer
literals. Comments and whitespace are dropped. Anything outside the
subset raises UnsupportedConstruct so corpus/grammar drift fails loudly
instead of producing silently misclassified tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class SyntaxClass(Enum):
    """Lexical category of a source token."""

    IDENTIFIER = "Identifier"
    MODIFIER = "Modifier"
    OPERATOR = "Operator"
    DATA_TYPE = "DataType"
    SEPARATOR = "Separator"
    KEYWORD = "Keyword"
    STRING_LIT = "StringLit"
    BOOLEAN_LIT = "BooleanLit"
    # Integer literals occur in generated code but belong to none of the
    # eight analyzed categories; they match no guiding pattern.
    NUM_LITERAL = "NumLiteral"

    def __str__(self) -> str:
        return self.value


class AstKind(Enum):
    """Statement kinds recognized by the span extractor."""

    METHOD_SIGNATURE = "MethodSignature"
    IF_ELSE = "IfElse"
    WHILE = "While"
    RETURN = "Return"

    def __str__(self) -> str:
        return self.value


class UnsupportedConstruct(ValueError):
    """A character or construct outside the Java subset."""

    def __init__(self, offset: int, detail: str = ""):
        self.offset = offset
        msg = f"unsupported construct at byte {offset}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class MalformedStatement(ValueError):
    """The statement recognizer hit unbalanced or truncated delimiters."""

    def __init__(self, index: int, detail: str = ""):
        self.index = index
        msg = f"malformed statement at token {index}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass(frozen=True)
class SourceToken:
    lexeme: str
    byte_span: tuple[int, int]  # half-open offsets into the snippet
    syntax_class: SyntaxClass
    index: int


@dataclass(frozen=True)
class AstSpan:
    kind: AstKind
    token_range: tuple[int, int]  # half-open range of token indices

    def covers(self, token_index: int) -> bool:
        return self.token_range[0] <= token_index < self.token_range[1]


@dataclass(frozen=True)
class CodeUnit:
    id: str
    raw: str
    tokens: tuple[SourceToken, ...]
    ast_spans: tuple[AstSpan, ...]

    def token_indices_of_kind(self, kind: AstKind) -> frozenset[int]:
        """All token indices covered by any span of the given kind."""
        hit: set[int] = set()
        for span in self.ast_spans:
            if span.kind is kind:
                hit.update(range(*span.token_range))
        return frozenset(hit)


MODIFIERS = frozenset({"public", "private", "protected", "static", "final"})
DATA_TYPES = frozenset(
    {"int", "long", "short", "byte", "float", "double", "boolean", "char", "void"}
)
KEYWORDS = frozenset({"if", "else", "while", "return", "class"})
BOOLEAN_LITERALS = frozenset({"true", "false"})

# Compound operators listed before their single-character prefixes so the
# longest match wins:  '<=' must not lex as '<' '='.
OPERATORS = (
    "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=", "/=", "%=",
    "=", "+", "-", "*", "/", "%", "<", ">", "!",
)
SEPARATORS = frozenset({";", ",", "(", ")", "{", "}"})


def _classify_word(word: str) -> SyntaxClass:
    if word in MODIFIERS:
        return SyntaxClass.MODIFIER
    if word in DATA_TYPES:
        return SyntaxClass.DATA_TYPE
    if word in KEYWORDS:
        return SyntaxClass.KEYWORD
    if word in BOOLEAN_LITERALS:
        return SyntaxClass.BOOLEAN_LIT
    return SyntaxClass.IDENTIFIER


def lex(raw: str) -> tuple[SourceToken, ...]:
    """Tokenize raw text into classified tokens.

    Comments and whitespace are dropped. Every emitted token gets exactly
    one SyntaxClass. Byte spans equal character offsets because the subset
    is ASCII-only (non-ASCII input is rejected up front).
    """
    for pos, ch in enumerate(raw):
        if ord(ch) > 127:
            raise UnsupportedConstruct(len(raw[:pos].encode("utf-8")), f"non-ASCII {ch!r}")

    found: list[tuple[str, tuple[int, int], SyntaxClass]] = []
    i, n = 0, len(raw)
    while i < n:
        ch = raw[i]
        if ch in " \t\r\n":
            i += 1
        elif raw.startswith("//", i):
            nl = raw.find("\n", i)
            i = n if nl < 0 else nl + 1
        elif raw.startswith("/*", i):
            end = raw.find("*/", i + 2)
            if end < 0:
                raise UnsupportedConstruct(i, "unterminated block comment")
            i = end + 2
        elif ch == '"':
            i = _lex_string(raw, i, found)
        elif ch.isdigit():
            j = i
            while j < n and raw[j].isdigit():
                j += 1
            if j < n and (raw[j].isalpha() or raw[j] in "._"):
                raise UnsupportedConstruct(j, "only plain integer literals supported")
            found.append((raw[i:j], (i, j), SyntaxClass.NUM_LITERAL))
            i = j
        elif ch.isalpha() or ch == "_":
            j = i
            while j < n and (raw[j].isalnum() or raw[j] == "_"):
                j += 1
            word = raw[i:j]
            found.append((word, (i, j), _classify_word(word)))
            i = j
        else:
            for op in OPERATORS:
                if raw.startswith(op, i):
                    found.append((op, (i, i + len(op)), SyntaxClass.OPERATOR))
                    i += len(op)
                    break
            else:
                if ch in SEPARATORS:
                    found.append((ch, (i, i + 1), SyntaxClass.SEPARATOR))
                    i += 1
                else:
                    raise UnsupportedConstruct(i, f"character {ch!r}")

    return tuple(
        SourceToken(lexeme, span, cls, index)
        for index, (lexeme, span, cls) in enumerate(found)
    )


def _lex_string(raw: str, start: int, found: list) -> int:
    j = start + 1
    n = len(raw)
    while j < n:
        ch = raw[j]
        if ch == "\\":
            if j + 1 >= n or raw[j + 1] not in '"\\nt':
                raise UnsupportedConstruct(j, "unsupported escape")
            j += 2
        elif ch == '"':
            found.append((raw[start : j + 1], (start, j + 1), SyntaxClass.STRING_LIT))
            return j + 1
        elif ch == "\n":
            raise UnsupportedConstruct(start, "unterminated string literal")
        else:
            j += 1
    raise UnsupportedConstruct(start, "unterminated string literal")


class _StatementWalker:
    """Recursive-descent recognizer for the four statement kinds.

    Lenient outside the four constructs (unknown statements are skipped
    token-wise); strict about delimiter balance inside them.
    """

    def __init__(self, tokens: tuple[SourceToken, ...]):
        self.toks = tokens
        self.n = len(tokens)
        self.spans: list[AstSpan] = []

    def run(self) -> tuple[AstSpan, ...]:
        i = 0
        while i < self.n:
            i = self._statement(i)
        return _outermost_per_kind(self.spans)

    def _statement(self, i: int) -> int:
        tok = self.toks[i]
        if tok.syntax_class is SyntaxClass.KEYWORD:
            if tok.lexeme == "if":
                return self._if(i)
            if tok.lexeme == "while":
                return self._while(i)
            if tok.lexeme == "return":
                return self._return(i)
        if tok.lexeme == "{":
            return self._block(i)
        if self._method_ahead(i):
            return self._method(i)
        return self._generic(i)

    def _method_ahead(self, i: int) -> bool:
        # [modifier]* (type | identifier) identifier '('  starts a method;
        # a declaration has '=' or ';' where the '(' would be.
        j = i
        while j < self.n and self.toks[j].syntax_class is SyntaxClass.MODIFIER:
            j += 1
        return (
            j + 2 < self.n
            and self.toks[j].syntax_class
            in (SyntaxClass.DATA_TYPE, SyntaxClass.IDENTIFIER)
            and self.toks[j + 1].syntax_class is SyntaxClass.IDENTIFIER
            and self.toks[j + 2].lexeme == "("
        )

    def _method(self, i: int) -> int:
        j = i
        while self.toks[j].syntax_class is SyntaxClass.MODIFIER:
            j += 1
        open_paren = j + 2
        close = self._match_paren(open_paren)
        self.spans.append(AstSpan(AstKind.METHOD_SIGNATURE, (i, close + 1)))
        body = close + 1
        if body >= self.n or self.toks[body].lexeme != "{":
            raise MalformedStatement(close, "method body expected")
        return self._block(body)

    def _if(self, i: int) -> int:
        end = self._cond_and_branch(i)
        if end < self.n and self.toks[end].lexeme == "else":
            if end + 1 >= self.n:
                raise MalformedStatement(end, "else branch expected")
            end = self._statement(end + 1)
        self.spans.append(AstSpan(AstKind.IF_ELSE, (i, end)))
        return end

    def _while(self, i: int) -> int:
        end = self._cond_and_branch(i)
        self.spans.append(AstSpan(AstKind.WHILE, (i, end)))
        return end

    def _cond_and_branch(self, i: int) -> int:
        if i + 1 >= self.n or self.toks[i + 1].lexeme != "(":
            raise MalformedStatement(i, "condition expected")
        close = self._match_paren(i + 1)
        if close + 1 >= self.n:
            raise MalformedStatement(close, "branch body expected")
        return self._statement(close + 1)

    def _return(self, i: int) -> int:
        j = i + 1
        while j < self.n:
            lexeme = self.toks[j].lexeme
            if lexeme == ";":
                self.spans.append(AstSpan(AstKind.RETURN, (i, j + 1)))
                return j + 1
            if lexeme == "}":
                break
            j += 1
        raise MalformedStatement(i, "return without terminating ';'")

    def _block(self, i: int) -> int:
        j = i + 1
        while True:
            if j >= self.n:
                raise MalformedStatement(i, "unclosed block")
            if self.toks[j].lexeme == "}":
                return j + 1
            j = self._statement(j)

    def _match_paren(self, open_index: int) -> int:
        depth = 0
        for j in range(open_index, self.n):
            lexeme = self.toks[j].lexeme
            if lexeme == "(":
                depth += 1
            elif lexeme == ")":
                depth -= 1
                if depth == 0:
                    return j
        raise MalformedStatement(open_index, "unbalanced parentheses")

    def _generic(self, i: int) -> int:
        depth = 0
        j = i
        while j < self.n:
            lexeme = self.toks[j].lexeme
            if lexeme == "(":
                depth += 1
            elif lexeme == ")":
                if depth == 0:
                    return j + 1
                depth -= 1
            elif lexeme == ";" and depth == 0:
                return j + 1
            elif lexeme in ("{", "}") and depth == 0:
                # hand '{' (e.g. a class body) or a closing '}' back to the caller
                return j if j > i else j + 1
            j += 1
        return self.n


def _outermost_per_kind(spans: list[AstSpan]) -> tuple[AstSpan, ...]:
    # Same-kind spans must not overlap; nested same-kind constructs are
    # absorbed into the outermost one.
    kept = [
        s
        for s in spans
        if not any(
            o is not s
            and o.kind is s.kind
            and o.token_range[0] <= s.token_range[0]
            and s.token_range[1] <= o.token_range[1]
            for o in spans
        )
    ]
    kept.sort(key=lambda s: (s.token_range[0], s.token_range[1], s.kind.value))
    return tuple(kept)


def extract_ast_spans(tokens: tuple[SourceToken, ...]) -> tuple[AstSpan, ...]:
    """Recognize method-signature, if-else, while, and return spans."""
    return _StatementWalker(tokens).run()


def parse(unit_id: str, raw: str) -> CodeUnit:
    """Lex and span-extract a snippet into a CodeUnit."""
    tokens = lex(raw)
    return CodeUnit(unit_id, raw, tokens, extract_ast_spans(tokens))


def reconstruction_ok(unit: CodeUnit) -> bool:
    """Whitespace-stripped lexeme concatenation must equal the stripped raw.

    Only meaningful for comment-free input (comments are dropped by lex).
    """
    joined = " ".join(t.lexeme for t in unit.tokens)
    strip = lambda s: "".join(s.split())
    return strip(joined) == strip(unit.raw)
