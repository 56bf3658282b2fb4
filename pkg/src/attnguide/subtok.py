"""Subword vocabulary, aligned encoding, and attention re-aggregation.

Source tokens are segmented independently by greedy longest match against
the vocabulary, so every subtoken position maps back to exactly one source
token. That alignment is what lets per-position attention weights be folded
back onto source tokens.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .javacode import CodeUnit, SourceToken

CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
EOS_TOKEN = "[EOS]"
MASK_TOKEN = "[MASK]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"

SPECIAL_TOKENS = (CLS_TOKEN, SEP_TOKEN, EOS_TOKEN, MASK_TOKEN, PAD_TOKEN, UNK_TOKEN)
CLS_ID, SEP_ID, EOS_ID, MASK_ID, PAD_ID, UNK_ID = range(6)


class EmptyCorpus(ValueError):
    """Vocabulary construction needs at least one code unit."""


class LengthMismatch(ValueError):
    """Weight vector length does not match the sequence length."""


@dataclass(frozen=True)
class Vocab:
    """Ordered subword vocabulary; the six specials occupy ids 0..5."""

    entries: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _max_piece_len: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.entries[:6]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the six special tokens")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("vocabulary entries must be unique")
        object.__setattr__(self, "_index", {e: i for i, e in enumerate(self.entries)})
        real = [e for e in self.entries[6:]]
        object.__setattr__(self, "_max_piece_len", max((len(e) for e in real), default=0))

    def __len__(self) -> int:
        return len(self.entries)

    def id_of(self, piece: str) -> Optional[int]:
        return self._index.get(piece)

    def token(self, token_id: int) -> str:
        return self.entries[token_id]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.entries) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


def build_vocab(corpus: Sequence[CodeUnit], max_size: int) -> Vocab:
    """Specials + every seen character + most frequent multi-char substrings.

    Substring candidates are all length>=2 slices of lexemes, ranked by
    occurrence count then lexicographically, cut off at max_size total
    entries. Deterministic for a given corpus.
    """
    if not corpus:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")

    chars: set[str] = set()
    counts: Counter[str] = Counter()
    for unit in corpus:
        for tok in unit.tokens:
            lexeme = tok.lexeme
            chars.update(lexeme)
            for a in range(len(lexeme) - 1):
                for b in range(a + 2, len(lexeme) + 1):
                    counts[lexeme[a:b]] += 1

    alphabet = sorted(chars)
    if max_size < 6 + len(alphabet):
        raise ValueError(
            f"max_size={max_size} cannot hold specials plus {len(alphabet)} characters"
        )
    room = max_size - 6 - len(alphabet)
    merged = sorted(counts, key=lambda s: (-counts[s], s))[:room]
    return Vocab(SPECIAL_TOKENS + tuple(alphabet) + tuple(merged))


@dataclass(eq=False)
class AlignedSequence:
    """Model-ready id sequence with a per-position source-token alignment.

    alignment[p] is the source-token index feeding position p, or None for
    specials and padding. Position 0 is [CLS]; position real_len-1 is [EOS].
    """

    ids: np.ndarray  # (max_len,) int64
    alignment: tuple[Optional[int], ...]
    real_len: int
    unit_id: str

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def _segment(lexeme: str, vocab: Vocab) -> list[int]:
    # Greedy longest match; unknown characters fall back to [UNK] one at a time.
    pieces: list[int] = []
    i = 0
    while i < len(lexeme):
        match_id = UNK_ID
        match_len = 1
        limit = min(vocab._max_piece_len, len(lexeme) - i)
        for width in range(limit, 0, -1):
            candidate = vocab.id_of(lexeme[i : i + width])
            if candidate is not None and candidate >= 6:
                match_id = candidate
                match_len = width
                break
        pieces.append(match_id)
        i += match_len
    return pieces


def _assemble(
    parts: list[tuple[Optional[int], list[int]]],
    unit_id: str,
    max_len: int,
) -> AlignedSequence:
    """parts = [(source index or None for a special, piece ids)] in order.

    The leading [CLS] and trailing [EOS] are added here; truncation drops
    trailing source tokens whole so the alignment invariants always hold.
    """
    ids: list[int] = [CLS_ID]
    alignment: list[Optional[int]] = [None]
    budget = max_len - 1  # reserve [EOS]
    for source_index, pieces in parts:
        if len(ids) + len(pieces) > budget:
            break
        ids.extend(pieces)
        alignment.extend([source_index] * len(pieces))
    ids.append(EOS_ID)
    alignment.append(None)
    real_len = len(ids)
    ids.extend([PAD_ID] * (max_len - real_len))
    alignment.extend([None] * (max_len - real_len))
    return AlignedSequence(np.array(ids, dtype=np.int64), tuple(alignment), real_len, unit_id)


def encode(unit: CodeUnit, vocab: Vocab, max_len: int) -> AlignedSequence:
    """Encode one unit as [CLS] subtokens [EOS] padded to max_len."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    parts = [(tok.index, _segment(tok.lexeme, vocab)) for tok in unit.tokens]
    return _assemble(parts, unit.id, max_len)


def merge_units(a: CodeUnit, b: CodeUnit) -> CodeUnit:
    """Concatenate two units into one, reindexing b's tokens and spans.

    Used for paired-input tasks so pattern construction and analysis can
    treat the pair as a single token stream.
    """
    from .javacode import AstSpan  # local import to avoid cycle noise

    offset = len(a.tokens)
    byte_offset = len(a.raw) + 1
    moved_tokens = tuple(
        SourceToken(
            t.lexeme,
            (t.byte_span[0] + byte_offset, t.byte_span[1] + byte_offset),
            t.syntax_class,
            t.index + offset,
        )
        for t in b.tokens
    )
    moved_spans = tuple(
        AstSpan(s.kind, (s.token_range[0] + offset, s.token_range[1] + offset))
        for s in b.ast_spans
    )
    return CodeUnit(
        f"{a.id}+{b.id}",
        a.raw + " " + b.raw,
        a.tokens + moved_tokens,
        a.ast_spans + moved_spans,
    )


def encode_pair(a: CodeUnit, b: CodeUnit, vocab: Vocab, max_len: int) -> AlignedSequence:
    """Encode a pair as [CLS] a [SEP] b [EOS]; alignment indexes merge_units(a, b).

    Truncation drops source tokens whole, from the tail of b first.
    """
    if max_len < 4:
        raise ValueError("max_len must be at least 4 for paired input")
    offset = len(a.tokens)
    parts: list[tuple[Optional[int], list[int]]] = [
        (tok.index, _segment(tok.lexeme, vocab)) for tok in a.tokens
    ]
    parts.append((None, [SEP_ID]))
    parts.extend(
        (tok.index + offset, _segment(tok.lexeme, vocab)) for tok in b.tokens
    )
    return _assemble(parts, f"{a.id}+{b.id}", max_len)


def aggregate_to_source(
    att_received: np.ndarray,
    alignment: Sequence[Optional[int]],
    num_source_tokens: Optional[int] = None,
) -> tuple[np.ndarray, float]:
    """Fold per-position weights onto source tokens by summation.

    Returns (per-source-token weights, total weight on specials and padding).
    Weight mass is conserved: out.sum() + specials == att_received.sum().
    """
    att_received = np.asarray(att_received, dtype=np.float64)
    if att_received.shape != (len(alignment),):
        raise LengthMismatch(
            f"weight vector of length {att_received.shape} does not match "
            f"sequence length {len(alignment)}"
        )
    if num_source_tokens is None:
        present = [x for x in alignment if x is not None]
        num_source_tokens = max(present) + 1 if present else 0
    out = np.zeros(num_source_tokens, dtype=np.float64)
    specials = 0.0
    for weight, source in zip(att_received, alignment):
        if source is None:
            specials += weight
        else:
            out[source] += weight
    return out, float(specials)


def decode_source_tokens(seq: AlignedSequence, vocab: Vocab) -> dict[int, str]:
    """Regroup non-special subtokens by alignment into source-token strings."""
    grouped: dict[int, list[str]] = {}
    for position in range(seq.real_len):
        source = seq.alignment[position]
        if source is not None:
            grouped.setdefault(source, []).append(vocab.token(int(seq.ids[position])))
    return {source: "".join(pieces) for source, pieces in grouped.items()}
