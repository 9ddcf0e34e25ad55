"""Tokenization, vocabulary, fixed-length encoding, masks, word vectors.

Word-level tokenization for Bengali (and anything else UTF-8): NFC
normalize, split on whitespace, peel leading/trailing punctuation into
separate tokens so "?" and the danda are generatable tokens of their own.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ParseError, ShapeError

PAD, START, END, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

# Fixed sequence lengths used across the system.
QUESTION_LEN = 20
ANSWER_LEN = 5
CATEGORY_LEN = 1
ANSWER_CATEGORY_LEN = ANSWER_LEN + CATEGORY_LEN


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    """Split into word tokens; punctuation at word edges becomes its own token."""
    text = unicodedata.normalize("NFC", text)
    out: list[str] = []
    for chunk in text.split():
        start = 0
        end = len(chunk)
        while start < end and _is_punct(chunk[start]):
            start += 1
        while end > start and _is_punct(chunk[end - 1]):
            end -= 1
        out.extend(chunk[:start])
        if end > start:
            out.append(chunk[start:end])
        out.extend(chunk[end:])
    return out


def detokenize(tokens: Sequence[str]) -> str:
    """Inverse-ish of tokenize: space-join, but glue punctuation to the left."""
    parts: list[str] = []
    for tok in tokens:
        if parts and len(tok) == 1 and _is_punct(tok):
            parts[-1] += tok
        else:
            parts.append(tok)
    return " ".join(parts)


class Vocabulary:
    """Frozen token <-> id bijection with the 4 reserved specials up front."""

    def __init__(self, tokens: Sequence[str]):
        """tokens: the non-special tokens in id order (id = position + 4)."""
        self._id_to_token: list[str] = list(SPECIAL_TOKENS) + list(tokens)
        self._token_to_id: dict[str, int] = {}
        for i, tok in enumerate(self._id_to_token):
            if tok in self._token_to_id:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            self._token_to_id[tok] = i

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_for(self, token: str) -> int:
        """Id of token, or the unk id when absent."""
        return self._token_to_id.get(token, UNK)

    def token_for(self, idx: int) -> str:
        if not (0 <= idx < len(self._id_to_token)):
            raise DataError(f"token id {idx} out of range [0, {len(self._id_to_token)})")
        return self._id_to_token[idx]

    def non_special_tokens(self) -> list[str]:
        return self._id_to_token[len(SPECIAL_TOKENS) :]

    def save(self, path: str | Path) -> None:
        """One non-special token per line; line number + 4 = id."""
        Path(path).write_text(
            "".join(t + "\n" for t in self.non_special_tokens()), encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        raw = Path(path).read_text(encoding="utf-8")
        lines = raw.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(documents: Iterable[str], atomic_tokens: Iterable[str] = ()) -> Vocabulary:
    """Vocabulary over tokenized documents plus atomic control tokens.

    Ids follow first occurrence: every document in order, then the atomic
    tokens (category names, kept whole rather than word-split).
    """
    seen: dict[str, None] = {}
    count = 0
    for doc in documents:
        count += 1
        for tok in tokenize(doc):
            seen.setdefault(tok, None)
    for tok in atomic_tokens:
        count += 1
        if tok:
            seen.setdefault(tok, None)
    if count == 0:
        raise DataError("build_vocab needs at least one document")
    for special in SPECIAL_TOKENS:
        seen.pop(special, None)  # corpus text cannot claim a reserved token
    return Vocabulary(list(seen.keys()))


@dataclass(frozen=True)
class TokenSeq:
    """Fixed-length id sequence; positions at true_len and beyond are pad."""

    ids: np.ndarray  # (fixed_len,) int64
    true_len: int

    def __post_init__(self):
        if self.ids.ndim != 1:
            raise ShapeError(f"TokenSeq ids must be 1D, got {self.ids.shape}")
        if not 0 <= self.true_len <= self.ids.shape[0]:
            raise ShapeError(f"true_len {self.true_len} out of range for {self.ids.shape[0]}")


def encode(
    tokens: Sequence[str], vocab: Vocabulary, fixed_len: int, append_end: bool = False
) -> TokenSeq:
    """Map tokens to ids at a fixed length.

    Unknown tokens become unk. With append_end (questions), the end id is
    appended after the tokens. Longer sequences are truncated from the
    right, shorter ones padded; truncation can therefore drop the end id.
    """
    if fixed_len < 1:
        raise DataError(f"fixed_len must be >= 1, got {fixed_len}")
    ids = [vocab.id_for(t) for t in tokens]
    if append_end:
        ids.append(END)
    ids = ids[:fixed_len]
    true_len = len(ids)
    ids = ids + [PAD] * (fixed_len - true_len)
    return TokenSeq(np.asarray(ids, dtype=np.int64), true_len)


def decode(ids: Sequence[int], vocab: Vocabulary, strip_specials: bool = True) -> list[str]:
    """Ids back to tokens; specials dropped by default."""
    out = []
    for idx in ids:
        idx = int(idx)
        if strip_specials and idx < len(SPECIAL_TOKENS):
            continue
        out.append(vocab.token_for(idx))
    return out


def stack_ids(seqs: Sequence[TokenSeq]) -> np.ndarray:
    """Stack TokenSeqs into a (B, T) id matrix; lengths must agree."""
    if not seqs:
        raise DataError("stack_ids of an empty batch")
    t = seqs[0].ids.shape[0]
    for s in seqs:
        if s.ids.shape[0] != t:
            raise ShapeError(f"ragged batch: lengths {t} and {s.ids.shape[0]}")
    return np.stack([s.ids for s in seqs])


def make_pad_mask(ids: np.ndarray) -> np.ndarray:
    """(B, T) ids -> (B, 1, T) boolean mask, True where a real token sits."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"make_pad_mask expects (B, T) ids, got {ids.shape}")
    return (ids != PAD)[:, None, :]


@dataclass(frozen=True)
class VectorLoad:
    """Pretrained-vector load result."""

    matrix: np.ndarray  # (V, width) float64
    matched: int
    coverage: float  # matched / non-special vocab size


def load_pretrained_vectors(
    path: str | Path,
    vocab: Vocabulary,
    width: int = 300,
    gen: np.random.Generator | None = None,
) -> VectorLoad:
    """Read whitespace-delimited "token v1 ... v_width" lines into a table.

    Vocab tokens found in the file get the file vector; everything else,
    specials included, gets an N(0, 0.02) draw. Malformed lines raise
    ParseError naming the 1-based line number.
    """
    if gen is None:
        gen = np.random.default_rng(0)
    matrix = gen.normal(0.0, 0.02, size=(len(vocab), width))
    matched = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != width + 1:
                raise ParseError(
                    f"{path}: line {lineno}: expected token + {width} floats, got {len(parts)} fields"
                )
            token = parts[0]
            try:
                values = np.asarray([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: non-numeric vector entry") from exc
            if token in vocab:
                matrix[vocab.id_for(token)] = values
                matched += 1
    real = max(len(vocab) - len(SPECIAL_TOKENS), 1)
    return VectorLoad(matrix=matrix, matched=matched, coverage=matched / real)
