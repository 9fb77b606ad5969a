"""WordPiece-style subword tokenizer: greedy frequency trainer and encoder.

Training induces the vocabulary by iterative best-pair merging over a
pre-split corpus (whitespace plus punctuation), ties broken
lexicographically so two runs over the same corpus are identical.
Encoding is greedy longest-match-first with ``##`` continuation pieces.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def pre_split(text: str) -> list[str]:
    """Split lowercased text into words and single punctuation marks."""
    return _WORD_RE.findall(text)


@dataclass
class Vocab:
    tokens: list[str]
    ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.ids:
            self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise DataError("vocab contains duplicate tokens")
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise DataError(f"vocab must start with specials {SPECIAL_TOKENS}")

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
            for token in self.tokens:
                handle.write(token + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with Path(path).open("r", encoding="utf-8") as handle:
            tokens = [line.rstrip("\n") for line in handle]
        return cls(tokens=tokens)


@dataclass
class TokenSequence:
    """Subword ids with [CLS]/[SEP] framing; optional trailing padding."""

    ids: list[int]

    def __post_init__(self) -> None:
        if not self.ids or self.ids[0] != CLS:
            raise DataError("token sequence must start with [CLS]")
        content = [i for i in self.ids if i != PAD]
        if content[-1] != SEP:
            raise DataError("last content token must be [SEP]")
        if self.ids[len(content):] != [PAD] * (len(self.ids) - len(content)):
            raise DataError("padding must only follow the final [SEP]")

    def __len__(self) -> int:
        return len(self.ids)

    def padded(self, length: int) -> "TokenSequence":
        if length < len(self.ids):
            raise DataError(f"cannot pad length {len(self.ids)} down to {length}")
        return TokenSequence(ids=self.ids + [PAD] * (length - len(self.ids)))


def _word_pieces(word: str) -> tuple[str, ...]:
    return (word[0], *("##" + ch for ch in word[1:]))


def _merge_piece(left: str, right: str) -> str:
    return left + (right[2:] if right.startswith("##") else right)


def train_vocab(corpus: list[str] | tuple[str, ...], max_size: int = 2000, min_freq: int = 2) -> Vocab:
    """Induce a WordPiece vocabulary by greedy frequency-based pair merging.

    Starts from single characters (continuations prefixed ``##``) and
    repeatedly merges the most frequent adjacent pair until ``max_size``
    tokens exist or no pair reaches ``min_freq``.  Ties break on the
    lexicographically smallest pair.
    """
    word_freq: Counter[str] = Counter()
    for text in corpus:
        word_freq.update(pre_split(text))
    if not word_freq:
        raise DataError("empty corpus: nothing to train a vocabulary on")

    segmentations: dict[str, tuple[str, ...]] = {
        word: _word_pieces(word) for word in word_freq
    }
    alphabet = sorted({piece for pieces in segmentations.values() for piece in pieces})
    tokens: list[str] = [*SPECIAL_TOKENS, *alphabet][:max_size]
    seen: set[str] = set(tokens)

    while len(tokens) < max_size:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for word, pieces in segmentations.items():
            freq = word_freq[word]
            for a, b in zip(pieces, pieces[1:]):
                pair_freq[(a, b)] += freq
        if not pair_freq:
            break
        best_freq = max(pair_freq.values())
        if best_freq < min_freq:
            break
        best = min(pair for pair, f in pair_freq.items() if f == best_freq)
        merged = _merge_piece(*best)
        for word, pieces in segmentations.items():
            if best[0] not in pieces:
                continue
            out: list[str] = []
            i = 0
            while i < len(pieces):
                if i + 1 < len(pieces) and (pieces[i], pieces[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(pieces[i])
                    i += 1
            segmentations[word] = tuple(out)
        if merged not in seen:
            seen.add(merged)
            tokens.append(merged)

    return Vocab(tokens=tokens)


def _segment_word(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match-first segmentation; unknown remainder -> [UNK]."""
    if len(word) > 100:
        return [UNK]
    ids: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        piece_id = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            piece_id = vocab.ids.get(piece)
            if piece_id is not None:
                break
            end -= 1
        if piece_id is None:
            return [UNK]
        ids.append(piece_id)
        start = end
    return ids


def tokenize(text: str, vocab: Vocab) -> list[int]:
    ids: list[int] = []
    for word in pre_split(text):
        ids.extend(_segment_word(word, vocab))
    return ids


def encode(text: str, vocab: Vocab, max_len: int = 128) -> TokenSequence:
    """Encode one text as [CLS] pieces [SEP], truncated to ``max_len`` ids."""
    if max_len < 2:
        raise DataError(f"max_len {max_len} leaves no room for [CLS]/[SEP]")
    content = tokenize(text, vocab)[: max_len - 2]
    return TokenSequence(ids=[CLS, *content, SEP])


def encode_pair(query: str, doc_repr: str, vocab: Vocab, max_len: int = 128) -> TokenSequence:
    """Encode [CLS] query [SEP] doc [SEP], truncating the document side only."""
    query_ids = tokenize(query, vocab)
    if len(query_ids) > max_len - 3:
        raise DataError(
            f"query occupies {len(query_ids)} tokens, over the {max_len - 3} budget"
        )
    doc_ids = tokenize(doc_repr, vocab)[: max_len - 3 - len(query_ids)]
    return TokenSequence(ids=[CLS, *query_ids, SEP, *doc_ids, SEP])


def decode(ids: list[int], vocab: Vocab) -> str:
    """Inverse of encode on covered text: drops specials, joins ## pieces."""
    words: list[str] = []
    for i in ids:
        token = vocab.tokens[i]
        if token in SPECIAL_TOKENS:
            continue
        if token.startswith("##") and words:
            words[-1] += token[2:]
        else:
            words.append(token)
    return " ".join(words)
