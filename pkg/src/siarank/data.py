"""Relevance dataset records: TSV loading, text preprocessing, synthetic generation.

The on-disk format is UTF-8 TSV with LF line endings, a literal-tab
separated header ``id query url doc title label`` and no quoting; tabs and
newlines are forbidden inside fields.  The ``doc`` column holds the raw
body text extract (BTE); the assembled document representation
``title: <title> url: <url> bte: <bte>`` is rebuilt on load.
"""

from __future__ import annotations

import math
import re
import urllib.parse
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError

TSV_HEADER = ("id", "query", "url", "doc", "title", "label")
LABEL_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)

DOC_PARTS = ("title", "url", "bte")

# Scheme prefixes are deleted outright; '-', '_' and tab become single spaces
# so the words they separated stay separated.
_URL_STRIP_RE = re.compile(r"https?://(www\.)?|[-_\t]", re.IGNORECASE)


class SplitKind(Enum):
    TRAIN_BIG = "train-big"
    TRAIN_SMALL = "train-small"
    DEV = "dev"
    TEST = "test"

    @property
    def is_training(self) -> bool:
        return self in (SplitKind.TRAIN_BIG, SplitKind.TRAIN_SMALL)


class Annotation(Enum):
    USEFUL = "useful"
    LITTLE_USEFUL = "little-useful"
    ALMOST_NOT_USEFUL = "almost-not-useful"
    NOT_USEFUL = "not-useful"


@dataclass
class RelevanceRecord:
    """One annotated (query, document, label) row."""

    query_id: str
    query: str
    url_raw: str
    title: str
    bte: str
    doc_repr: str
    label: float
    split: SplitKind


@dataclass
class DatasetSplit:
    """An immutable-after-construction split with per-query grouping."""

    kind: SplitKind
    records: list[RelevanceRecord]
    grouping: dict[str, list[int]] = field(default_factory=dict)
    dropped_empty: int = 0

    def __post_init__(self) -> None:
        if not self.grouping:
            self.grouping = _group_by_query(self.records)
        seen: set[tuple[str, str]] = set()
        for rec in self.records:
            pair = (rec.query, rec.url_raw)
            if pair in seen:
                raise DataError(
                    f"duplicate (query, url) pair in {self.kind.value} split: {pair!r}"
                )
            seen.add(pair)

    def __len__(self) -> int:
        return len(self.records)

    def query_records(self, query_id: str) -> list[RelevanceRecord]:
        return [self.records[i] for i in self.grouping[query_id]]


def _group_by_query(records: list[RelevanceRecord]) -> dict[str, list[int]]:
    grouping: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        grouping.setdefault(rec.query_id, []).append(i)
    return grouping


def map_label(annotation: Annotation, split: SplitKind) -> float:
    """Map a four-level annotation to its numeric label for the given split."""
    if annotation is Annotation.USEFUL:
        return 1.0
    if annotation is Annotation.LITTLE_USEFUL:
        return 0.75 if split is SplitKind.TEST else 0.5
    if annotation is Annotation.ALMOST_NOT_USEFUL:
        return 0.25 if split in (SplitKind.TEST, SplitKind.TRAIN_BIG) else 0.5
    if annotation is Annotation.NOT_USEFUL:
        return 0.0
    raise DataError(f"unknown annotation {annotation!r}")


def preprocess_url(url_raw: str) -> str:
    """Normalize a raw URL into space-separated lowercase text.

    Percent escapes are decoded (invalid ones pass through verbatim), plus
    signs become spaces, scheme prefixes are removed and '-', '_', tab each
    become a single space.  Separator stripping runs to a fixed point so
    the function is idempotent on its own output (percent decoding is
    applied once).  Total over arbitrary text.
    """
    text = urllib.parse.unquote(url_raw)
    text = text.replace("+", " ")
    while True:
        stripped = _URL_STRIP_RE.sub(
            lambda m: "" if m.group(0)[0] in "hH" else " ", text
        )
        if stripped == text:
            break
        text = stripped
    return text.lower()


def assemble_doc_repr(
    title: str, url_processed: str, bte: str, parts: tuple[str, ...] = DOC_PARTS
) -> str:
    """Concatenate prefixed document parts; ``parts`` masks segments entirely."""
    unknown = set(parts) - set(DOC_PARTS)
    if unknown:
        raise DataError(f"unknown doc parts {sorted(unknown)!r}")
    values = {"title": title, "url": url_processed, "bte": bte}
    segments = [f"{name}: {values[name]}" for name in DOC_PARTS if name in parts]
    return " ".join(segments)


def _validate_field(value: str, column: str, line_no: int) -> str:
    if "\t" in value or "\n" in value or "\r" in value:
        raise DataError(f"line {line_no}: column '{column}' contains tab/newline")
    return value


def load_tsv(path: str | Path, kind: SplitKind) -> DatasetSplit:
    """Load and validate one split; training splits drop fully-empty documents."""
    path = Path(path)
    records: list[RelevanceRecord] = []
    dropped = 0
    with path.open("r", encoding="utf-8", newline="") as handle:
        header = handle.readline().rstrip("\n").split("\t")
        if tuple(header) != TSV_HEADER:
            raise DataError(
                f"{path}: bad header {header!r}, expected {list(TSV_HEADER)!r}"
            )
        for line_no, line in enumerate(handle, start=2):
            row = line.rstrip("\n").split("\t")
            if len(row) != len(TSV_HEADER):
                raise DataError(
                    f"{path} line {line_no}: expected {len(TSV_HEADER)} columns, got {len(row)}"
                )
            query_id, query, url, bte, title, label_text = row
            try:
                label = float(label_text)
            except ValueError as exc:
                raise DataError(f"{path} line {line_no}: bad label {label_text!r}") from exc
            if not 0.0 <= label <= 1.0:
                raise DataError(f"{path} line {line_no}: label {label} outside [0, 1]")
            if not query.strip():
                raise DataError(f"{path} line {line_no}: empty query")
            if kind.is_training and not bte and not title:
                dropped += 1
                continue
            records.append(
                RelevanceRecord(
                    query_id=query_id,
                    query=query,
                    url_raw=url,
                    title=title,
                    bte=bte,
                    doc_repr=assemble_doc_repr(title, preprocess_url(url), bte),
                    label=label,
                    split=kind,
                )
            )
    return DatasetSplit(kind=kind, records=records, dropped_empty=dropped)


def save_tsv(split: DatasetSplit, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("\t".join(TSV_HEADER) + "\n")
        for i, rec in enumerate(split.records, start=2):
            fields = (rec.query_id, rec.query, rec.url_raw, rec.bte, rec.title)
            for column, value in zip(TSV_HEADER, fields):
                _validate_field(value, column, i)
            handle.write(
                "\t".join((*fields, repr(rec.label))) + "\n"
            )


def masked_doc_repr(record: RelevanceRecord, parts: tuple[str, ...]) -> str:
    """Re-assemble a record's document representation from a subset of parts."""
    return assemble_doc_repr(
        record.title, preprocess_url(record.url_raw), record.bte, parts
    )


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the planted-signal synthetic dataset generator."""

    vocab_size: int = 300
    n_queries: int = 100
    docs_per_query: int = 24
    relevant_fraction: float = 0.35
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 20 or self.vocab_size > 8000:
            raise DataError(f"vocab_size {self.vocab_size} outside [20, 8000]")
        if self.n_queries < 1:
            raise DataError("n_queries must be positive")
        if self.docs_per_query < 10:
            raise DataError("docs_per_query must be >= 10 so P@10 is well defined")
        if not 0.0 < self.relevant_fraction < 1.0:
            raise DataError("relevant_fraction must lie in (0, 1)")
        if not 0.0 <= self.noise <= 1.0:
            raise DataError("noise must lie in [0, 1]")


_SYLLABLES = (
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne",
    "pa", "re", "si", "to", "vu", "za", "be", "co", "du", "fi",
)


def synth_term(index: int) -> str:
    """Deterministic pronounceable term for a vocabulary index (< 8000)."""
    n = len(_SYLLABLES)
    word = _SYLLABLES[index % n] + _SYLLABLES[(index // n) % n]
    if index >= n * n:
        word += _SYLLABLES[index // (n * n)]
    return word


def label_from_overlap(combined_overlap: float) -> float:
    """Grade a combined title/body query-term overlap into a label level.

    Monotone step function: full overlap maps to 1.0 and zero overlap to
    0.0, with the intermediate levels at the annotation grid.
    """
    c = combined_overlap
    if c >= 1.0:
        return 1.0
    if c >= 0.75:
        return 0.75
    if c >= 0.5:
        return 0.5
    if c > 0.0:
        return 0.25
    return 0.0


def _doc_tiers(docs_per_query: int, relevant_fraction: float) -> list[float]:
    """Target combined-overlap tiers for one query's candidate documents."""
    n_rel = int(round(relevant_fraction * docs_per_query))
    n_rel = min(max(n_rel, 1), docs_per_query - 1)
    n_full = max(1, int(math.ceil(n_rel * 0.6)))
    n_high = n_rel - n_full
    n_irr = docs_per_query - n_rel
    n_mid = int(math.ceil(n_irr / 3))
    n_low = int(math.ceil(n_irr / 3))
    n_zero = n_irr - n_mid - n_low
    return (
        [1.0] * n_full + [0.75] * n_high + [0.5] * n_mid + [0.25] * n_low + [0.0] * n_zero
    )


def _make_doc(
    rng: np.random.Generator,
    query_terms: list[str],
    tier: float,
    vocab: list[str],
    site: str,
    serial: int,
    split: SplitKind,
    query_id: str,
    query_text: str,
    noise: float,
) -> RelevanceRecord:
    k = len(query_terms)
    # Realize the tier as per-field inclusion counts: the combined overlap is
    # the mean of the title and body overlaps, so relevance requires query
    # terms in *both* fields while body-only matches stay retrievable.
    if tier >= 1.0:
        n_title, n_bte = k, k
    elif tier >= 0.75 and k >= 2:
        n_title, n_bte = max(1, int(math.ceil(k / 2))), k
    elif tier >= 0.75:
        n_title, n_bte = k, k
    elif tier >= 0.5:
        n_title, n_bte = 0, k
    elif tier > 0.0 and k >= 2:
        n_title, n_bte = 0, min(max(1, round(k / 2)), k - 1)
    elif tier > 0.0:
        n_title, n_bte = 0, k
    else:
        n_title, n_bte = 0, 0

    order = rng.permutation(k)
    title_terms = [query_terms[i] for i in order[:n_title]]
    bte_terms = [query_terms[i] for i in order[:n_bte]]
    overlap = (n_title / k + n_bte / k) / 2.0
    label = label_from_overlap(overlap)
    if noise > 0.0 and rng.random() < noise:
        others = [lv for lv in LABEL_LEVELS if lv != label]
        label = float(others[rng.integers(len(others))])

    fillers = [t for t in vocab if t not in query_terms]
    title_fill = [fillers[i] for i in rng.choice(len(fillers), size=2, replace=False)]
    body_len = int(rng.integers(10, 22))
    n_body_fill = max(2, body_len - 2 * len(bte_terms))
    body_fill = [fillers[i] for i in rng.choice(len(fillers), size=n_body_fill, replace=True)]

    title_words = title_terms + title_fill
    rng.shuffle(title_words)
    # Duplicate matched terms in the body so term frequency tracks relevance.
    body_words = bte_terms + bte_terms + body_fill
    rng.shuffle(body_words)

    title = " ".join(title_words)
    bte = " ".join(body_words)
    url_raw = f"https://www.{site}.cz/{'-'.join(title_words)}-{serial}"
    return RelevanceRecord(
        query_id=query_id,
        query=query_text,
        url_raw=url_raw,
        title=title,
        bte=bte,
        doc_repr=assemble_doc_repr(title, preprocess_url(url_raw), bte),
        label=label,
        split=split,
    )


def _make_split(
    rng: np.random.Generator,
    cfg: SynthConfig,
    kind: SplitKind,
    tag: str,
    n_queries: int,
    vocab: list[str],
    query_pool: list[str],
) -> DatasetSplit:
    records: list[RelevanceRecord] = []
    serial = 0
    for qi in range(n_queries):
        k = int(rng.integers(1, 6))
        terms = [query_pool[i] for i in rng.choice(len(query_pool), size=k, replace=False)]
        query_id = f"q-{tag}-{qi:05d}"
        query_text = " ".join(terms)
        site = f"web{int(rng.integers(100, 1000))}"
        tiers = _doc_tiers(cfg.docs_per_query, cfg.relevant_fraction)
        for tier in tiers:
            records.append(
                _make_doc(
                    rng, terms, tier, vocab, site, serial, kind, query_id,
                    query_text, cfg.noise,
                )
            )
            serial += 1
    return DatasetSplit(kind=kind, records=records)


def generate_synthetic(cfg: SynthConfig) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Generate deterministic train/dev/test splits with a planted relevance signal.

    Dev and test each hold ``max(4, n_queries // 4)`` fresh queries.  Labels
    are a graded monotone function of query-term overlap across the title
    and body fields, perturbed by ``noise``-rate flips.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    vocab = [synth_term(i) for i in range(cfg.vocab_size)]
    query_pool = vocab[: max(16, cfg.vocab_size // 3)]
    n_eval = max(4, cfg.n_queries // 4)
    train = _make_split(rng, cfg, SplitKind.TRAIN_BIG, "train", cfg.n_queries, vocab, query_pool)
    dev = _make_split(rng, cfg, SplitKind.DEV, "dev", n_eval, vocab, query_pool)
    test = _make_split(rng, cfg, SplitKind.TEST, "test", n_eval, vocab, query_pool)
    return train, dev, test
