"""Stage-2 ranking features plus least-squares gradient-boosted trees.

Features are a reduced desk-scale family: Okapi BM25 over the body and
title, query/title overlap, length counts, a synthetic static document
score standing in for link-graph signals, and optionally the neural
relevance score.  Trees use exact greedy split search over sorted unique
thresholds, so training is deterministic for fixed data.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetSplit, RelevanceRecord
from .errors import DataError

BASE_FEATURES = (
    "bm25_bte",
    "bm25_title",
    "query_title_overlap",
    "query_len",
    "doc_len",
    "static_doc_score",
)
NEURAL_FEATURE = "neural_score"


# ---------------------------------------------------------------------------
# BM25 and the feature family
# ---------------------------------------------------------------------------

@dataclass
class CorpusStats:
    n_docs: int
    avg_len: float
    df: dict[str, int]


def build_stats(docs_tokens: list[list[str]]) -> CorpusStats:
    if not docs_tokens:
        raise DataError("cannot build corpus statistics from an empty corpus")
    df: Counter[str] = Counter()
    total = 0
    for tokens in docs_tokens:
        total += len(tokens)
        df.update(set(tokens))
    return CorpusStats(n_docs=len(docs_tokens), avg_len=total / len(docs_tokens), df=dict(df))


def bm25(
    query_terms: list[str],
    doc_terms: list[str],
    stats: CorpusStats,
    k1: float = 1.2,
    b: float = 0.75,
) -> float:
    """Okapi BM25 with the IDF floored at zero."""
    if stats.n_docs == 0:
        raise DataError("corpus statistics cover zero documents")
    tf = Counter(doc_terms)
    dl = len(doc_terms)
    length_norm = k1 * (1.0 - b + b * dl / stats.avg_len) if stats.avg_len > 0 else k1
    score = 0.0
    for term in query_terms:
        f = tf.get(term, 0)
        if f == 0:
            continue
        n_t = stats.df.get(term, 0)
        idf = max(0.0, math.log((stats.n_docs - n_t + 0.5) / (n_t + 0.5)))
        score += idf * f * (k1 + 1.0) / (f + length_norm)
    return score


@dataclass
class FeatureStats:
    """Corpus statistics for the two BM25 features, built per candidate corpus."""

    bte: CorpusStats
    title: CorpusStats


def build_feature_stats(records: list[RelevanceRecord]) -> FeatureStats:
    seen: set[str] = set()
    bte_docs: list[list[str]] = []
    title_docs: list[list[str]] = []
    for rec in records:
        if rec.url_raw in seen:
            continue
        seen.add(rec.url_raw)
        bte_docs.append(rec.bte.split())
        title_docs.append(rec.title.split())
    return FeatureStats(bte=build_stats(bte_docs), title=build_stats(title_docs))


def static_doc_score(url: str) -> float:
    """Deterministic pseudo-score in [0, 1) standing in for PageRank-like signals."""
    digest = hashlib.sha1(url.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") / 2.0**32


def record_features(
    rec: RelevanceRecord, stats: FeatureStats, neural_score: float | None = None
) -> np.ndarray:
    q_terms = rec.query.split()
    title_terms = rec.title.split()
    bte_terms = rec.bte.split()
    overlap = (
        len(set(q_terms) & set(title_terms)) / len(set(q_terms)) if q_terms else 0.0
    )
    values = [
        bm25(q_terms, bte_terms, stats.bte),
        bm25(q_terms, title_terms, stats.title),
        overlap,
        float(len(q_terms)),
        float(len(bte_terms) + len(title_terms)),
        static_doc_score(rec.url_raw),
    ]
    if neural_score is not None:
        values.append(neural_score)
    return np.asarray(values, dtype=np.float64)


def split_features(
    split: DatasetSplit,
    stats: FeatureStats,
    neural: dict[tuple[str, str], float] | None = None,
) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Feature matrix, labels and schema for a split.

    ``neural`` maps (query_id, url) to the neural relevance feature; when
    present the schema gains ``neural_score`` as its last column.
    """
    schema = BASE_FEATURES + ((NEURAL_FEATURE,) if neural is not None else ())
    rows = []
    for rec in split.records:
        ns = neural[(rec.query_id, rec.url_raw)] if neural is not None else None
        rows.append(record_features(rec, stats, ns))
    X = np.vstack(rows) if rows else np.zeros((0, len(schema)))
    y = np.asarray([r.label for r in split.records], dtype=np.float64)
    return X, y, schema


# ---------------------------------------------------------------------------
# Regression trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GbrtConfig:
    n_trees: int = 200
    depth: int = 6
    shrinkage: float = 0.1
    early_stop_rounds: int = 100
    min_samples_leaf: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ValueError("shrinkage must lie in (0, 1]")
        if self.n_trees < 0 or self.early_stop_rounds < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, early_stop_rounds, min_samples_leaf must be sane")


class RegressionTree:
    """Depth-bounded binary tree stored as flat arrays; feature -1 marks leaves."""

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def add_leaf(self, value: float) -> int:
        return self._add(-1, math.nan, -1, -1, value)

    def add_split(self, feature: int, threshold: float) -> int:
        return self._add(feature, threshold, -1, -1, math.nan)

    def _add(self, feature: int, threshold: float, left: int, right: int, value: float) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(left)
        self.right.append(right)
        self.value.append(value)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        value = np.asarray(self.value)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = feature[node]
            internal = f >= 0
            if not internal.any():
                break
            rows = np.where(internal)[0]
            go_left = X[rows, f[rows]] <= threshold[node[rows]]
            node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])
        return value[node]

    def max_depth(self) -> int:
        def depth_of(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(depth_of(self.left[i]), depth_of(self.right[i]))

        return depth_of(0) if self.feature else 0


def _best_split(
    X: np.ndarray, residual: np.ndarray, idx: np.ndarray, min_leaf: int
) -> tuple[int, float, float] | None:
    """Exact greedy search; returns (feature, threshold, gain) or None.

    Gain is the SSE reduction; ties keep the lowest feature index and then
    the lowest threshold (scan order guarantees both).
    """
    r = residual[idx]
    n = len(idx)
    total = r.sum()
    base = total * total / n
    best: tuple[int, float, float] | None = None
    for f in range(X.shape[1]):
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        rs = r[order]
        prefix = np.cumsum(rs)
        n_left = np.arange(1, n)
        distinct = xs_sorted[:-1] < xs_sorted[1:]
        valid = distinct & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        sl = prefix[:-1]
        score = sl * sl / n_left + (total - sl) ** 2 / (n - n_left)
        score = np.where(valid, score, -np.inf)
        pos = int(np.argmax(score))
        gain = float(score[pos] - base)
        if gain > 1e-12 and (best is None or gain > best[2]):
            threshold = float((xs_sorted[pos] + xs_sorted[pos + 1]) / 2.0)
            best = (f, threshold, gain)
    return best


def _fit_tree(
    X: np.ndarray, residual: np.ndarray, cfg: GbrtConfig
) -> RegressionTree:
    tree = RegressionTree()

    def build(idx: np.ndarray, depth: int) -> int:
        if depth >= cfg.depth or len(idx) < 2 * cfg.min_samples_leaf:
            return tree.add_leaf(float(residual[idx].mean()))
        found = _best_split(X, residual, idx, cfg.min_samples_leaf)
        if found is None:
            return tree.add_leaf(float(residual[idx].mean()))
        feature, threshold, _ = found
        node = tree.add_split(feature, threshold)
        mask = X[idx, feature] <= threshold
        tree.left[node] = build(idx[mask], depth + 1)
        tree.right[node] = build(idx[~mask], depth + 1)
        return node

    build(np.arange(len(X)), 0)
    return tree


@dataclass
class BoostRound:
    round: int
    train_rmse: float
    dev_rmse: float


class GbrtModel:
    def __init__(self, schema: tuple[str, ...], base: float, shrinkage: float,
                 trees: list[RegressionTree]):
        self.schema = tuple(schema)
        self.base = base
        self.shrinkage = shrinkage
        self.trees = trees

    def predict(self, X: np.ndarray, schema: tuple[str, ...] | None = None) -> np.ndarray:
        if schema is not None and tuple(schema) != self.schema:
            raise DataError(
                f"feature schema mismatch: model expects {self.schema}, got {tuple(schema)}"
            )
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.schema):
            raise DataError(
                f"feature matrix with {X.shape} columns does not match schema "
                f"of {len(self.schema)} features"
            )
        out = np.full(len(X), self.base, dtype=np.float64)
        for tree in self.trees:
            out += self.shrinkage * tree.predict(X)
        return out

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
            handle.write("gbrt-model\tv1\n")
            handle.write("schema\t" + ",".join(self.schema) + "\n")
            handle.write(f"base\t{self.base!r}\n")
            handle.write(f"shrinkage\t{self.shrinkage!r}\n")
            handle.write("tree\tnode\tfeature\tthreshold\tleft\tright\tvalue\n")
            for t, tree in enumerate(self.trees):
                for i in range(len(tree.feature)):
                    handle.write(
                        f"{t}\t{i}\t{tree.feature[i]}\t{tree.threshold[i]!r}\t"
                        f"{tree.left[i]}\t{tree.right[i]}\t{tree.value[i]!r}\n"
                    )

    @classmethod
    def load(cls, path: str | Path) -> "GbrtModel":
        path = Path(path)
        with path.open("r", encoding="utf-8") as handle:
            lines = [line.rstrip("\n") for line in handle]
        if not lines or lines[0] != "gbrt-model\tv1":
            raise DataError(f"{path}: not a GBRT model file")
        schema = tuple(lines[1].split("\t")[1].split(","))
        base = float(lines[2].split("\t")[1])
        shrinkage = float(lines[3].split("\t")[1])
        trees: list[RegressionTree] = []
        for line in lines[5:]:
            t, i, feature, threshold, left, right, value = line.split("\t")
            t = int(t)
            while len(trees) <= t:
                trees.append(RegressionTree())
            tree = trees[t]
            assert int(i) == len(tree.feature)
            tree._add(int(feature), float(threshold), int(left), int(right), float(value))
        return cls(schema, base, shrinkage, trees)


def _rmse(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def train_gbrt(
    X: np.ndarray,
    y: np.ndarray,
    X_dev: np.ndarray,
    y_dev: np.ndarray,
    cfg: GbrtConfig,
    schema: tuple[str, ...] = BASE_FEATURES,
) -> tuple[GbrtModel, list[BoostRound]]:
    """Least-squares boosting on residuals with dev-RMSE early stopping.

    Returns the model truncated to the best dev round.  Constant labels
    yield the zero-tree constant predictor.
    """
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X_dev = np.asarray(X_dev, dtype=np.float64)
    y_dev = np.asarray(y_dev, dtype=np.float64)
    if len(X) == 0:
        raise DataError("empty training set")
    base = float(y.mean())
    model = GbrtModel(schema, base, cfg.shrinkage, [])
    if np.all(y == y[0]):
        return model, []

    pred = np.full(len(y), base)
    pred_dev = np.full(len(y_dev), base)
    history: list[BoostRound] = []
    best_dev = _rmse(pred_dev, y_dev)
    best_round = 0
    for rnd in range(1, cfg.n_trees + 1):
        tree = _fit_tree(X, y - pred, cfg)
        model.trees.append(tree)
        pred += cfg.shrinkage * tree.predict(X)
        pred_dev += cfg.shrinkage * tree.predict(X_dev)
        dev_rmse = _rmse(pred_dev, y_dev)
        history.append(BoostRound(rnd, _rmse(pred, y), dev_rmse))
        if dev_rmse < best_dev:
            best_dev = dev_rmse
            best_round = rnd
        elif rnd - best_round >= cfg.early_stop_rounds:
            break
    model.trees = model.trees[:best_round]
    return model, history
