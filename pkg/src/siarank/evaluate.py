"""Ranking metrics, baselines, the staged pipeline, and latency benchmarks.

P@10 is the fraction of the top ten ranked documents whose gold label
strictly exceeds 0.5; DCG uses linear gains label / log2(rank + 1) by
default with an exponential-gain switch.  The pipeline simulator retrieves
candidates containing every query word, keeps the top ``stage1_k`` by a
fast-feature ranker, and reranks with the full feature set (including the
neural score from a precomputed embedding store) down to ten.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import interaction as inter
from .encoder import EncoderConfig, encode_sequence, init_weights
from .errors import DataError
from .gbrt import FeatureStats, GbrtModel, NEURAL_FEATURE, record_features
from .quant import QuantizedFinal
from .store import EmbeddingStore, quantize_vector
from .tokenizer import CLS, SEP


@dataclass(frozen=True)
class RankedItem:
    key: str
    score: float
    label: float


@dataclass
class RankedList:
    """Non-increasing scores; ties broken by ascending document key."""

    query_id: str
    items: list[RankedItem]

    def __post_init__(self) -> None:
        for a, b in zip(self.items, self.items[1:]):
            if b.score > a.score:
                raise DataError(f"ranked list for {self.query_id} has increasing scores")

    def labels(self) -> list[float]:
        return [item.label for item in self.items]


def rank_candidates(query_id: str, scored: list[tuple[str, float, float]]) -> RankedList:
    """Order (key, score, label) triples by descending score, key on ties."""
    ordered = sorted(scored, key=lambda row: (-row[1], row[0]))
    return RankedList(query_id, [RankedItem(*row) for row in ordered])


def ranked_from_order(query_id: str, ordered: list[tuple[str, float]]) -> RankedList:
    """Wrap an explicit ordering; positions become descending scores."""
    items = [RankedItem(key, float(len(ordered) - i), label)
             for i, (key, label) in enumerate(ordered)]
    return RankedList(query_id, items)


def p_at_10(ranked: RankedList) -> float:
    """Fraction of relevant (label > 0.5) documents among the top ten."""
    if not ranked.items:
        raise DataError(f"empty ranked list for query {ranked.query_id}")
    top = ranked.items[:10]
    return sum(1 for item in top if item.label > 0.5) / 10.0


def dcg(ranked: RankedList, cutoff: int = 10, exponential: bool = False) -> float:
    if not ranked.items:
        raise DataError(f"empty ranked list for query {ranked.query_id}")
    total = 0.0
    for i, item in enumerate(ranked.items[:cutoff], start=1):
        gain = (2.0 ** item.label - 1.0) if exponential else item.label
        total += gain / math.log2(i + 1)
    return total


def oracle_rank(query_id: str, candidates: list[tuple[str, float]]) -> RankedList:
    """Best achievable ordering: stable sort by label descending."""
    ordered = sorted(candidates, key=lambda row: -row[1])
    return RankedList(query_id, [RankedItem(key, label, label) for key, label in ordered])


def mean_p10_of_groups(scored: dict[str, list[tuple[str, float, float]]]) -> float:
    """Mean P@10 over queries, in percent; used for dev-set early stopping."""
    if not scored:
        raise DataError("no queries to evaluate")
    values = [p_at_10(rank_candidates(qid, rows)) for qid, rows in scored.items()]
    return 100.0 * float(np.mean(values))


@dataclass
class EvalReport:
    p_at_10: float  # percent
    dcg: float
    per_query: list[tuple[str, float, float]] = field(default_factory=list)
    n_queries: int = 0
    n_skipped: int = 0


def evaluate_lists(lists: list[RankedList], n_skipped: int = 0,
                   dcg_exponential: bool = False) -> EvalReport:
    if not lists:
        raise DataError("no ranked lists to evaluate")
    per_query = [
        (rl.query_id, 100.0 * p_at_10(rl), dcg(rl, exponential=dcg_exponential))
        for rl in lists
    ]
    return EvalReport(
        p_at_10=float(np.mean([row[1] for row in per_query])),
        dcg=float(np.mean([row[2] for row in per_query])),
        per_query=per_query,
        n_queries=len(lists),
        n_skipped=n_skipped,
    )


def write_report_tsv(report: EvalReport, path: str | Path,
                     per_query_path: str | Path | None = None) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("metric\tvalue\n")
        handle.write(f"p_at_10\t{report.p_at_10:.4f}\n")
        handle.write(f"dcg\t{report.dcg:.6f}\n")
        handle.write(f"n_queries\t{report.n_queries}\n")
        handle.write(f"n_skipped\t{report.n_skipped}\n")
    if per_query_path is not None:
        with Path(per_query_path).open("w", encoding="utf-8", newline="\n") as handle:
            handle.write("query_id\tp_at_10\tdcg\n")
            for qid, p10, d in report.per_query:
                handle.write(f"{qid}\t{p10:.4f}\t{d:.6f}\n")


def random_baseline(
    groups: dict[str, list[tuple[str, float]]], runs: int = 100, seed: int = 0
) -> EvalReport:
    """Mean metrics over uniformly shuffled rankings, deterministic per seed."""
    if runs < 1:
        raise DataError("runs must be >= 1")
    if not groups:
        raise DataError("no queries to shuffle")
    rng = np.random.default_rng(seed)
    p10_sums = {qid: 0.0 for qid in groups}
    dcg_sums = {qid: 0.0 for qid in groups}
    for _ in range(runs):
        for qid, candidates in groups.items():
            order = rng.permutation(len(candidates))
            rl = ranked_from_order(qid, [candidates[i] for i in order])
            p10_sums[qid] += p_at_10(rl)
            dcg_sums[qid] += dcg(rl)
    per_query = [
        (qid, 100.0 * p10_sums[qid] / runs, dcg_sums[qid] / runs) for qid in groups
    ]
    return EvalReport(
        p_at_10=float(np.mean([row[1] for row in per_query])),
        dcg=float(np.mean([row[2] for row in per_query])),
        per_query=per_query,
        n_queries=len(groups),
    )


# ---------------------------------------------------------------------------
# Store-backed scoring and the staged pipeline
# ---------------------------------------------------------------------------

def score_against_store(model, query: str, store: EmbeddingStore,
                        keys: list[str]) -> dict[str, float]:
    """Score one query against stored documents: one tower forward for the
    query, then one interaction evaluation per document."""
    e_q = model.embed(query)
    return {key: model.score_embeddings(e_q, store.lookup(key)) for key in keys}


def score_against_store_quantized(model, scorer: QuantizedFinal, query: str,
                                  store: EmbeddingStore, keys: list[str]) -> dict[str, float]:
    if not store.quantized:
        raise DataError("quantized scoring needs a quantized store")
    e_q = model.embed(query)
    out: dict[str, float] = {}
    for key in keys:
        codes, params = store.raw(key)
        out[key] = scorer.score(e_q, codes, params)
    return out


@dataclass(frozen=True)
class PipelineConfig:
    stage1_k: int = 200
    stage2_k: int = 10

    def validate(self) -> None:
        if self.stage2_k > self.stage1_k:
            raise DataError("stage2_k must not exceed stage1_k")
        if self.stage2_k < 1:
            raise DataError("stage2_k must be >= 1")


def run_pipeline(
    query_id: str,
    query: str,
    candidates,
    cfg: PipelineConfig,
    stage1: GbrtModel,
    stage2: GbrtModel,
    stats: FeatureStats,
    neural_scores: dict[str, float] | None = None,
) -> RankedList | None:
    """Retrieval -> stage-1 fast ranking -> stage-2 full reranking to top ten.

    Retrieval keeps documents whose representation contains every query
    word.  Returns None when nothing is retrievable (reported, not scored).
    """
    cfg.validate()
    if NEURAL_FEATURE in stage1.schema:
        raise DataError("stage-1 ranker must use fast features only")
    q_words = set(query.split())
    retrieved = [rec for rec in candidates if q_words <= set(rec.doc_repr.split())]
    if not retrieved:
        return None

    fast = np.vstack([record_features(rec, stats) for rec in retrieved])
    s1_scores = stage1.predict(fast)
    order = sorted(range(len(retrieved)), key=lambda i: (-s1_scores[i], retrieved[i].url_raw))
    shortlist = [retrieved[i] for i in order[: cfg.stage1_k]]

    with_neural = NEURAL_FEATURE in stage2.schema
    if with_neural and neural_scores is None:
        raise DataError("stage-2 ranker expects neural scores; none provided")
    rows = []
    for rec in shortlist:
        ns = neural_scores[rec.url_raw] if with_neural else None
        rows.append(record_features(rec, stats, ns))
    s2_scores = stage2.predict(np.vstack(rows))
    scored = [(rec.url_raw, float(s), rec.label)
              for rec, s in zip(shortlist, s2_scores)]
    ranked = rank_candidates(query_id, scored)
    return RankedList(query_id, ranked.items[: cfg.stage2_k])


# ---------------------------------------------------------------------------
# Latency micro-benchmarks
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    label: str
    hidden: int
    layers: int
    query_embed_us: float
    query_embed_p95_us: float
    interaction_us: float
    interaction_p95_us: float
    cross_us: float
    cross_p95_us: float
    cross_over_interaction: float
    quant_interaction_us: float
    quant_speedup: float


BENCH_COLUMNS = (
    "label", "hidden", "layers", "query_embed_us", "query_embed_p95_us",
    "interaction_us", "interaction_p95_us", "cross_us", "cross_p95_us",
    "cross_over_interaction", "quant_interaction_us", "quant_speedup",
)


def _interleaved_times(
    metrics: list[tuple[str, object, int]], *, trials: int, warmup: int
) -> dict[str, tuple[float, float]]:
    """Median/p95 microseconds per call, sampling all metrics round-robin
    each trial so machine-load drift hits every metric alike."""
    for _, fn, _ in metrics:
        for _ in range(warmup):
            fn()
    samples: dict[str, list[float]] = {name: [] for name, _, _ in metrics}
    for _ in range(trials):
        for name, fn, inner in metrics:
            t0 = time.perf_counter()
            for _ in range(inner):
                fn()
            samples[name].append((time.perf_counter() - t0) / inner)
    return {
        name: (float(np.median(vals) * 1e6), float(np.quantile(vals, 0.95) * 1e6))
        for name, vals in samples.items()
    }


def bench(
    sizes: list[tuple[str, EncoderConfig]] | None = None,
    *,
    seed: int = 0,
    query_len: int = 8,
    trials: int = 40,
    inner_interaction: int = 200,
    warmup: int = 3,
) -> list[BenchRow]:
    """Median/p95 wall time for a query embedding, one interaction
    evaluation (float32 and quantized), and one full cross-encoder forward.

    Runs pinned to one BLAS thread; metrics are sampled round-robin within
    each trial so load drift cancels out of the derived ratios.  The
    cross-encoder forward uses a max-length sequence, matching the cost of
    scoring one (query, document) pair without precomputation.
    """
    if sizes is None:
        sizes = [("desk", EncoderConfig())]
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    with threadpool_limits(limits=1):
        for label, cfg in sizes:
            weights = init_weights(cfg, seed)
            query_ids = [CLS, *rng.integers(4, cfg.vocab_size, size=query_len - 2).tolist(), SEP]
            pair_ids = [CLS, *rng.integers(4, cfg.vocab_size, size=cfg.max_pos - 2).tolist(), SEP]
            head_w = rng.normal(0.0, 0.02, size=cfg.hidden).astype(np.float32)

            def embed_query():
                return encode_sequence(query_ids, weights, cfg)

            def cross_forward():
                emb = encode_sequence(pair_ids, weights, cfg)
                return 1.0 / (1.0 + math.exp(-float(head_w @ emb.data)))

            n = cfg.hidden
            iw = inter.weights_as_arrays(
                inter.init_interaction(inter.Variant.FINAL, n, seed)
            )
            e_q = rng.normal(size=n).astype(np.float32)
            e_d = rng.normal(size=n).astype(np.float32)
            quantized = QuantizedFinal(iw)
            quantized.warm_up()
            ed_codes, ed_params = quantize_vector(e_d)

            def interact():
                return inter.score_fast(inter.Variant.FINAL, e_q, e_d, iw)

            def interact_quantized():
                return quantized.score(e_q, ed_codes, ed_params)

            stats = _interleaved_times(
                [
                    ("embed", embed_query, 2),
                    ("interact", interact, inner_interaction),
                    ("cross", cross_forward, 1),
                    ("quant", interact_quantized, inner_interaction),
                ],
                trials=trials,
                warmup=warmup,
            )
            q_med, q_p95 = stats["embed"]
            i_med, i_p95 = stats["interact"]
            c_med, c_p95 = stats["cross"]
            iq_med, _ = stats["quant"]
            rows.append(BenchRow(
                label=label, hidden=cfg.hidden, layers=cfg.layers,
                query_embed_us=q_med, query_embed_p95_us=q_p95,
                interaction_us=i_med, interaction_p95_us=i_p95,
                cross_us=c_med, cross_p95_us=c_p95,
                cross_over_interaction=c_med / i_med if i_med > 0 else math.inf,
                quant_interaction_us=iq_med,
                quant_speedup=i_med / iq_med if iq_med > 0 else math.inf,
            ))
    return rows


def write_bench_tsv(rows: list[BenchRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("\t".join(BENCH_COLUMNS) + "\n")
        for row in rows:
            values = [getattr(row, col) for col in BENCH_COLUMNS]
            handle.write("\t".join(
                f"{v:.3f}" if isinstance(v, float) else str(v) for v in values
            ) + "\n")
