"""Command-line entry point orchestrating every stage of the pipeline.

Each subcommand writes its artifacts plus a ``manifest.json`` into the
output directory (``--out``).  The manifest lands before work starts and
is rewritten with output hashes on success, so a run is reproducible from
the manifest alone.  Reports are TSV; figures render next to them as PNG.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import interaction as inter
from . import plots
from .checkpoint import read_kv
from .data import (
    DatasetSplit,
    SplitKind,
    SynthConfig,
    generate_synthetic,
    load_tsv,
    masked_doc_repr,
    save_tsv,
)
from .encoder import EncoderConfig, Pooling
from .errors import DataError, NumericError, SiarankError
from .evaluate import (
    PipelineConfig,
    bench,
    evaluate_lists,
    oracle_rank,
    random_baseline,
    rank_candidates,
    run_pipeline,
    score_against_store,
    write_bench_tsv,
    write_report_tsv,
)
from .gbrt import (
    GbrtConfig,
    GbrtModel,
    NEURAL_FEATURE,
    bm25,
    build_feature_stats,
    build_stats,
    split_features,
    train_gbrt,
)
from .models import (
    DistillConfig,
    DistillMode,
    QueryDocModel,
    SiameseModel,
    TrainConfig,
    train_query_doc,
    train_siamese,
    write_history,
)
from .store import EmbeddingStore, precompute, quantize_store
from .tokenizer import Vocab, train_vocab


class UsageError(SiarankError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(message)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Manifest:
    """Run manifest: resolved config, seed, input/output paths and hashes."""

    def __init__(self, out_dir: Path, subcommand: str, args: argparse.Namespace):
        self.path = out_dir / "manifest.json"
        skip = {"config", "func"}
        self.payload = {
            "subcommand": subcommand,
            "seed": getattr(args, "seed", None),
            "config": {k: v for k, v in sorted(vars(args).items()) if k not in skip},
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, name: str, path: str | Path) -> None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"input file not found: {path}")
        self.payload["inputs"][name] = {"path": str(path), "sha256": _sha256(path)}

    def add_output(self, name: str, path: str | Path) -> Path:
        self.payload["outputs"][name] = {"path": str(path), "sha256": None}
        return Path(path)

    def write(self) -> None:
        self.path.write_text(json.dumps(self.payload, indent=2, default=str) + "\n",
                             encoding="utf-8")

    def finalize(self) -> None:
        for entry in self.payload["outputs"].values():
            path = Path(entry["path"])
            if path.exists():
                entry["sha256"] = _sha256(path)
        self.write()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(path: str, kind: SplitKind) -> DatasetSplit:
    return load_tsv(path, kind)


def _encoder_config(args, vocab: Vocab) -> EncoderConfig:
    return EncoderConfig(
        layers=args.layers, hidden=args.hidden, heads=args.heads,
        ff_dim=args.ff_dim, vocab_size=len(vocab), max_pos=args.max_pos,
        dropout_p=args.dropout,
    )


def _train_config(args, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        lr=args.lr, batch_size=args.batch, max_len=args.max_len,
        epochs=args.epochs, patience=args.patience,
        seed=args.seed if seed is None else seed,
    )


def _grouped_candidates(split: DatasetSplit) -> dict[str, list[tuple[str, float]]]:
    return {
        qid: [(split.records[i].url_raw, split.records[i].label) for i in idxs]
        for qid, idxs in split.grouping.items()
    }


def _standalone_report(model: SiameseModel, split: DatasetSplit):
    doc_emb: dict[str, np.ndarray] = {}
    lists = []
    for qid, idxs in split.grouping.items():
        e_q = model.embed(split.records[idxs[0]].query)
        rows = []
        for i in idxs:
            rec = split.records[i]
            if rec.url_raw not in doc_emb:
                doc_emb[rec.url_raw] = model.embed(rec.doc_repr)
            rows.append((rec.url_raw, model.score_embeddings(e_q, doc_emb[rec.url_raw]),
                         rec.label))
        lists.append(rank_candidates(qid, rows))
    return evaluate_lists(lists)


def _neural_feature_map(model: SiameseModel, split: DatasetSplit,
                        store: EmbeddingStore) -> dict[tuple[str, str], float]:
    scores: dict[tuple[str, str], float] = {}
    for qid, idxs in split.grouping.items():
        query = split.records[idxs[0]].query
        keys = [split.records[i].url_raw for i in idxs]
        per_key = score_against_store(model, query, store, keys)
        for key, value in per_key.items():
            scores[(qid, key)] = value
    return scores


def _masked_split(split: DatasetSplit, parts: tuple[str, ...]) -> DatasetSplit:
    records = [
        type(rec)(
            query_id=rec.query_id, query=rec.query, url_raw=rec.url_raw,
            title=rec.title, bte=rec.bte,
            doc_repr=masked_doc_repr(rec, parts),
            label=rec.label, split=rec.split,
        )
        for rec in split.records
    ]
    return DatasetSplit(kind=split.kind, records=records)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "synth-data", args)
    paths = {name: manifest.add_output(name, out / f"{name}.tsv")
             for name in ("train", "dev", "test")}
    manifest.write()
    cfg = SynthConfig(
        vocab_size=args.vocab_size, n_queries=args.queries,
        docs_per_query=args.docs_per_query,
        relevant_fraction=args.relevant_fraction, noise=args.noise, seed=args.seed,
    )
    train, dev, test = generate_synthetic(cfg)
    for split, name in ((train, "train"), (dev, "dev"), (test, "test")):
        save_tsv(split, paths[name])
        print(f"{name}: {len(split)} records, {len(split.grouping)} queries")
    manifest.finalize()
    return 0


def cmd_tokenizer_train(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "tokenizer-train", args)
    for i, path in enumerate(args.data):
        manifest.add_input(f"data{i}", path)
    vocab_path = manifest.add_output("vocab", out / "vocab.txt")
    manifest.write()
    corpus: list[str] = []
    for path in args.data:
        split = _load_split(path, SplitKind.TRAIN_BIG)
        corpus.extend(r.query for r in split.records)
        corpus.extend(r.doc_repr for r in split.records)
    vocab = train_vocab(corpus, max_size=args.max_size, min_freq=args.min_freq)
    vocab.save(vocab_path)
    print(f"vocab: {len(vocab)} tokens -> {vocab_path}")
    manifest.finalize()
    return 0


def cmd_train_teacher(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "train-teacher", args)
    manifest.add_input("train", args.train)
    manifest.add_input("dev", args.dev)
    manifest.add_input("vocab", args.vocab)
    model_path = manifest.add_output("model", out / "teacher.srwt")
    history_path = manifest.add_output("history", out / "teacher_history.tsv")
    figure_path = manifest.add_output("figure", out / "teacher_history.png")
    manifest.write()
    vocab = Vocab.load(args.vocab)
    train = _load_split(args.train, SplitKind.TRAIN_BIG)
    dev = _load_split(args.dev, SplitKind.DEV)
    model, history = train_query_doc(train, dev, vocab, _encoder_config(args, vocab),
                                     _train_config(args))
    model.save(model_path)
    write_history(history, history_path)
    plots.plot_epoch_history(history, figure_path, title="query-doc teacher")
    best = max(history, key=lambda h: h.dev_p10)
    print(f"best dev P@10 {best.dev_p10:.2f} at epoch {best.epoch} -> {model_path}")
    manifest.finalize()
    return 0


def _train_one_siamese(args, vocab, train, dev, seed, teacher=None):
    distill = None
    if teacher is not None:
        distill = DistillConfig(
            teacher=teacher,
            target_mode=DistillMode(args.distill_mode),
            init_from_teacher=args.init_from_teacher,
        )
    return train_siamese(
        train, dev, vocab, _encoder_config(args, vocab), _train_config(args, seed),
        inter.Variant(args.variant),
        pooling=Pooling(args.pooling),
        layer_weighting=args.layer_weighting,
        distill=distill,
    )


def cmd_train_siamese(args, require_teacher: bool = False) -> int:
    out = _out_dir(args)
    name = "distill" if require_teacher else "train-siamese"
    manifest = Manifest(out, name, args)
    manifest.add_input("train", args.train)
    manifest.add_input("dev", args.dev)
    manifest.add_input("vocab", args.vocab)
    if require_teacher and not args.teacher:
        raise UsageError("distill requires --teacher")
    teacher = None
    if args.teacher:
        manifest.add_input("teacher", args.teacher)
    model_path = manifest.add_output("model", out / "siamese.srwt")
    history_path = manifest.add_output("history", out / "siamese_history.tsv")
    figure_path = manifest.add_output("figure", out / "siamese_history.png")
    manifest.write()
    vocab = Vocab.load(args.vocab)
    if args.teacher:
        teacher = QueryDocModel.load(args.teacher, vocab)
    train = _load_split(args.train, SplitKind.TRAIN_BIG)
    dev = _load_split(args.dev, SplitKind.DEV)
    model, history = _train_one_siamese(args, vocab, train, dev, args.seed, teacher)
    model.save(model_path)
    write_history(history, history_path)
    plots.plot_epoch_history(history, figure_path, title=f"siamese ({args.variant})")
    best = max(history, key=lambda h: h.dev_p10)
    print(f"best dev P@10 {best.dev_p10:.2f} at epoch {best.epoch} -> {model_path}")
    manifest.finalize()
    return 0


def cmd_precompute(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "precompute", args)
    manifest.add_input("model", args.model)
    for i, path in enumerate(args.docs):
        manifest.add_input(f"docs{i}", path)
    manifest.add_input("vocab", args.vocab)
    store_path = manifest.add_output("store", out / "embeddings.bin")
    manifest.write()
    vocab = Vocab.load(args.vocab)
    model = SiameseModel.load(args.model, vocab)
    records = []
    for path in args.docs:
        records.extend(_load_split(path, SplitKind.TEST).records)
    store = precompute(model, records, parallelism=args.workers)
    store.save(store_path)
    print(f"{len(store)} embeddings of dim {store.dim} -> {store_path}")
    manifest.finalize()
    return 0


def cmd_quantize(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "quantize", args)
    store_file = Path(args.store)
    if not store_file.exists():
        raise DataError(f"precompute required: store file {store_file} does not exist")
    manifest.add_input("store", store_file)
    out_path = manifest.add_output("store_u8", out / "embeddings_u8.bin")
    manifest.write()
    store = EmbeddingStore.load(store_file)
    quantized = quantize_store(store)
    quantized.save(out_path)
    print(f"quantized {len(quantized)} embeddings -> {out_path}")
    manifest.finalize()
    return 0


def cmd_train_gbrt(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "train-gbrt", args)
    manifest.add_input("train", args.train)
    manifest.add_input("dev", args.dev)
    use_neural = bool(args.model or args.embeddings)
    if use_neural and not (args.model and args.embeddings and args.vocab):
        raise UsageError("neural feature needs --model, --embeddings and --vocab together")
    if args.model:
        manifest.add_input("model", args.model)
        manifest.add_input("embeddings", args.embeddings)
    model_path = manifest.add_output("model", out / "gbrt.txt")
    history_path = manifest.add_output("history", out / "gbrt_history.tsv")
    manifest.write()
    train = _load_split(args.train, SplitKind.TRAIN_SMALL)
    dev = _load_split(args.dev, SplitKind.DEV)
    stats = build_feature_stats(train.records + dev.records)
    neural_train = neural_dev = None
    if use_neural:
        vocab = Vocab.load(args.vocab)
        siamese = SiameseModel.load(args.model, vocab)
        store = EmbeddingStore.load(args.embeddings)
        neural_train = _neural_feature_map(siamese, train, store)
        neural_dev = _neural_feature_map(siamese, dev, store)
    X, y, schema = split_features(train, stats, neural_train)
    X_dev, y_dev, _ = split_features(dev, stats, neural_dev)
    cfg = GbrtConfig(n_trees=args.trees, depth=args.depth, shrinkage=args.shrinkage,
                     early_stop_rounds=args.early_stop, seed=args.seed)
    model, history = train_gbrt(X, y, X_dev, y_dev, cfg, schema)
    model.save(model_path)
    with Path(history_path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("round\ttrain_rmse\tdev_rmse\n")
        for row in history:
            handle.write(f"{row.round}\t{row.train_rmse:.6f}\t{row.dev_rmse:.6f}\n")
    print(f"{len(model.trees)} trees (schema: {', '.join(schema)}) -> {model_path}")
    manifest.finalize()
    return 0


def cmd_rank(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "rank", args)
    manifest.add_input("data", args.data)
    manifest.add_input("stage1", args.stage1)
    manifest.add_input("stage2", args.stage2)
    manifest.add_input("vocab", args.vocab)
    manifest.add_input("model", args.model)
    stage2_model = GbrtModel.load(args.stage2)
    needs_store = NEURAL_FEATURE in stage2_model.schema
    if needs_store and not args.embeddings:
        raise DataError("precompute required: stage-2 model uses the neural feature; "
                        "pass --embeddings")
    if args.embeddings:
        manifest.add_input("embeddings", args.embeddings)
    rankings_path = manifest.add_output("rankings", out / "rankings.tsv")
    report_path = manifest.add_output("report", out / "report.tsv")
    per_query_path = manifest.add_output("per_query", out / "per_query.tsv")
    figure_path = manifest.add_output("figure", out / "per_query_p10.png")
    manifest.write()
    vocab = Vocab.load(args.vocab)
    data = _load_split(args.data, SplitKind.TEST)
    stage1_model = GbrtModel.load(args.stage1)
    siamese = SiameseModel.load(args.model, vocab)
    store = EmbeddingStore.load(args.embeddings) if args.embeddings else None
    stats = build_feature_stats(data.records)
    cfg = PipelineConfig(stage1_k=args.stage1_k)
    lists = []
    skipped = 0
    with Path(rankings_path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("query_id\trank\tkey\tscore\tlabel\n")
        for qid, idxs in data.grouping.items():
            candidates = [data.records[i] for i in idxs]
            query = candidates[0].query
            neural = None
            if needs_store:
                neural = score_against_store(siamese, query, store,
                                             [rec.url_raw for rec in candidates])
            ranked = run_pipeline(qid, query, candidates, cfg, stage1_model,
                                  stage2_model, stats, neural)
            if ranked is None:
                skipped += 1
                continue
            lists.append(ranked)
            for position, item in enumerate(ranked.items, start=1):
                handle.write(f"{qid}\t{position}\t{item.key}\t{item.score:.6f}"
                             f"\t{item.label}\n")
    report = evaluate_lists(lists, n_skipped=skipped)
    write_report_tsv(report, report_path, per_query_path)
    plots.plot_per_query_histogram(report, figure_path)
    print(f"P@10 {report.p_at_10:.2f}  DCG {report.dcg:.4f}  "
          f"({report.n_queries} queries, {skipped} without retrievable docs)")
    manifest.finalize()
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "evaluate", args)
    manifest.add_input("data", args.data)
    report_path = manifest.add_output("report", out / "report.tsv")
    per_query_path = manifest.add_output("per_query", out / "per_query.tsv")
    figure_path = manifest.add_output("figure", out / "per_query_p10.png")
    manifest.write()
    data = _load_split(args.data, SplitKind.TEST)
    groups = _grouped_candidates(data)
    if args.ranking == "random":
        report = random_baseline(groups, runs=args.runs, seed=args.seed)
    elif args.ranking == "oracle":
        report = evaluate_lists([oracle_rank(qid, cands) for qid, cands in groups.items()])
    elif args.ranking == "bm25":
        stats = build_stats([rec.doc_repr.split()
                             for rec in {r.url_raw: r for r in data.records}.values()])
        lists = []
        for qid, idxs in data.grouping.items():
            q_terms = data.records[idxs[0]].query.split()
            rows = [
                (data.records[i].url_raw,
                 bm25(q_terms, data.records[i].doc_repr.split(), stats),
                 data.records[i].label)
                for i in idxs
            ]
            lists.append(rank_candidates(qid, rows))
        report = evaluate_lists(lists)
    else:
        raise UsageError(f"unknown ranking {args.ranking!r}")
    write_report_tsv(report, report_path, per_query_path)
    plots.plot_per_query_histogram(report, figure_path)
    print(f"{args.ranking}: P@10 {report.p_at_10:.2f}  DCG {report.dcg:.4f}")
    manifest.finalize()
    return 0


def _gbrt_p10(args, vocab, model, train, test) -> float:
    """P@10 of a quick GBRT reranker using the model's score as a feature."""
    stats = build_feature_stats(train.records + test.records)
    store_like = {r.url_raw: model.embed(r.doc_repr)
                  for r in {rec.url_raw: rec for rec in train.records + test.records}.values()}

    def neural_map(split):
        out: dict[tuple[str, str], float] = {}
        for qid, idxs in split.grouping.items():
            e_q = model.embed(split.records[idxs[0]].query)
            for i in idxs:
                rec = split.records[i]
                out[(qid, rec.url_raw)] = model.score_embeddings(
                    e_q, store_like[rec.url_raw])
        return out

    X, y, schema = split_features(train, stats, neural_map(train))
    X_test, _, _ = split_features(test, stats, neural_map(test))
    gbrt_model, _ = train_gbrt(X, y, X, y, GbrtConfig(n_trees=80, early_stop_rounds=80),
                               schema)
    preds = gbrt_model.predict(X_test)
    lists = []
    for qid, idxs in test.grouping.items():
        rows = [(test.records[i].url_raw, float(preds[i]), test.records[i].label)
                for i in idxs]
        lists.append(rank_candidates(qid, rows))
    return evaluate_lists(lists).p_at_10


def cmd_ablate_parts(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "ablate-parts", args)
    for name in ("train", "dev", "test", "vocab"):
        manifest.add_input(name, getattr(args, name))
    table_path = manifest.add_output("table", out / "parts.tsv")
    figure_path = manifest.add_output("figure", out / "parts.png")
    manifest.write()
    vocab = Vocab.load(args.vocab)
    train = _load_split(args.train, SplitKind.TRAIN_BIG)
    dev = _load_split(args.dev, SplitKind.DEV)
    test = _load_split(args.test, SplitKind.TEST)
    masks = [("title",), ("url",), ("bte",), ("title", "url"), ("title", "url", "bte")]
    rows = []
    for parts in masks:
        m_train = _masked_split(train, parts)
        m_dev = _masked_split(dev, parts)
        m_test = _masked_split(test, parts)
        model, _ = _train_one_siamese(args, vocab, m_train, m_dev, args.seed)
        row = {"parts": "+".join(parts),
               "standalone": _standalone_report(model, m_test).p_at_10}
        if args.with_gbrt:
            row["with_gbrt"] = _gbrt_p10(args, vocab, model, m_train, m_test)
        rows.append(row)
        print(f"{row['parts']}: standalone P@10 {row['standalone']:.2f}")
    with Path(table_path).open("w", encoding="utf-8", newline="\n") as handle:
        cols = ["parts", "standalone"] + (["with_gbrt"] if args.with_gbrt else [])
        handle.write("\t".join(cols) + "\n")
        for row in rows:
            handle.write("\t".join(
                f"{row[c]:.2f}" if isinstance(row[c], float) else str(row[c])
                for c in cols) + "\n")
    plots.plot_parts_comparison(rows, figure_path)
    manifest.finalize()
    return 0


def cmd_ablate_volume(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "ablate-volume", args)
    for name in ("train", "dev", "test", "vocab"):
        manifest.add_input(name, getattr(args, name))
    table_path = manifest.add_output("table", out / "volume.tsv")
    figure_path = manifest.add_output("figure", out / "volume.png")
    manifest.write()
    vocab = Vocab.load(args.vocab)
    train = _load_split(args.train, SplitKind.TRAIN_BIG)
    dev = _load_split(args.dev, SplitKind.DEV)
    test = _load_split(args.test, SplitKind.TEST)
    sizes = sorted({min(int(s), len(train.records)) for s in args.sizes.split(",")})
    rows = []
    for size in sizes:
        standalone = []
        with_gbrt = []
        for run in range(args.runs_per_size):
            seed = args.seed + 7919 * run
            rng = np.random.default_rng(seed)
            keep = sorted(rng.choice(len(train.records), size=size, replace=False))
            subset = DatasetSplit(kind=train.kind,
                                  records=[train.records[i] for i in keep])
            model, _ = _train_one_siamese(args, vocab, subset, dev, seed)
            standalone.append(_standalone_report(model, test).p_at_10)
            if args.with_gbrt:
                with_gbrt.append(_gbrt_p10(args, vocab, model, subset, test))
        row = {"size": size,
               "standalone_mean": float(np.mean(standalone)),
               "standalone_std": float(np.std(standalone))}
        if args.with_gbrt:
            row["gbrt_mean"] = float(np.mean(with_gbrt))
            row["gbrt_std"] = float(np.std(with_gbrt))
        rows.append(row)
        print(f"size {size}: standalone {row['standalone_mean']:.2f} "
              f"+/- {row['standalone_std']:.2f}")
    cols = list(rows[0].keys())
    with Path(table_path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("\t".join(cols) + "\n")
        for row in rows:
            handle.write("\t".join(
                f"{row[c]:.3f}" if isinstance(row[c], float) else str(row[c])
                for c in cols) + "\n")
    plots.plot_volume_curve(rows, figure_path)
    manifest.finalize()
    return 0


def cmd_ablate_interaction(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "ablate-interaction", args)
    for name in ("train", "dev", "test", "vocab"):
        manifest.add_input(name, getattr(args, name))
    table_path = manifest.add_output("table", out / "interaction.tsv")
    figure_path = manifest.add_output("figure", out / "interaction.png")
    manifest.write()
    vocab = Vocab.load(args.vocab)
    train = _load_split(args.train, SplitKind.TRAIN_BIG)
    dev = _load_split(args.dev, SplitKind.DEV)
    test = _load_split(args.test, SplitKind.TEST)
    rows = []
    for variant in inter.Variant:
        values = []
        for run in range(args.seeds):
            seed = args.seed + 104729 * run
            args.variant = variant.value
            model, _ = _train_one_siamese(args, vocab, train, dev, seed)
            values.append(_standalone_report(model, test).p_at_10)
        rows.append({
            "variant": variant.value,
            "standalone_mean": float(np.mean(values)),
            "standalone_std": float(np.std(values)),
            "seeds": args.seeds,
        })
        print(f"{variant.value}: {rows[-1]['standalone_mean']:.2f} "
              f"+/- {rows[-1]['standalone_std']:.2f}")
    with Path(table_path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("variant\tstandalone_mean\tstandalone_std\tseeds\n")
        for row in rows:
            handle.write(f"{row['variant']}\t{row['standalone_mean']:.3f}"
                         f"\t{row['standalone_std']:.3f}\t{row['seeds']}\n")
    plots.plot_interaction_comparison(rows, figure_path)
    manifest.finalize()
    return 0


def cmd_bench(args) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, "bench", args)
    table_path = manifest.add_output("table", out / "bench.tsv")
    figure_path = manifest.add_output("figure", out / "bench.png")
    manifest.write()
    sizes = []
    for label in args.sizes.split(","):
        if label == "desk":
            sizes.append(("desk", EncoderConfig()))
        elif label == "double":
            sizes.append(("double", EncoderConfig(hidden=128, ff_dim=256, heads=4)))
        elif label == "production":
            from .encoder import PRODUCTION_CONFIG

            sizes.append(("production", PRODUCTION_CONFIG))
        else:
            raise UsageError(f"unknown bench size {label!r}")
    rows = bench(sizes, seed=args.seed, trials=args.trials)
    write_bench_tsv(rows, table_path)
    plots.plot_latency(rows, figure_path)
    for row in rows:
        print(f"{row.label}: interaction {row.interaction_us:.1f}us  "
              f"cross {row.cross_us:.0f}us  ratio {row.cross_over_interaction:.0f}x  "
              f"quant speedup {row.quant_speedup:.2f}x")
    manifest.finalize()
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------

def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="out", help="output directory")


def _add_encoder_flags(p: _Parser) -> None:
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ff-dim", type=int, default=128)
    p.add_argument("--max-pos", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.1)


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--patience", type=int, default=3)


def _add_siamese_flags(p: _Parser) -> None:
    p.add_argument("--variant", default="final",
                   choices=[v.value for v in inter.Variant])
    p.add_argument("--pooling", default="cls",
                   choices=[v.value for v in Pooling])
    p.add_argument("--layer-weighting", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--teacher", help="teacher checkpoint enabling distillation")
    p.add_argument("--distill-mode", default="loss-average",
                   choices=[m.value for m in DistillMode])
    p.add_argument("--init-from-teacher", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="siarank", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth-data", parents=[], help="generate planted synthetic splits")
    _add_common(p)
    p.add_argument("--vocab-size", type=int, default=300)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--docs-per-query", type=int, default=24)
    p.add_argument("--relevant-fraction", type=float, default=0.35)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("tokenizer-train", help="train the subword vocabulary")
    _add_common(p)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--max-size", type=int, default=2000)
    p.add_argument("--min-freq", type=int, default=2)
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("train-teacher", help="train the query-doc cross-encoder")
    _add_common(p)
    _add_encoder_flags(p)
    _add_train_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_train_teacher)

    for name, requires_teacher in (("train-siamese", False), ("distill", True)):
        p = sub.add_parser(name, help="train the siamese student"
                           + (" from a teacher" if requires_teacher else ""))
        _add_common(p)
        _add_encoder_flags(p)
        _add_train_flags(p)
        _add_siamese_flags(p)
        p.add_argument("--train", required=True)
        p.add_argument("--dev", required=True)
        p.add_argument("--vocab", required=True)
        p.set_defaults(func=lambda a, rt=requires_teacher: cmd_train_siamese(a, rt))

    p = sub.add_parser("precompute", help="precompute document embeddings")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--docs", nargs="+", required=True)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("quantize", help="quantize a float32 embedding store")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("train-gbrt", help="train the stage-2 boosted trees")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--vocab")
    p.add_argument("--model", help="siamese checkpoint providing the neural feature")
    p.add_argument("--embeddings", help="embedding store for the neural feature")
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--shrinkage", type=float, default=0.1)
    p.add_argument("--early-stop", type=int, default=100)
    p.set_defaults(func=cmd_train_gbrt)

    p = sub.add_parser("rank", help="run the staged ranking pipeline")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--stage1-k", type=int, default=200)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("evaluate", help="evaluate a baseline ranking")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ranking", default="random", choices=["random", "oracle", "bm25"])
    p.add_argument("--runs", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-parts", help="document-part ablation")
    _add_common(p)
    _add_encoder_flags(p)
    _add_train_flags(p)
    _add_siamese_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--with-gbrt", action="store_true")
    p.set_defaults(func=cmd_ablate_parts)

    p = sub.add_parser("ablate-volume", help="training-volume ablation")
    _add_common(p)
    _add_encoder_flags(p)
    _add_train_flags(p)
    _add_siamese_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--sizes", default="300,600,1200,2400")
    p.add_argument("--runs-per-size", type=int, default=4)
    p.add_argument("--with-gbrt", action="store_true")
    p.set_defaults(func=cmd_ablate_volume)

    p = sub.add_parser("ablate-interaction", help="interaction-variant ablation")
    _add_common(p)
    _add_encoder_flags(p)
    _add_train_flags(p)
    _add_siamese_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--seeds", type=int, default=4)
    p.set_defaults(func=cmd_ablate_interaction)

    p = sub.add_parser("bench", help="latency micro-benchmarks")
    _add_common(p)
    p.add_argument("--sizes", default="desk")
    p.add_argument("--trials", type=int, default=40)
    p.set_defaults(func=cmd_bench)

    return parser


def _apply_config_file(parser: _Parser, argv: list[str]) -> list[str]:
    """Apply --config key=value pairs as subcommand defaults."""
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    if at + 1 >= len(argv):
        raise UsageError("--config needs a path")
    values = read_kv(argv[at + 1])
    if not argv or argv[0].startswith("-"):
        raise UsageError("config file requires a subcommand")
    sub_actions = [a for a in parser._actions
                   if isinstance(a, argparse._SubParsersAction)]
    subparser = sub_actions[0].choices.get(argv[0])
    if subparser is None:
        return argv
    casts = {a.dest: (a.type or str) for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in casts:
            raise UsageError(f"config key {key!r} is not a flag of {argv[0]!r}")
        defaults[dest] = casts[dest](raw)
    subparser.set_defaults(**defaults)
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
