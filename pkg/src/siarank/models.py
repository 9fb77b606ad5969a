"""Ranking models and their training loops.

The query-doc (teacher) model runs one encoder over the concatenated
query/document pair and maps the [CLS] embedding through a linear +
sigmoid head.  The siamese (student) model embeds query and document
separately with one shared tower and compares the embeddings with an
interaction module.  Both train with Adam on MSE, early-stopped on dev
P@10; students may additionally learn from a teacher by label or loss
averaging and may copy the fine-tuned teacher tower at init.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import interaction as inter
from .autodiff import AdamState, Tape, Tensor
from .checkpoint import load_weights, read_kv, save_weights, write_kv
from .data import DatasetSplit
from .encoder import EncoderConfig, Pooling, encode_sequence, init_weights
from .errors import DataError, NumericError
from .evaluate import mean_p10_of_groups
from .tokenizer import Vocab, encode, encode_pair

TANH_RANGE = (-1.0, 1.0)
SIGMOID_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 32
    max_len: int = 128
    epochs: int = 5
    patience: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("lr must be >= 0; batch, epochs, patience must be >= 1")


class DistillMode(Enum):
    LABEL_AVERAGE = "label-average"
    LOSS_AVERAGE = "loss-average"


@dataclass
class DistillConfig:
    teacher: "QueryDocModel"
    target_mode: DistillMode = DistillMode.LOSS_AVERAGE
    init_from_teacher: bool = False


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_p10: float


def write_history(history: list[EpochStats], path: str | Path) -> None:
    """One line per epoch: epoch, train loss, dev P@10."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for row in history:
            handle.write(f"{row.epoch}\t{row.train_loss:.6f}\t{row.dev_p10:.4f}\n")


class QueryDocModel:
    """Cross-encoder over [CLS] query [SEP] doc [SEP] with a sigmoid head."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocab, weights: dict[str, Tensor],
                 max_len: int = 128):
        self.cfg = cfg
        self.vocab = vocab
        self.weights = weights
        self.max_len = max_len

    @classmethod
    def fresh(cls, cfg: EncoderConfig, vocab: Vocab, seed: int, max_len: int = 128):
        rng = np.random.default_rng(seed ^ 0x9E3779B9)
        weights = init_weights(cfg, seed)
        weights["head.w"] = Tensor(
            rng.normal(0.0, 0.02, size=cfg.hidden).astype(np.float32), requires_grad=True
        )
        weights["head.b"] = Tensor(np.zeros((), dtype=np.float32), requires_grad=True)
        return cls(cfg, vocab, weights, max_len)

    def params(self) -> dict[str, Tensor]:
        return self.weights

    def encoder_weights(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.weights.items() if not k.startswith("head.")}

    def score_ids(self, ids: list[int], *, train: bool = False, dropout_seed: int = 0) -> Tensor:
        emb = encode_sequence(ids, self.weights, self.cfg, pooling=Pooling.CLS,
                              train=train, dropout_seed=dropout_seed)
        logit = ad.add(ad.dot(self.weights["head.w"], emb), self.weights["head.b"])
        return ad.sigmoid(logit)

    def predict(self, query: str, doc_repr: str) -> float:
        ids = encode_pair(query, doc_repr, self.vocab, self.max_len).ids
        return float(self.score_ids(ids).data)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_weights(path, {f"encoder/{k}": t.data for k, t in self.weights.items()})
        meta: dict[str, object] = {"model": "query-doc", "max_len": self.max_len}
        meta.update(self.cfg.to_kv())
        write_kv(str(path) + ".cfg", meta)

    @classmethod
    def load(cls, path: str | Path, vocab: Vocab) -> "QueryDocModel":
        path = Path(path)
        meta = read_kv(str(path) + ".cfg")
        if meta.get("model") != "query-doc":
            raise DataError(f"{path}: not a query-doc checkpoint")
        cfg = EncoderConfig.from_kv(meta)
        raw = load_weights(path)
        weights = {
            k.removeprefix("encoder/"): Tensor(v, requires_grad=True)
            for k, v in raw.items()
        }
        return cls(cfg, vocab, weights, max_len=int(meta["max_len"]))


class SiameseModel:
    """Two-tower model: one shared encoder plus an interaction module."""

    def __init__(
        self,
        cfg: EncoderConfig,
        vocab: Vocab,
        enc_weights: dict[str, Tensor],
        int_weights: dict[str, Tensor],
        variant: inter.Variant,
        *,
        pooling: Pooling = Pooling.CLS,
        layer_weighting: bool = False,
        max_len: int = 128,
    ):
        self.cfg = cfg
        self.vocab = vocab
        self.enc_weights = enc_weights
        self.int_weights = int_weights
        self.variant = variant
        self.pooling = pooling
        self.layer_weighting = layer_weighting
        self.max_len = max_len

    @classmethod
    def fresh(
        cls,
        cfg: EncoderConfig,
        vocab: Vocab,
        variant: inter.Variant,
        seed: int,
        *,
        pooling: Pooling = Pooling.CLS,
        layer_weighting: bool = False,
        max_len: int = 128,
        encoder_init: dict[str, Tensor] | None = None,
    ) -> "SiameseModel":
        if encoder_init is not None:
            enc = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in encoder_init.items()}
            if layer_weighting and "layer_weights.logits" not in enc:
                enc["layer_weights.logits"] = Tensor(
                    np.zeros(cfg.layers + 1, dtype=np.float32), requires_grad=True
                )
        else:
            enc = init_weights(cfg, seed, layer_weighting=layer_weighting)
        iw = inter.init_interaction(variant, cfg.hidden, seed ^ 0x5BF03635)
        return cls(cfg, vocab, enc, iw, variant,
                   pooling=pooling, layer_weighting=layer_weighting, max_len=max_len)

    @property
    def output_range(self) -> tuple[float, float]:
        return inter.output_range(self.variant)

    def params(self) -> dict[str, Tensor]:
        merged = dict(self.enc_weights)
        for k, t in self.int_weights.items():
            merged[f"interaction/{k}"] = t
        return merged

    def embed_ids(self, ids: list[int], *, train: bool = False, dropout_seed: int = 0) -> Tensor:
        return encode_sequence(ids, self.enc_weights, self.cfg, pooling=self.pooling,
                               layer_weighting=self.layer_weighting, train=train,
                               dropout_seed=dropout_seed)

    def embed(self, text: str) -> np.ndarray:
        ids = encode(text, self.vocab, self.max_len).ids
        return self.embed_ids(ids).data

    def score_embeddings(self, e_q: np.ndarray, e_d: np.ndarray) -> float:
        return inter.score_fast(self.variant, e_q, e_d,
                                inter.weights_as_arrays(self.int_weights))

    def predict(self, query: str, doc_repr: str) -> float:
        return self.score_embeddings(self.embed(query), self.embed(doc_repr))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tensors = {f"encoder/{k}": t.data for k, t in self.enc_weights.items()}
        tensors.update({f"interaction/{k}": t.data for k, t in self.int_weights.items()})
        save_weights(path, tensors)
        meta: dict[str, object] = {
            "model": "siamese",
            "variant": self.variant.value,
            "pooling": self.pooling.value,
            "layer_weighting": int(self.layer_weighting),
            "max_len": self.max_len,
        }
        meta.update(self.cfg.to_kv())
        write_kv(str(path) + ".cfg", meta)

    @classmethod
    def load(cls, path: str | Path, vocab: Vocab) -> "SiameseModel":
        path = Path(path)
        meta = read_kv(str(path) + ".cfg")
        if meta.get("model") != "siamese":
            raise DataError(f"{path}: not a siamese checkpoint")
        cfg = EncoderConfig.from_kv(meta)
        raw = load_weights(path)
        enc: dict[str, Tensor] = {}
        iw: dict[str, Tensor] = {}
        for key, arr in raw.items():
            tensor = Tensor(arr, requires_grad=True)
            if key.startswith("interaction/"):
                iw[key.removeprefix("interaction/")] = tensor
            else:
                enc[key.removeprefix("encoder/")] = tensor
        return cls(
            cfg, vocab, enc, iw, inter.Variant(meta["variant"]),
            pooling=Pooling(meta["pooling"]),
            layer_weighting=bool(int(meta["layer_weighting"])),
            max_len=int(meta["max_len"]),
        )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _grouped_eval_pairs(split: DatasetSplit) -> dict[str, list[tuple[str, float, int]]]:
    """query_id -> list of (doc key, gold label, record index)."""
    groups: dict[str, list[tuple[str, float, int]]] = {}
    for qid, idxs in split.grouping.items():
        groups[qid] = [(split.records[i].url_raw, split.records[i].label, i)
                       for i in idxs]
    return groups


def _dev_p10_querydoc(model: QueryDocModel, dev: DatasetSplit,
                      pair_ids: list[list[int]]) -> float:
    scored: dict[str, list[tuple[str, float, float]]] = {}
    for qid, idxs in dev.grouping.items():
        rows = []
        for i in idxs:
            rec = dev.records[i]
            rows.append((rec.url_raw, float(model.score_ids(pair_ids[i]).data), rec.label))
        scored[qid] = rows
    return mean_p10_of_groups(scored)


def _dev_p10_siamese(model: SiameseModel, dev: DatasetSplit,
                     query_ids: dict[str, list[int]],
                     doc_ids: dict[str, list[int]]) -> float:
    doc_emb = {key: model.embed_ids(ids).data for key, ids in doc_ids.items()}
    scored: dict[str, list[tuple[str, float, float]]] = {}
    for qid, idxs in dev.grouping.items():
        e_q = model.embed_ids(query_ids[qid]).data
        rows = []
        for i in idxs:
            rec = dev.records[i]
            rows.append((rec.url_raw,
                         model.score_embeddings(e_q, doc_emb[rec.url_raw]),
                         rec.label))
        scored[qid] = rows
    return mean_p10_of_groups(scored)


def _sum_losses(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for item in losses[1:]:
        total = ad.add(total, item)
    return total


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, t in params.items():
        t.data = snap[k].copy()


def _scalar_target(value: float) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float32))


def _run_training(
    *,
    params: dict[str, Tensor],
    n_examples: int,
    forward_loss,
    dev_p10,
    cfg: TrainConfig,
) -> list[EpochStats]:
    """Shared epoch loop: shuffled minibatches, Adam, best-dev early stopping.

    Runs under a single BLAS thread so repeated runs are bit-identical.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    with threadpool_limits(limits=1):
        return _epoch_loop(params, n_examples, forward_loss, dev_p10, cfg, rng, state)


def _epoch_loop(params, n_examples, forward_loss, dev_p10, cfg, rng, state):
    history: list[EpochStats] = []
    best_p10 = -1.0
    best_snap = _snapshot(params)
    stale = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_examples)
        epoch_loss = 0.0
        for lo in range(0, n_examples, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            step += 1
            with Tape() as tape:
                losses = [forward_loss(int(j), step) for j in batch]
                loss = ad.scale(_sum_losses(losses), 1.0 / len(batch))
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at step {step}")
            tape.backward(loss)
            ad.adam_step(params, state, cfg.lr)
            ad.zero_grads(params)
            epoch_loss += value * len(batch)
        p10 = dev_p10()
        history.append(EpochStats(epoch, epoch_loss / n_examples, p10))
        if p10 > best_p10:
            best_p10 = p10
            best_snap = _snapshot(params)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(params, best_snap)
    return history


def train_query_doc(
    train: DatasetSplit,
    dev: DatasetSplit,
    vocab: Vocab,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
) -> tuple[QueryDocModel, list[EpochStats]]:
    """Fit the cross-encoder teacher with MSE on gold labels."""
    if not train.records or not dev.records:
        raise DataError("train and dev splits must be non-empty")
    model = QueryDocModel.fresh(enc_cfg, vocab, cfg.seed, max_len=cfg.max_len)
    train_ids = [encode_pair(r.query, r.doc_repr, vocab, cfg.max_len).ids
                 for r in train.records]
    dev_ids = [encode_pair(r.query, r.doc_repr, vocab, cfg.max_len).ids
               for r in dev.records]
    labels = [r.label for r in train.records]

    def forward_loss(j: int, step: int) -> Tensor:
        pred = model.score_ids(train_ids[j], train=True,
                               dropout_seed=step * 100003 + j)
        return ad.mse_loss(pred, _scalar_target(labels[j]))

    history = _run_training(
        params=model.params(),
        n_examples=len(train_ids),
        forward_loss=forward_loss,
        dev_p10=lambda: _dev_p10_querydoc(model, dev, dev_ids),
        cfg=cfg,
    )
    return model, history


def _student_targets(
    train: DatasetSplit, distill: DistillConfig | None, out_range: tuple[float, float]
) -> tuple[list[float], list[float] | None]:
    """Gold (and optional teacher) targets mapped into the student range."""
    tanh_like = out_range == TANH_RANGE

    def remap(p: float) -> float:
        return 2.0 * p - 1.0 if tanh_like else p

    gold = [remap(r.label) for r in train.records]
    if distill is None:
        return gold, None
    teacher = [remap(distill.teacher.predict(r.query, r.doc_repr))
               for r in train.records]
    return gold, teacher


def train_siamese(
    train: DatasetSplit,
    dev: DatasetSplit,
    vocab: Vocab,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    variant: inter.Variant = inter.Variant.FINAL,
    *,
    pooling: Pooling = Pooling.CLS,
    layer_weighting: bool = False,
    distill: DistillConfig | None = None,
) -> tuple[SiameseModel, list[EpochStats]]:
    """Fit the siamese student; optionally distill from a teacher.

    Gold labels map to [-1, 1] for tanh-range variants and stay in [0, 1]
    for sigmoid-range ones; teacher outputs are remapped the same way
    before any combination.  LABEL_AVERAGE trains on the midpoint of the
    two targets, LOSS_AVERAGE on the mean of the two MSE terms.
    """
    if not train.records or not dev.records:
        raise DataError("train and dev splits must be non-empty")
    encoder_init = None
    if distill is not None and distill.init_from_teacher:
        if distill.teacher.cfg != enc_cfg:
            raise DataError("teacher encoder config differs from student config")
        encoder_init = distill.teacher.encoder_weights()
    model = SiameseModel.fresh(
        enc_cfg, vocab, variant, cfg.seed,
        pooling=pooling, layer_weighting=layer_weighting, max_len=cfg.max_len,
        encoder_init=encoder_init,
    )
    gold, teacher = _student_targets(train, distill, model.output_range)

    query_ids_by_qid = {
        qid: encode(train.records[idxs[0]].query, vocab, cfg.max_len).ids
        for qid, idxs in train.grouping.items()
    }
    train_q_ids = [query_ids_by_qid[r.query_id] for r in train.records]
    train_d_ids = [encode(r.doc_repr, vocab, cfg.max_len).ids for r in train.records]
    dev_query_ids = {
        qid: encode(dev.records[idxs[0]].query, vocab, cfg.max_len).ids
        for qid, idxs in dev.grouping.items()
    }
    dev_doc_ids = {r.url_raw: encode(r.doc_repr, vocab, cfg.max_len).ids
                   for r in dev.records}

    label_average = distill is not None and distill.target_mode is DistillMode.LABEL_AVERAGE
    if label_average:
        midpoint = [(g + t) / 2.0 for g, t in zip(gold, teacher)]

    def forward_loss(j: int, step: int) -> Tensor:
        seed = step * 200003 + j
        e_q = model.embed_ids(train_q_ids[j], train=True, dropout_seed=seed)
        e_d = model.embed_ids(train_d_ids[j], train=True, dropout_seed=seed + 1)
        r = inter.score(variant, e_q, e_d, model.int_weights, train=True,
                        dropout_seed=seed + 2)
        r = ad.reshape(r, ())
        if teacher is None:
            return ad.mse_loss(r, _scalar_target(gold[j]))
        if label_average:
            return ad.mse_loss(r, _scalar_target(midpoint[j]))
        soft = ad.mse_loss(r, _scalar_target(teacher[j]))
        hard = ad.mse_loss(r, _scalar_target(gold[j]))
        return ad.scale(ad.add(soft, hard), 0.5)

    history = _run_training(
        params=model.params(),
        n_examples=len(train.records),
        forward_loss=forward_loss,
        dev_p10=lambda: _dev_p10_siamese(model, dev, dev_query_ids, dev_doc_ids),
        cfg=cfg,
    )
    return model, history


# ---------------------------------------------------------------------------
# Ensembling
# ---------------------------------------------------------------------------

class Combiner(Enum):
    MEAN = "mean"
    MAX = "max"


def ensemble_predict(
    models: list[SiameseModel], query: str, doc_repr: str,
    combiner: Combiner = Combiner.MEAN,
) -> float:
    if not models:
        raise DataError("ensemble needs at least one model")
    ranges = {m.output_range for m in models}
    if len(ranges) != 1:
        raise DataError(f"ensemble members have mixed output ranges: {ranges}")
    preds = [m.predict(query, doc_repr) for m in models]
    if combiner is Combiner.MEAN:
        return float(np.mean(preds))
    return float(np.max(preds))
