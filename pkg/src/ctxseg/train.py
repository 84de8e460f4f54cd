"""Training loop, evaluation and the four-variant ablation."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import image_to_tensor
from .checkpoint import Checkpoint
from .config import VARIANTS, TrainConfig, from_dict
from .embeddings import LabelEmbeddingSet, LabelVocabulary, SimilarityPairs, embed_labels
from .losses import contrastive_loss, cross_entropy_loss, total_loss
from .metrics import EvalReport, MapAccumulator, confusion_matrix, iou_from_confusion
from .model import ContextSegModel, ForwardOutput, softmax_np
from .optim import AdamState, adam_step
from .rng import get_state, make_rng, set_state
from .synth import Split, augment
from .tensor import NonFiniteError, Tape, Tensor, no_tape

log = logging.getLogger(__name__)

DATA_STREAM = 100
METRIC_COLUMNS = ["epoch", "loss", "loss_ce", "loss_contrastive", "train_miou", "val_miou", "val_map"]
VARIANT_TITLES = {
    "baseline": "Baseline (windowed-attention backbone)",
    "+llm": "+ Label embeddings",
    "+xattn": "+ Cross-attention",
    "+gnn": "+ Relation GNN",
}


class TrainingError(RuntimeError):
    pass


class VocabularyMismatch(ValueError):
    pass


@dataclass
class TrainResult:
    model: ContextSegModel
    checkpoint: Checkpoint
    rows: list[dict] = field(default_factory=list)

    def metrics_csv(self) -> str:
        return metrics_csv(self.rows)


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.6f}"


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + [_fmt(r[c]) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def build_model(cfg: TrainConfig, vocab: LabelVocabulary) -> ContextSegModel:
    return ContextSegModel(cfg, embed_labels(vocab, cfg.embeddings))


def batch_class_means(out: ForwardOutput, vocab: LabelVocabulary):
    """Mean refined embedding per class over the whole batch, with label names."""
    b = out.graph_batch
    if out.refined is None or b is None or b.num_nodes == 0:
        return None, []
    classes = np.unique(b.node_class)
    if len(classes) < 2:
        return None, []
    slot = np.searchsorted(classes, b.node_class)
    counts = np.bincount(slot, minlength=len(classes))
    means = T.segment_sum(out.refined, slot, len(classes)) * (1.0 / counts)[:, None].astype(out.refined.dtype)
    return means, [vocab.name(int(c)) for c in classes]


def compute_losses(model: ContextSegModel, out: ForwardOutput, masks: np.ndarray, cfg: TrainConfig,
                   pairs: SimilarityPairs):
    ce = cross_entropy_loss(out.logits, masks, cfg.loss)
    if out.first_logits is not None and cfg.train.aux_weight > 0:
        ce = ce + cross_entropy_loss(out.first_logits, masks, cfg.loss) * cfg.train.aux_weight
    means, names = batch_class_means(out, model.vocab)
    if means is not None:
        con = contrastive_loss(means, names, pairs, cfg.loss, known=model.vocab.labels)
    else:
        con = Tensor(np.zeros((), dtype=ce.dtype))
    return total_loss(ce, con, cfg.loss), ce, con


def _augment_batch(images, masks, rng, cfg: TrainConfig):
    crop = tuple(cfg.train.crop) if cfg.train.crop else None
    out_i, out_m = [], []
    for img, m in zip(images, masks):
        a, b = augment(img, m, rng, crop_size=crop, flip_prob=cfg.train.flip_prob)
        out_i.append(a)
        out_m.append(b)
    return np.stack(out_i), np.stack(out_m)


def predict(model: ContextSegModel, images: np.ndarray, batch_size: int = 16):
    """Argmax class, max softmax confidence and logits for uint8 images (N, H, W, 3)."""
    preds, confs, logits = [], [], []
    with no_tape():
        for s in range(0, len(images), batch_size):
            x = image_to_tensor(images[s:s + batch_size], model.dtype)
            lg = model(x).logits.data
            p = softmax_np(lg)
            preds.append(lg.argmax(axis=-1).astype(np.uint8))
            confs.append(p.max(axis=-1))
            logits.append(lg)
    return np.concatenate(preds), np.concatenate(confs), np.concatenate(logits)


def evaluate_predictions(pred: np.ndarray, conf: np.ndarray, gt: np.ndarray, vocab: LabelVocabulary,
                         confusable: list[int] | None = None) -> EvalReport:
    k = vocab.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    acc = MapAccumulator(k)
    for p, c, g in zip(pred, conf, gt):
        cm += confusion_matrix(p, g, k)
        acc.add(p, c, g)
    per_iou, miou = iou_from_confusion(cm)
    per_ap, mean_ap = acc.result()
    report = EvalReport(vocab.names(), per_iou, miou, per_ap, mean_ap, cm.tolist(), len(gt))
    if confusable:
        report.extra["confusable_miou"] = report.mean_iou_of(confusable)
    return report


def evaluate(model: ContextSegModel, split: Split, oracle: bool = False, batch_size: int = 16) -> EvalReport:
    """Evaluate on a split; ``oracle`` replaces predictions by the ground truth."""
    check_vocab(model.vocab, split.vocab)
    if oracle:
        pred, conf = split.masks.copy(), np.ones(split.masks.shape)
    else:
        pred, conf, _ = predict(model, split.images, batch_size)
    return evaluate_predictions(pred, conf, split.masks, split.vocab, split.confusable_ids)


def check_vocab(a: LabelVocabulary, b: LabelVocabulary) -> None:
    if a.labels != b.labels or a.background != b.background:
        raise VocabularyMismatch(f"model labels {list(a.labels)} do not match dataset labels {list(b.labels)}")


def make_checkpoint(model: ContextSegModel, cfg: TrainConfig, pairs: SimilarityPairs,
                    state: AdamState, rng, epoch: int) -> Checkpoint:
    return Checkpoint(
        config=cfg.to_dict(),
        labels=list(model.vocab.labels),
        similarity_pairs=pairs.to_list(),
        embeddings=model.label_emb.data.copy(),
        params={k: v.data.copy() for k, v in model.named_parameters().items()},
        adam_t=state.t,
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        rng_state=get_state(rng),
        epoch=epoch,
    )


def model_from_checkpoint(ck: Checkpoint) -> ContextSegModel:
    cfg = from_dict(ck.config)
    vocab = LabelVocabulary(tuple(ck.labels))
    model = ContextSegModel(cfg, LabelEmbeddingSet(vocab, ck.embeddings.astype(np.float64), "checkpoint"))
    model.label_emb.data = ck.embeddings.copy()
    params = model.named_parameters()
    if set(params) != set(ck.params):
        raise ValueError("checkpoint parameters do not match the configured model")
    for k, p in params.items():
        if ck.params[k].shape != p.shape:
            raise ValueError(f"parameter {k!r} has shape {ck.params[k].shape}, expected {p.shape}")
        p.data = ck.params[k].copy()
    return model


def train(cfg: TrainConfig, train_split: Split, val_split: Split | None = None,
          progress=None) -> TrainResult:
    vocab, pairs = train_split.vocab, train_split.pairs
    if val_split is not None:
        check_vocab(vocab, val_split.vocab)
    model = build_model(cfg, vocab)
    params = model.named_parameters()
    t = cfg.train
    state = AdamState(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps)
    rng = make_rng(cfg.seed, DATA_STREAM)
    n = len(train_split)
    k = vocab.num_classes
    rows = []
    for epoch in range(1, t.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        cm = np.zeros((k, k), dtype=np.int64)
        for s in range(0, n, t.batch_size):
            idx = order[s:s + t.batch_size]
            images, masks = _augment_batch(train_split.images[idx], train_split.masks[idx], rng, cfg)
            x = image_to_tensor(images, model.dtype)
            try:
                with Tape() as tape:
                    out = model(x, masks.shape[1:])
                    loss, ce, con = compute_losses(model, out, masks, cfg, pairs)
                tape.backward(loss, wrt=list(params.values()))
                adam_step(params, {name: p.grad for name, p in params.items()}, state)
            except NonFiniteError as e:
                raise TrainingError(f"non-finite value at epoch {epoch}, step {state.t + 1}: {e}") from None
            sums += (loss.item(), ce.item(), con.item())
            batches += 1
            cm += confusion_matrix(out.logits.data.argmax(axis=-1), masks, k)
        row = {
            "epoch": epoch,
            "loss": sums[0] / batches,
            "loss_ce": sums[1] / batches,
            "loss_contrastive": sums[2] / batches,
            "train_miou": iou_from_confusion(cm)[1],
            "val_miou": float("nan"),
            "val_map": float("nan"),
        }
        if val_split is not None and (epoch % t.eval_every == 0 or epoch == t.epochs):
            rep = evaluate(model, val_split)
            row["val_miou"], row["val_map"] = rep.miou, rep.map
        rows.append(row)
        log.info("epoch %d loss %.4f val mIoU %s", epoch, row["loss"], _fmt(row["val_miou"]))
        if progress is not None:
            progress(row)
    ck = make_checkpoint(model, cfg, pairs, state, rng, t.epochs)
    return TrainResult(model, ck, rows)


def resume_rng(ck: Checkpoint):
    rng = make_rng(0, DATA_STREAM)
    if ck.rng_state is not None:
        set_state(rng, ck.rng_state)
    return rng


@dataclass
class AblationRow:
    variant: str
    miou: float
    map: float
    confusable_miou: float
    delta_miou: float | None
    delta_map: float | None


def ablate(cfg: TrainConfig, train_split: Split, val_split: Split, progress=None):
    """Train and evaluate every variant with the shared seed."""
    rows: list[AblationRow] = []
    reports = {}
    for variant in VARIANTS:
        vcfg = cfg.replace(variant=variant)
        res = train(vcfg, train_split, val_split)
        rep = evaluate(res.model, val_split)
        reports[variant] = rep
        prev = rows[-1] if rows else None
        rows.append(AblationRow(
            variant, rep.miou, rep.map, rep.extra.get("confusable_miou", float("nan")),
            None if prev is None else rep.miou - prev.miou,
            None if prev is None else rep.map - prev.map,
        ))
        if progress is not None:
            progress(rows[-1])
    return rows, reports


ABLATION_COLUMNS = ["variant", "miou", "map", "delta_miou", "delta_map"]


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r.variant, _fmt(100 * r.miou), _fmt(100 * r.map),
                    "" if r.delta_miou is None else _fmt(100 * r.delta_miou),
                    "" if r.delta_map is None else _fmt(100 * r.delta_map)])
    return buf.getvalue()


def ablation_table(rows: list[AblationRow]) -> str:
    lines = [f"{'Model Variant':<42}{'mIoU (%)':>18}{'mAP (%)':>18}"]
    for r in rows:
        def cell(v, d):
            s = f"{100 * v:.1f}"
            return s if d is None else f"{s} ({100 * d:+.1f})"
        lines.append(f"{VARIANT_TITLES[r.variant]:<42}{cell(r.miou, r.delta_miou):>18}{cell(r.map, r.delta_map):>18}")
    return "\n".join(lines) + "\n"
