"""Single-image inference: overlay, confidence heatmap, optional dumps."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import image_to_tensor
from .checkpoint import Checkpoint
from .model import ContextSegModel, softmax_np
from .netpbm import read_image, write_image, write_mask
from .tensor import no_tape
from .train import model_from_checkpoint

# Background first, then one color per foreground class id (cycled).
PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 212), (0, 128, 128), (220, 190, 255),
], dtype=np.uint8)


class InferenceError(ValueError):
    pass


@dataclass
class InferResult:
    pred: np.ndarray  # (H, W) class ids
    conf: np.ndarray  # (H, W) max softmax probability
    overlay: np.ndarray
    heatmap: np.ndarray
    graph: dict | None = None
    attention: np.ndarray | None = None  # (h, w, heads, n)


def class_colors(num_classes: int) -> np.ndarray:
    idx = np.concatenate([[0], 1 + (np.arange(num_classes - 1) % (len(PALETTE) - 1))])
    return PALETTE[idx]


def blend(image: np.ndarray, pred: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """50/50 blend, rounding halves up."""
    a = image.astype(np.uint16)
    b = colors[pred].astype(np.uint16)
    return ((a + b + 1) // 2).astype(np.uint8)


def heatmap(conf: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(255.0 * conf + 0.5), 0, 255).astype(np.uint8)


def run_inference(model: ContextSegModel, image: np.ndarray) -> InferResult:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise InferenceError(f"expected an (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    try:
        with no_tape():
            out = model(image_to_tensor(image[None], model.dtype))
    except ValueError as e:
        raise InferenceError(f"image of shape {image.shape[:2]} does not fit the model: {e}") from None
    logits = out.logits.data[0]
    p = softmax_np(logits)
    pred = logits.argmax(axis=-1)
    conf = p.max(axis=-1)
    graph = None
    if out.graphs:
        g = out.graphs[0]
        graph = g.to_json()
        graph["labels"] = [model.vocab.name(nd.class_id) for nd in g.nodes]
    attn = None if out.attention is None else out.attention.data[0]
    return InferResult(pred, conf, blend(image, pred, class_colors(model.vocab.num_classes)),
                       heatmap(conf), graph, attn)


def attention_csv(attn: np.ndarray, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "head", "label", "weight"])
    h, wd, heads, n = attn.shape
    for r in range(h):
        for c in range(wd):
            for k in range(heads):
                for j in range(n):
                    w.writerow([r, c, k, labels[j], f"{attn[r, c, k, j]:.6f}"])
    return buf.getvalue()


def infer(ck: Checkpoint, image_path, out_dir, dump_graph: bool = False,
          dump_attention: bool = False) -> InferResult:
    model = model_from_checkpoint(ck)
    try:
        image = read_image(image_path)
    except FileNotFoundError:
        raise InferenceError(f"image not found: {image_path}") from None
    res = run_inference(model, image)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    write_image(out / f"{stem}_overlay.ppm", res.overlay)
    write_mask(out / f"{stem}_heatmap.pgm", res.heatmap)
    if dump_graph and res.graph is not None:
        (out / f"{stem}_graph.json").write_text(json.dumps(res.graph, indent=2, sort_keys=True) + "\n")
    if dump_attention and res.attention is not None:
        (out / f"{stem}_attention.csv").write_text(attention_csv(res.attention, model.vocab.labels))
    return res
