"""Synthetic scenes where two classes look identical and only a co-occurring
context object tells them apart.

Layout draws come from stream ``index`` of the dataset seed and pixel noise
from stream ``index + NOISE_STREAM``, so the noise field does not depend on
which classes were placed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import LabelVocabulary, SimilarityPairs
from .netpbm import read_image, read_mask, write_image, write_mask
from .rng import make_rng

NOISE_STREAM = 1 << 32
MANIFEST_VERSION = 1
SHAPES = ("square", "rect", "triangle", "disc")


class PlacementError(ValueError):
    pass


@dataclass
class ClassSpec:
    name: str
    shape: str
    color: tuple[int, int, int]
    size: tuple[int, int]  # (h, w)

    def __post_init__(self):
        self.color = tuple(int(c) for c in self.color)
        self.size = tuple(int(s) for s in self.size)
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")


@dataclass
class ConfusablePair:
    classes: tuple[str, str]
    contexts: tuple[str, str]  # contexts[i] disambiguates classes[i]

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.contexts = tuple(self.contexts)


def default_classes() -> list[ClassSpec]:
    return [
        ClassSpec("doctor", "square", (225, 225, 225), (16, 16)),
        ClassSpec("pedestrian", "square", (225, 225, 225), (16, 16)),
        ClassSpec("hospital", "triangle", (205, 50, 50), (16, 16)),
        ClassSpec("street", "disc", (60, 120, 205), (16, 16)),
        ClassSpec("car", "rect", (215, 180, 40), (12, 24)),
        ClassSpec("tree", "rect", (40, 160, 70), (24, 12)),
    ]


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    classes: list[ClassSpec] = field(default_factory=default_classes)
    confusable: list[ConfusablePair] = field(
        default_factory=lambda: [ConfusablePair(("doctor", "pedestrian"), ("hospital", "street"))])
    similarity_pairs: list[list[str]] = field(default_factory=lambda: [["doctor", "pedestrian"]])
    objects_min: int = 2
    objects_max: int = 4
    noise_sigma: float = 8.0
    background: tuple[int, int, int] = (30, 30, 30)
    snap: int = 8
    gap: int = 2
    context_max_dist: float = 0.4
    max_attempts: int = 200

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        self.confusable = [p if isinstance(p, ConfusablePair) else ConfusablePair(**p) for p in self.confusable]
        self.background = tuple(self.background)
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError("need 0 <= objects_min <= objects_max")
        by_name = self.spec_map()
        for pair in self.confusable:
            for n in pair.classes + pair.contexts:
                if n not in by_name:
                    raise ValueError(f"confusable pair references unknown class {n!r}")
            a, b = (by_name[n] for n in pair.classes)
            if (a.shape, a.color, a.size) != (b.shape, b.color, b.size):
                raise ValueError(f"confusable classes {pair.classes} must render identically")
        SimilarityPairs.from_list(self.similarity_pairs).check(self.vocabulary())

    def spec_map(self) -> dict[str, ClassSpec]:
        return {c.name: c for c in self.classes}

    def vocabulary(self) -> LabelVocabulary:
        return LabelVocabulary(tuple(c.name for c in self.classes))

    def distractors(self) -> list[str]:
        special = {n for p in self.confusable for n in p.classes + p.contexts}
        return [c.name for c in self.classes if c.name not in special]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleRecord:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 class ids, 0 = background
    objects: list[dict]
    scene_id: str
    seed: int
    stream: int


def shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    if shape in ("square", "rect"):
        return np.ones((h, w), dtype=bool)
    if shape == "disc":
        r = min(h, w) / 2.0
        return (rr - h / 2.0) ** 2 + (cc - w / 2.0) ** 2 <= r * r
    if shape == "triangle":
        half = rr / h * (w / 2.0)
        return np.abs(cc - w / 2.0) <= np.maximum(half, 0.5)
    raise ValueError(f"unknown shape {shape!r}")


def render(objects: list[dict], cfg: SceneConfig, noise: np.ndarray | None,
           vocab: LabelVocabulary | None = None) -> tuple[np.ndarray, np.ndarray]:
    vocab = vocab or cfg.vocabulary()
    specs = cfg.spec_map()
    canvas = np.empty((cfg.height, cfg.width, 3), dtype=np.float64)
    canvas[:] = cfg.background
    mask = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    for obj in objects:
        spec = specs[obj["class"]]
        r0, c0, h, w = obj["box"]
        m = shape_mask(spec.shape, h, w)
        canvas[r0:r0 + h, c0:c0 + w][m] = spec.color
        mask[r0:r0 + h, c0:c0 + w][m] = vocab.class_id(obj["class"])
    if noise is not None:
        canvas = canvas + noise
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return image, mask


def _overlaps(box, others, gap) -> bool:
    r0, c0, h, w = box
    for (s0, d0, hh, ww) in others:
        if r0 < s0 + hh + gap and s0 < r0 + h + gap and c0 < d0 + ww + gap and d0 < c0 + w + gap:
            return True
    return False


def _centre(box, cfg) -> tuple[float, float]:
    r0, c0, h, w = box
    return (r0 + h / 2.0) / cfg.height, (c0 + w / 2.0) / cfg.width


def _place(spec: ClassSpec, boxes: list, rng: np.random.Generator, cfg: SceneConfig, near=None):
    h, w = spec.size
    if h > cfg.height or w > cfg.width:
        raise PlacementError(f"class {spec.name!r} does not fit in the scene")
    rows = np.arange(0, cfg.height - h + 1, cfg.snap)
    cols = np.arange(0, cfg.width - w + 1, cfg.snap)
    for _ in range(cfg.max_attempts):
        box = (int(rng.choice(rows)), int(rng.choice(cols)), h, w)
        if _overlaps(box, boxes, cfg.gap):
            continue
        if near is not None:
            (y0, x0), (y1, x1) = _centre(box, cfg), _centre(near, cfg)
            if np.hypot(y0 - y1, x0 - x1) > cfg.context_max_dist:
                continue
        return box
    raise PlacementError(f"could not place {spec.name!r} after {cfg.max_attempts} attempts")


def layout(cfg: SceneConfig, rng: np.random.Generator, retries: int = 20) -> list[dict]:
    """Draw a scene; a failed placement restarts the scene (same stream) up to ``retries`` times."""
    for attempt in range(retries):
        try:
            return _layout_once(cfg, rng)
        except PlacementError:
            if attempt == retries - 1:
                raise
    raise PlacementError("retries must be >= 1")


def _layout_once(cfg: SceneConfig, rng: np.random.Generator) -> list[dict]:
    specs = cfg.spec_map()
    k = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    chosen: list[str] = []
    anchor = None
    if k >= 2 and cfg.confusable:
        pair = cfg.confusable[int(rng.integers(len(cfg.confusable)))]
        side = int(rng.integers(2))
        chosen = [pair.classes[side], pair.contexts[side]]
        anchor = 0
    pool = cfg.distractors()
    while len(chosen) < k:
        if not pool:
            raise PlacementError("no distractor classes to fill the scene")
        chosen.append(pool[int(rng.integers(len(pool)))])
    objects, boxes = [], []
    for i, name in enumerate(chosen):
        near = boxes[anchor] if (anchor is not None and i == 1) else None
        box = _place(specs[name], boxes, rng, cfg, near)
        boxes.append(box)
        objects.append({"class": name, "shape": specs[name].shape, "box": list(box)})
    return objects


def noise_field(cfg: SceneConfig, seed: int, index: int) -> np.ndarray | None:
    if cfg.noise_sigma <= 0:
        return None
    return make_rng(seed, index + NOISE_STREAM).normal(0.0, cfg.noise_sigma, size=(cfg.height, cfg.width, 3))


def generate_sample(cfg: SceneConfig, seed: int, index: int) -> SampleRecord:
    objects = layout(cfg, make_rng(seed, index))
    image, mask = render(objects, cfg, noise_field(cfg, seed, index))
    return SampleRecord(image, mask, objects, f"{index:06d}", seed, index)


def manifest_dict(cfg: SceneConfig, seed: int, samples: list[SampleRecord]) -> dict:
    return {
        "format": "ctxseg-manifest",
        "version": MANIFEST_VERSION,
        "seed": seed,
        "count": len(samples),
        "labels": list(cfg.vocabulary().labels),
        "background": cfg.vocabulary().background,
        "similarity_pairs": SimilarityPairs.from_list(cfg.similarity_pairs).to_list(),
        "confusable": [{"classes": list(p.classes), "contexts": list(p.contexts)} for p in cfg.confusable],
        "scene": cfg.to_dict(),
        "samples": [
            {"id": s.scene_id, "image": f"images/{s.scene_id}.ppm", "mask": f"masks/{s.scene_id}.pgm",
             "stream": s.stream, "objects": s.objects}
            for s in samples
        ],
    }


def generate_dataset(cfg: SceneConfig, count: int, seed: int, out_dir=None) -> list[SampleRecord]:
    """Generate ``count`` scenes; when ``out_dir`` is given also write the split
    (``images/*.ppm``, ``masks/*.pgm``, ``manifest.json``)."""
    samples = [generate_sample(cfg, seed, i) for i in range(count)]
    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        for s in samples:
            write_image(out / "images" / f"{s.scene_id}.ppm", s.image)
            write_mask(out / "masks" / f"{s.scene_id}.pgm", s.mask)
        doc = manifest_dict(cfg, seed, samples)
        (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return samples


@dataclass
class Split:
    images: np.ndarray  # (N, H, W, 3) uint8
    masks: np.ndarray  # (N, H, W) uint8
    vocab: LabelVocabulary
    pairs: SimilarityPairs
    manifest: dict

    def __len__(self) -> int:
        return len(self.images)

    @property
    def confusable_ids(self) -> list[int]:
        return sorted({self.vocab.class_id(n) for p in self.manifest.get("confusable", [])
                       for n in p["classes"]})


class DatasetError(ValueError):
    pass


def load_split(path) -> Split:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"missing manifest: {mpath}")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {mpath}: {e}") from None
    if doc.get("format") != "ctxseg-manifest" or doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest format in {mpath}")
    vocab = LabelVocabulary(tuple(doc["labels"]), doc.get("background", "background"))
    pairs = SimilarityPairs.from_list(doc.get("similarity_pairs", []))
    pairs.check(vocab)
    images, masks = [], []
    for s in doc["samples"]:
        img = read_image(root / s["image"])
        m = read_mask(root / s["mask"])
        if img.shape[:2] != m.shape:
            raise DatasetError(f"image/mask extents differ for sample {s['id']}")
        if m.max(initial=0) > len(vocab):
            raise DatasetError(f"mask of sample {s['id']} holds unknown class ids")
        images.append(img)
        masks.append(m)
    if not images:
        raise DatasetError(f"split {root} is empty")
    return Split(np.stack(images), np.stack(masks), vocab, pairs, doc)


def hflip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[:, ::-1].copy(), mask[:, ::-1].copy()


def crop(image: np.ndarray, mask: np.ndarray, top: int, left: int, size: tuple[int, int]):
    h, w = size
    return image[top:top + h, left:left + w].copy(), mask[top:top + h, left:left + w].copy()


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            crop_size: tuple[int, int] | None = None, flip_prob: float = 0.5):
    """Random crop (when ``crop_size`` is set) then random horizontal flip,
    applied identically to image and mask."""
    H, W = mask.shape
    if crop_size is not None:
        ch, cw = crop_size
        if not (0 < ch <= H and 0 < cw <= W):
            raise ValueError(f"invalid crop size {crop_size} for {H}x{W}")
        top = int(rng.integers(0, H - ch + 1))
        left = int(rng.integers(0, W - cw + 1))
        image, mask = crop(image, mask, top, left, (ch, cw))
    if rng.random() < flip_prob:
        image, mask = hflip(image, mask)
    return image, mask
