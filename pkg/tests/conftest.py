from pathlib import Path

import numpy as np
import pytest

from ctxseg.backbone import BackboneConfig
from ctxseg.config import DataConfig, TrainConfig, TrainSettings
from ctxseg.synth import SceneConfig, generate_dataset, load_split

GOLDEN = Path(__file__).parent / "golden"


def tiny_config(variant="+gnn", seed=0, epochs=2, dtype="real32") -> TrainConfig:
    """A 32x32, one-stage model that trains in about a second."""
    return TrainConfig(
        seed=seed,
        variant=variant,
        data=DataConfig(train_count=12, val_count=6),
        scene=SceneConfig(height=32, width=32, classes=_small_classes(), objects_max=3, snap=4),
        backbone=BackboneConfig(patch_size=4, widths=(16,), depths=(2,), window=4, heads=2),
        train=TrainSettings(epochs=epochs, batch_size=4, lr=1e-3, dtype=dtype),
    )


def _small_classes():
    from ctxseg.synth import ClassSpec

    return [
        ClassSpec("doctor", "square", (225, 225, 225), (8, 8)),
        ClassSpec("pedestrian", "square", (225, 225, 225), (8, 8)),
        ClassSpec("hospital", "triangle", (205, 50, 50), (8, 8)),
        ClassSpec("street", "disc", (60, 120, 205), (8, 8)),
        ClassSpec("car", "rect", (215, 180, 40), (6, 12)),
        ClassSpec("tree", "rect", (40, 160, 70), (12, 6)),
    ]


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config()
    generate_dataset(cfg.scene, cfg.data.train_count, 11, root / "train")
    generate_dataset(cfg.scene, cfg.data.val_count, 12, root / "val")
    return root, load_split(root / "train"), load_split(root / "val")


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """The desk-scale confusable dataset: 200 train (seed 1) / 50 val (seed 2) scenes."""
    root = tmp_path_factory.mktemp("desk")
    cfg = TrainConfig()
    generate_dataset(cfg.scene, 200, 1, root / "train")
    generate_dataset(cfg.scene, 50, 2, root / "val")
    return load_split(root / "train"), load_split(root / "val")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
