"""
Training a small CNN on ROT
===========================

ROT is the easiest family: a rotated mouth is visible from one disc
alone. A few epochs on a thousand images already move well past chance.
"""

import tempfile
from pathlib import Path

import numpy as np

from kanizsa.dataset import GenConfig, generate_dataset, load_packed
from kanizsa.geometry import DatasetKind
from kanizsa.nn import Network, TrainConfig, default_architecture, evaluate, prepare_images, train
from kanizsa.raster import RasterConfig

root = Path(tempfile.mkdtemp())
generate_dataset(GenConfig(kind=DatasetKind.ROT, counts=(1000, 200, 200),
                           image=RasterConfig(64, 64, 8), write_png=False), root)


def split(name):
    x, y = load_packed(root / f"{name}.knz")
    return prepare_images(x), y.astype(np.int64)


train_set, val_set, test_set = split("train"), split("val"), split("test")

net = Network(default_architecture(), (64, 64, 1), seed=0)
result = train(net, train_set, val_set, TrainConfig(max_epochs=5),
               on_epoch=lambda r: print(f"epoch {r.epoch}: val acc {r.val_acc:.3f}"))
print(result.outcome, "- selected epoch", result.selected_epoch)
print(f"test error {100 * evaluate(net, *test_set):.1f}%")
