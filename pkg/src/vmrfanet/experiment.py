"""Synthetic end-to-end experiment: generate, split, train, evaluate."""

import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import build_config
from .data import load_manifest, split_dataset, synth_generate
from .evaluator import GalleryIndex, evaluate
from .trainer import Trainer, embed_images, predict_cameras


@dataclass
class SyntheticSetup:
    ids: int = 20
    cams: int = 4
    per_id: int = 25
    height: int = 128
    width: int = 48
    test_fraction: float = 0.2
    epochs: int = 40
    P: int = 4
    K: int = 4
    seed: int = 0


@dataclass
class RunResult:
    name: str
    epoch_means: dict
    rank1: float
    map: float
    camera_accuracy: float
    seconds: float

    def loss_ratio(self, epoch=30):
        """Mean combined loss of 1-based ``epoch`` (capped at the last one) over that of epoch 1."""
        epoch = min(epoch, len(self.epoch_means))
        return self.epoch_means[epoch - 1] / self.epoch_means[0]

    def summary(self):
        return (f"{self.name:10s} rank-1 {100 * self.rank1:5.1f}  mAP {100 * self.map:5.1f}  "
                f"camera acc {100 * self.camera_accuracy:5.1f}  "
                f"loss e{min(30, len(self.epoch_means))}/e1 {self.loss_ratio():.3f}  "
                f"({self.seconds:.0f} s)")


def prepare_data(setup, root):
    """Generate the dataset under ``root`` once and return ``(train, query, gallery)``."""
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.exists(manifest):
        synth_generate(setup.ids, setup.cams, setup.per_id, setup.height, setup.width, setup.seed, root)
    train, query, gallery = split_dataset(load_manifest(manifest, setup.cams), setup.test_fraction)
    # contiguous labels over the training identities only
    index = {pid: i for i, pid in enumerate(sorted({im.person_id for im in train}))}
    train = [replace(im, label=index[im.person_id]) for im in train]
    return train, query, gallery


def config_for(setup, attention=True, overrides=None):
    values = {"data.num_cameras": str(setup.cams), "data.P": str(setup.P), "data.K": str(setup.K),
              "sched.epochs": str(setup.epochs)}
    if not attention:
        values.update({"net.attention": "off", "loss.lambda3": "0"})
    values.update(overrides or {})
    return build_config(values, seed=setup.seed)


def run_one(name, config, train, query, gallery, out_dir=None):
    start = time.time()
    n_ids = len({im.label for im in train})
    config = replace(config, net=replace(config.net, num_identities=n_ids))
    trainer = Trainer(config, train, out_dir)
    trainer.run(write_files=out_dir is not None)
    net = trainer.network
    net.eval()
    q = GalleryIndex(embed_images(net, query, config.augment),
                     [im.person_id for im in query], [im.camera_id for im in query])
    g = GalleryIndex(embed_images(net, gallery, config.augment),
                     [im.person_id for im in gallery], [im.camera_id for im in gallery])
    report = evaluate(q, g)
    cam_acc = float("nan")
    if config.net.camera_loss_site != "none" and config.net.attention_enabled:
        held_out = query + gallery
        pred, _ = predict_cameras(net, held_out, config.augment)
        cam_acc = float(np.mean(pred == np.array([im.camera_id for im in held_out])))
    return RunResult(name, trainer.epoch_means(), report.rank(1), report.map, cam_acc, time.time() - start)


def run_synthetic(root, setup=None, baseline=True, write_runs=False):
    """Train the full model and, optionally, the attention-off baseline on the same seed."""
    setup = setup or SyntheticSetup()
    os.makedirs(root, exist_ok=True)
    train, query, gallery = prepare_data(setup, root)
    results = {}
    runs = [("full", True)] + ([("baseline", False)] if baseline else [])
    for name, attention in runs:
        out = os.path.join(root, name) if write_runs else None
        results[name] = run_one(name, config_for(setup, attention), train, query, gallery, out)
    return results
