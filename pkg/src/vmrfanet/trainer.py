"""SGD training loop with learning-rate groups, step schedule and checkpoints."""

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import io
from .data import BatchSpec, group_by_label, load_batch, pk_sample
from .errors import ContractError
from .losses import (PART_NAMES, LossParts, batch_hard_triplet, camera_loss, combined_loss, id_loss,
                     zero_loss)
from .network import Network
from .tensor import DTYPE, backward, no_grad

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "step") + PART_NAMES + ("combined",)
OPT_PREFIX = "opt#"
META_EPOCH = "meta#epoch"


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lrs: dict = field(default_factory=lambda: {"backbone": 0.01, "head": 0.1})
    decay_norm: bool = True
    buffers: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, optim):
        return cls(optim.momentum, optim.weight_decay,
                   {"backbone": optim.lr_backbone, "head": optim.lr_head}, optim.decay_norm)


def _is_norm_param(p):
    parts = p.name.split(".")
    return len(parts) >= 2 and parts[-2] == "bn"


def sgd_step(params, state, lr_scale=1.0):
    """One momentum-SGD update with coupled weight decay.

    ``g' = grad + wd * w``; ``buf = mu * buf + g'``; ``w -= lr_group * buf``.
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
    mu = DTYPE(state.momentum)
    for p in params:
        wd = state.weight_decay if (state.decay_norm or not _is_norm_param(p)) else 0.0
        g = p.grad + DTYPE(wd) * p.data if wd else p.grad
        buf = state.buffers.get(p.name)
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = mu * buf + g
        state.buffers[p.name] = buf.astype(DTYPE, copy=False)
        p.data -= DTYPE(state.lrs[p.group] * lr_scale) * state.buffers[p.name]


def lr_at(epoch, schedule, base_lr):
    if not 0 <= epoch < schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    drops = sum(1 for m in schedule.milestones if m <= epoch)
    return base_lr * schedule.factor ** drops


# ---------------------------------------------------------------- checkpoints

def checkpoint_entries(network, state, epoch):
    entries = dict(network.state_dict())
    for name, buf in state.buffers.items():
        entries[OPT_PREFIX + name] = buf
    entries[META_EPOCH] = np.array([epoch], dtype=DTYPE)
    return entries


def save_checkpoint(path, network, state, epoch):
    io.save_checkpoint(path, checkpoint_entries(network, state, epoch))


def load_checkpoint(path, network, state=None):
    """Restore parameters, running statistics and momentum buffers; returns the stored epoch."""
    entries = io.load_checkpoint(path)  # raises FormatError before anything is touched
    network.load_state_dict(entries)
    if state is not None:
        state.buffers = {k[len(OPT_PREFIX):]: v.copy() for k, v in entries.items() if k.startswith(OPT_PREFIX)}
    return int(entries[META_EPOCH][0]) if META_EPOCH in entries else 0


# ---------------------------------------------------------------- training

def compute_parts(network, outputs, batch, config):
    labels = np.array([im.label for im in batch])
    cams = np.array([im.camera_id for im in batch])
    parts = LossParts(
        L_ID=id_loss(outputs.id_logits, labels),
        L1_triplet=batch_hard_triplet(outputs.descriptor, labels, config.triplet),
        L2_triplet=batch_hard_triplet(outputs.aux_triplet_feature, labels, config.triplet),
        L_camera=zero_loss(),
    )
    if config.net.camera_loss_site != "none" and outputs.camera_features:
        parts.L_camera = camera_loss(network.camera_logits(outputs.camera_features), cams, config.camera)
    return parts


def format_row(epoch, step, values, combined):
    nums = [values[n] for n in PART_NAMES] + [combined]
    return ",".join([str(epoch), str(step)] + ["%.9g" % v for v in nums])


class Trainer:
    """Owns the network, optimizer state and log for one run."""

    def __init__(self, config, train_images, out_dir=None):
        self.config = config
        self.images = train_images
        self.groups = group_by_label(train_images)
        self.out_dir = out_dir if out_dir is not None else config.out_dir
        if config.net.num_identities != len(self.groups):
            raise ContractError(f"network has {config.net.num_identities} identity classes but the "
                                f"training set has {len(self.groups)} identities")
        self.network = Network(config.net, seed=config.seed)
        self.state = OptimizerState.from_config(config.optim)
        self.spec = BatchSpec(config.triplet.P, config.triplet.K, config.seed)
        bs = self.spec.batch_size
        self.steps_per_epoch = config.steps_per_epoch or math.ceil(len(train_images) / bs)
        self.epoch = 0
        self.history = []  # (epoch, step, part values, combined)

    @property
    def log_path(self):
        return os.path.join(self.out_dir, "train_log.csv")

    def checkpoint_path(self, epoch=None):
        name = "last.ckpt" if epoch is None else f"epoch{epoch:04d}.ckpt"
        return os.path.join(self.out_dir, name)

    def resume(self, path):
        self.epoch = load_checkpoint(path, self.network, self.state)
        return self.epoch

    def train_step(self, epoch, step):
        cfg = self.config
        batch = pk_sample(self.images, self.spec, epoch, step, self.groups)
        x = load_batch(batch, True, cfg.augment, cfg.seed, epoch, step * self.spec.batch_size)
        self.network.train()
        outputs = self.network(x)
        parts = compute_parts(self.network, outputs, batch, cfg)
        total = combined_loss(parts, cfg.weights)
        self.network.zero_grad()
        backward(total)
        lr_scale = lr_at(epoch, cfg.schedule, 1.0)
        sgd_step(self.network.parameters(), self.state, lr_scale)
        return parts.values(), total.item()

    def run(self, epochs=None, write_files=True):
        """Train from ``self.epoch`` up to ``epochs`` (default: the schedule's total)."""
        cfg = self.config
        end = cfg.schedule.total_epochs if epochs is None else epochs
        if write_files:
            os.makedirs(self.out_dir, exist_ok=True)
            self._truncate_log(self.epoch)
        for epoch in range(self.epoch, end):
            rows = []
            for s in range(self.steps_per_epoch):
                step = epoch * self.steps_per_epoch + s
                values, combined = self.train_step(epoch, s)
                self.history.append((epoch, step, values, combined))
                rows.append(format_row(epoch, step, values, combined))
            self.epoch = epoch + 1
            mean = np.mean([h[3] for h in self.history if h[0] == epoch])
            log.info("epoch %d  lr x%.4g  combined %.4f", epoch, lr_at(epoch, cfg.schedule, 1.0), mean)
            if write_files:
                with open(self.log_path, "a") as fh:
                    fh.write("\n".join(rows) + "\n")
                if self.epoch % cfg.checkpoint_every == 0 or self.epoch == end:
                    save_checkpoint(self.checkpoint_path(self.epoch), self.network, self.state, self.epoch)
                    save_checkpoint(self.checkpoint_path(), self.network, self.state, self.epoch)
        return self.history

    def _truncate_log(self, from_epoch):
        keep = [",".join(LOG_HEADER)]
        if os.path.exists(self.log_path):
            with open(self.log_path) as fh:
                lines = fh.read().splitlines()
            keep += [ln for ln in lines[1:] if ln and int(ln.split(",", 1)[0]) < from_epoch]
        io.atomic_write(self.log_path, ("\n".join(keep) + "\n").encode())

    def epoch_means(self):
        out = {}
        for epoch, _, _, combined in self.history:
            out.setdefault(epoch, []).append(combined)
        return {e: float(np.mean(v)) for e, v in out.items()}


def train(config, train_images, out_dir=None, epochs=None, write_files=True):
    trainer = Trainer(config, train_images, out_dir)
    trainer.run(epochs, write_files)
    return trainer


# ---------------------------------------------------------------- inspection helpers

def embed_images(network, images, augment, batch_size=64):
    x = load_batch(images, False, augment)
    return network.embed(x, batch_size)


def predict_cameras(network, images, augment, batch_size=64):
    """Camera predictions from the network's camera classifiers (eval mode).

    Returns ``(combined, per_head)`` where ``combined`` takes the argmax of the
    summed log-probabilities of both heads.
    """
    from . import ops

    x = load_batch(images, False, augment)
    was = network.training
    network.eval()
    heads, combined = [], []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                out = network(x[start:start + batch_size])
                logps = [ops.log_softmax(l).data for l in network.camera_logits(out.camera_features)]
                heads.append(np.stack([lp.argmax(1) for lp in logps]))
                combined.append(np.sum(logps, axis=0).argmax(1))
    finally:
        network.train(was)
    return np.concatenate(combined), np.concatenate(heads, axis=1)
