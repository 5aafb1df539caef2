"""Training objectives: identity softmax, smoothed camera softmax, batch-hard triplet."""

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import BatchCompositionError, ConfigError, LabelError, TrainingDivergenceError
from .tensor import dtype, Tensor

PART_NAMES = ("L_ID", "L1_triplet", "L2_triplet", "L_camera")


@dataclass
class LossWeights:
    lambda1: float = 5.0
    lambda2: float = 5.0
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class TripletConfig:
    margin: float = 0.3
    P: int = 24
    K: int = 4

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError("triplet margin must be non-negative")
        if self.P < 2 or self.K < 2:
            raise ConfigError(f"batch-hard mining needs P >= 2 and K >= 2, got P={self.P}, K={self.K}")

    @property
    def batch_size(self):
        return self.P * self.K


@dataclass
class CameraLossConfig:
    epsilon: float = 0.1
    num_cameras: int = 6

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.num_cameras < 1:
            raise ConfigError("num_cameras must be positive")


def _check_labels(labels, n_classes, n_rows, what):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n_rows:
        raise LabelError(f"{labels.shape[0]} {what} labels for {n_rows} rows")
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        raise LabelError(f"{what} label {labels[bad][0]} outside [0, {n_classes})")
    return labels


def soft_cross_entropy(logits, targets):
    """Mean over rows of ``-sum_j targets[j] * log_softmax(logits)[j]``."""
    logp = ops.log_softmax(logits)
    return -ops.sum(logp * Tensor(targets)) / float(logits.shape[0])


def id_loss(id_logits, labels):
    """Batch mean of the per-head softmax cross-entropies summed over all heads."""
    n, c = id_logits[0].shape
    labels = _check_labels(labels, c, n, "identity")
    onehot = np.zeros((n, c), dtype())
    onehot[np.arange(n), labels] = 1
    total = None
    for logits in id_logits:
        term = soft_cross_entropy(logits, onehot)
        total = term if total is None else total + term
    return total


def smoothed_camera_distribution(v, config):
    """Label-smoothed target: ``(1 - eps) * onehot(v) + eps / N_v``."""
    n = config.num_cameras
    if not 0 <= v < n:
        raise LabelError(f"camera label {v} outside [0, {n})")
    q = np.full(n, config.epsilon / n, dtype=np.float64)
    q[v] += 1.0 - config.epsilon
    return q


def camera_loss(camera_logits, camera_labels, config):
    """Smoothed camera cross-entropy summed over the attention heads, averaged over the batch.

    ``camera_logits`` are the classifier outputs on each camera feature.
    """
    n, width = camera_logits[0].shape
    if width != config.num_cameras:
        raise ConfigError(f"camera classifier emits {width} classes but num_cameras={config.num_cameras}")
    labels = _check_labels(camera_labels, config.num_cameras, n, "camera")
    targets = np.stack([smoothed_camera_distribution(v, config) for v in labels]).astype(dtype())
    total = None
    for logits in camera_logits:
        term = soft_cross_entropy(logits, targets)
        total = term if total is None else total + term
    return total


def check_pk_batch(identity_labels, config=None):
    labels = np.asarray(identity_labels).reshape(-1)
    ids, counts = np.unique(labels, return_counts=True)
    k = config.K if config is not None else counts[0]
    if (counts != k).any() or (config is not None and len(ids) != config.P):
        raise BatchCompositionError(
            f"expected {getattr(config, 'P', len(ids))} identities x {k} images, got counts "
            f"{dict(zip(ids.tolist(), counts.tolist()))}")
    if k < 2:
        raise BatchCompositionError("every identity needs at least two images")
    return labels


def hardest_pairs(features, labels):
    """Indices of the hardest positive and hardest negative for every anchor.

    Hardest positive maximises distance over same-identity rows (the anchor
    itself included); hardest negative minimises it over other identities.
    Ties resolve to the lowest index.
    """
    x = features.astype(np.float64)
    d = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0))
    same = labels[:, None] == labels[None, :]
    pos = np.where(same, d, -np.inf).argmax(axis=1)
    neg = np.where(same, np.inf, d).argmin(axis=1)
    return pos, neg


def pair_distance(features, i, j):
    diff = features[i] - features[j]
    return ops.sqrt(ops.maximum(ops.sum(diff * diff, axis=1), 0.0))


def batch_hard_triplet(features, identity_labels, config):
    """Mean over anchors of ``[m + d(a, hardest pos) - d(a, hardest neg)]_+``."""
    labels = check_pk_batch(identity_labels, config)
    if features.shape[0] != labels.shape[0]:
        raise BatchCompositionError(f"{features.shape[0]} feature rows for {labels.shape[0]} labels")
    anchors = np.arange(labels.shape[0])
    pos, neg = hardest_pairs(features.data, labels)
    hinge = pair_distance(features, anchors, pos) - pair_distance(features, anchors, neg) + float(config.margin)
    return ops.mean(ops.relu(hinge))


@dataclass
class LossParts:
    L_ID: Tensor
    L1_triplet: Tensor
    L2_triplet: Tensor
    L_camera: Tensor

    def values(self):
        return {name: float(getattr(self, name).item()) for name in PART_NAMES}


def combined_loss(parts, weights):
    """``L_ID + lambda1*L1 + lambda2*L2 + lambda3*L_camera``; raises on any non-finite part."""
    for name in PART_NAMES:
        value = getattr(parts, name).item()
        if not math.isfinite(value):
            raise TrainingDivergenceError(name, value)
    return (parts.L_ID
            + parts.L1_triplet * float(weights.lambda1)
            + parts.L2_triplet * float(weights.lambda2)
            + parts.L_camera * float(weights.lambda3))


def zero_loss():
    return Tensor(np.zeros((), dtype()))
