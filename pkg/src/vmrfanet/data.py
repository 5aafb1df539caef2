"""Datasets, synthetic data, augmentation, and identity-balanced batch sampling."""

import colorsys
import csv
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyDatasetError, IngestionError, SamplingError
from .io import atomic_write, encode_ppm, read_ppm

MANIFEST_HEADER = ["path", "person_id", "camera_id"]
STANDARDIZE_MEAN = 0.5
STANDARDIZE_STD = 0.25


@dataclass
class LabeledImage:
    """One bounding box.  ``label`` is the contiguous training index of ``person_id``."""

    path: str
    person_id: int
    camera_id: int
    label: int = -1
    _pixels: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def pixels(self):
        if self._pixels is None:
            self._pixels = read_ppm(self.path)
        return self._pixels


@dataclass
class HdaConfig:
    sigma: float = 0.05
    clip: float = 0.15
    apply_prob: float = 0.4

    def __post_init__(self):
        if not 0 <= self.apply_prob <= 1:
            raise ConfigError(f"hda apply_prob must lie in [0, 1], got {self.apply_prob}")
        if self.clip <= 0:
            raise ConfigError(f"hda clip must be positive, got {self.clip}")
        if self.sigma < 0:
            raise ConfigError(f"hda sigma must be non-negative, got {self.sigma}")


@dataclass
class AugmentConfig:
    height: int = 96
    width: int = 32
    hda: HdaConfig = field(default_factory=HdaConfig)
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: float = 0.3  # aspect ratio range is [r, 1/r]


@dataclass
class BatchSpec:
    P: int = 24
    K: int = 4
    seed: int = 0

    @property
    def batch_size(self):
        return self.P * self.K


def sample_rng(seed, epoch, sample_index):
    """Independent random stream for one sample of one epoch."""
    return np.random.default_rng([int(seed), int(epoch), int(sample_index)])


# ---------------------------------------------------------------- manifests

def load_manifest(path, num_cameras=None):
    """Read a ``path,person_id,camera_id`` CSV; image paths are relative to the CSV.

    Identity labels are re-indexed to ``0..n-1`` in order of sorted person id.
    Pixels are decoded on first access; existence and the P6 magic are checked
    up front.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise IngestionError(f"manifest {path} does not exist")
    base = os.path.dirname(os.path.abspath(path))
    images = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError(f"manifest {path} is empty")
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise IngestionError(f"manifest {path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise IngestionError(f"manifest {path} row {rowno}: expected 3 fields, got {len(row)}")
            rel, pid, cam = (c.strip() for c in row)
            try:
                pid, cam = int(pid), int(cam)
            except ValueError:
                raise IngestionError(f"manifest {path} row {rowno}: ids must be integers") from None
            if pid < 0:
                raise IngestionError(f"manifest {path} row {rowno}: negative person_id {pid}")
            if cam < 0 or (num_cameras is not None and cam >= num_cameras):
                raise IngestionError(
                    f"manifest {path} row {rowno}: camera_id {cam} outside [0, N_v={num_cameras})")
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            if not os.path.isfile(full):
                raise IngestionError(f"manifest {path} row {rowno}: image {full} not found")
            with open(full, "rb") as img:
                if img.read(2) != b"P6":
                    raise IngestionError(f"manifest {path} row {rowno}: {full} is not a P6 PPM")
            images.append(LabeledImage(full, pid, cam))
    if not images:
        raise EmptyDatasetError(f"manifest {path} has no rows")
    relabel = {pid: i for i, pid in enumerate(sorted({im.person_id for im in images}))}
    for im in images:
        im.label = relabel[im.person_id]
    return images


def write_manifest(path, images):
    base = os.path.dirname(os.path.abspath(path))
    lines = [",".join(MANIFEST_HEADER)]
    for im in images:
        rel = os.path.relpath(im.path, base)
        lines.append(f"{rel},{im.person_id},{im.camera_id}")
    atomic_write(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------- synthetic data

def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _identity_appearance(seed, pid, num_ids):
    rng = np.random.default_rng([seed, 1, pid])
    # spread the torso hue over the circle so identities stay distinguishable
    torso_hue = (pid / num_ids + rng.uniform(-0.2, 0.2) / num_ids) % 1.0
    return {
        "hair": _hsv(rng.uniform(0, 0.15), rng.uniform(0.3, 0.8), rng.uniform(0.1, 0.5)),
        "skin": _hsv(rng.uniform(0.03, 0.1), rng.uniform(0.3, 0.6), rng.uniform(0.55, 0.9)),
        "torso": _hsv(torso_hue, rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95)),
        "legs": _hsv(rng.uniform(0, 1), rng.uniform(0.3, 0.9), rng.uniform(0.25, 0.85)),
        "shoes": _hsv(rng.uniform(0, 1), rng.uniform(0, 0.5), rng.uniform(0.1, 0.6)),
        # identity-unique stripe frequency on the torso (cycles per torso height)
        "freq": 1.0 + 6.0 * ((pid * 0.618034) % 1.0),
        "width": rng.uniform(0.34, 0.46),
        "leg_split": rng.uniform(0.5, 0.6),
    }


def _camera_condition(seed, cam, num_cams):
    rng = np.random.default_rng([seed, 2, cam])
    hue = cam / num_cams + rng.uniform(-0.1, 0.1) / num_cams
    return {
        # tints point in evenly spaced colour directions so cameras stay separable
        "tint": 1.0 + 0.12 * (2 * _hsv(hue + 0.1, 1.0, 1.0) - 1),
        "brightness": rng.uniform(-0.08, 0.08),
        "bg": _hsv(hue + 0.05, 0.6, 0.55),
        "bg2": _hsv(hue + 0.15, 0.45, 0.35),
        "style": cam % 4,
        "offset": int(rng.integers(-4, 5)),
    }


def _background(cond, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    style = cond["style"]
    if style == 0:
        t = yy
    elif style == 1:
        t = (np.sin(yy * 2 * math.pi * 6) > 0).astype(float)
    elif style == 2:
        t = ((np.floor(yy * 8) + np.floor(xx * 4)) % 2)
    else:
        t = 0.5 + 0.5 * np.sin(xx * 7 + rng.uniform(0, 6)) * np.cos(yy * 5)
    t = t[..., None]
    return (1 - t) * cond["bg"] + t * cond["bg2"]


def render_person(appearance, cond, h, w, rng):
    """Render one HxWx3 image in [0, 1]."""
    img = _background(cond, h, w, rng)
    cx = w / 2 + rng.uniform(-0.06, 0.06) * w
    top = 0.06 * h + cond["offset"] + rng.uniform(-2, 2)
    scale = rng.uniform(0.95, 1.05)
    body_h = 0.88 * h * scale
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    rel = (ys - top) / body_h  # 0 at head top, 1 at feet
    half = appearance["width"] * w / 2

    head = ((xs - cx) / (0.45 * half)) ** 2 + ((rel - 0.07) / 0.07) ** 2 <= 1
    hair = head & (rel < 0.05)
    torso = (rel >= 0.14) & (rel < 0.5) & (np.abs(xs - cx) <= half)
    split = appearance["leg_split"]
    legs = (rel >= 0.5) & (rel < 0.94) & (np.abs(xs - cx) <= half * 0.8) & (np.abs(xs - cx) >= half * 0.08)
    shoes = (rel >= 0.94) & (rel < 1.0) & (np.abs(xs - cx) <= half * 0.85)

    img[head] = appearance["skin"]
    img[hair] = appearance["hair"]
    stripes = 1 + 0.18 * np.sin(2 * math.pi * appearance["freq"] * (rel - 0.14) / 0.36)
    torso_rgb = appearance["torso"][None, None, :] * stripes[..., None]
    img = np.where(torso[..., None], np.broadcast_to(torso_rgb, img.shape), img)
    leg_shade = np.where(rel < split + 0.2, 1.0, 0.9)
    leg_rgb = appearance["legs"][None, None, :] * leg_shade[..., None]
    img = np.where(legs[..., None], np.broadcast_to(leg_rgb, img.shape), img)
    img[shoes] = appearance["shoes"]

    img = img * cond["tint"] + cond["brightness"]
    img = img + rng.normal(0, 0.03, size=img.shape)
    return np.clip(img, 0, 1)


def synth_generate(num_ids, num_cams, imgs_per_id, height, width, seed, out_dir):
    """Write a procedural re-ID dataset and its ``manifest.csv``; returns the manifest path.

    Each identity has fixed clothing colours and a unique torso stripe
    frequency.  Each camera has a fixed colour tint, brightness shift,
    background style and vertical offset.  Output is a pure function of the
    arguments.
    """
    for name, v in (("num_ids", num_ids), ("num_cams", num_cams), ("imgs_per_id", imgs_per_id),
                    ("height", height), ("width", width)):
        if v <= 0:
            raise ConfigError(f"{name} must be positive, got {v}")
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    images = []
    conds = [_camera_condition(seed, c, num_cams) for c in range(num_cams)]
    for pid in range(num_ids):
        look = _identity_appearance(seed, pid, num_ids)
        for k in range(imgs_per_id):
            cam = (k + pid) % num_cams
            rng = np.random.default_rng([seed, 3, pid, k])
            img = render_person(look, conds[cam], height, width, rng)
            path = os.path.join(img_dir, f"p{pid:04d}_c{cam}_{k:03d}.ppm")
            atomic_write(path, encode_ppm(img.transpose(2, 0, 1)))
            images.append(LabeledImage(path, pid, cam, pid))
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest, images)
    return manifest


def split_dataset(images, test_fraction=0.2):
    """Identity-disjoint split into ``(train, query, gallery)``.

    The highest ``test_fraction`` of person ids are held out.  For each held
    out identity, the first image from each camera becomes a query and the
    rest form the gallery.
    """
    pids = sorted({im.person_id for im in images})
    n_test = max(1, int(round(len(pids) * test_fraction)))
    test_ids = set(pids[len(pids) - n_test:])
    train = [im for im in images if im.person_id not in test_ids]
    query, gallery, seen = [], [], set()
    for im in images:
        if im.person_id not in test_ids:
            continue
        key = (im.person_id, im.camera_id)
        (gallery if key in seen else query).append(im)
        seen.add(key)
    return train, query, gallery


def write_split(out_dir, images, test_fraction=0.2):
    train, query, gallery = split_dataset(images, test_fraction)
    paths = {}
    for name, part in (("train", train), ("query", query), ("gallery", gallery)):
        paths[name] = os.path.join(out_dir, f"{name}.csv")
        write_manifest(paths[name], part)
    return paths


# ---------------------------------------------------------------- augmentation

def hda_draw(rng, config):
    """Sample one horizontal crop/pad decision.

    Returns ``(applied, signed_draw, fraction, side)`` where ``fraction`` is
    ``min(|draw|, clip)`` and ``side`` is ``"top"`` or ``"bottom"``.  A
    negative draw means crop, a non-negative one means pad.
    """
    applied = rng.random() < config.apply_prob
    g = rng.normal(0.0, config.sigma)
    side = "top" if rng.random() < 0.5 else "bottom"
    return applied, g, min(abs(g), config.clip), side


def hda_apply(pixels, g, fraction, side):
    """Crop (g < 0) or pad (g >= 0) ``round(fraction*H)`` rows on ``side``.

    Padding rows take the per-channel image mean.
    """
    h = pixels.shape[1]
    rows = int(round(fraction * h))
    if rows == 0:
        return pixels
    if g < 0:
        rows = min(rows, h - 1)
        return pixels[:, rows:] if side == "top" else pixels[:, :h - rows]
    fill = np.broadcast_to(pixels.mean(axis=(1, 2), keepdims=True), (pixels.shape[0], rows, pixels.shape[2]))
    parts = [fill, pixels] if side == "top" else [pixels, fill]
    return np.concatenate(parts, axis=1).astype(pixels.dtype)


def hda_augment(pixels, config, rng):
    """Gaussian horizontal crop/pad; returns the new 3xH'xW array (width unchanged)."""
    if pixels.shape[1] < 8:
        raise ConfigError(f"HDA needs images at least 8 pixels tall, got {pixels.shape[1]}")
    applied, g, fraction, side = hda_draw(rng, config)
    if not applied:
        return pixels
    return hda_apply(pixels, g, fraction, side)


def _resize_axis(img, out_len, axis):
    in_len = img.shape[axis]
    if in_len == out_len:
        return img
    scale = in_len / out_len
    src = (np.arange(out_len) + 0.5) * scale - 0.5
    src = np.clip(src, 0, in_len - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_len - 1)
    frac = (src - lo).astype(np.float32)
    shape = [1] * img.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return np.take(img, lo, axis=axis) * (1 - frac) + np.take(img, hi, axis=axis) * frac


def resize_bilinear(pixels, height, width):
    """Bilinear resize of CxHxW with half-pixel centres (align_corners=False)."""
    return _resize_axis(_resize_axis(pixels, height, 1), width, 2).astype(np.float32)


def hflip(pixels):
    return pixels[:, :, ::-1]


def erase_box(shape, rng, area=(0.02, 0.4), aspect=0.3, attempts=100):
    """Pick a box ``(top, left, h, w)`` whose area ratio lies in ``area``; None if none fits."""
    _, H, W = shape
    total = H * W
    for _ in range(attempts):
        target = rng.uniform(*area) * total
        ratio = math.exp(rng.uniform(math.log(aspect), math.log(1 / aspect)))
        h = int(round(math.sqrt(target * ratio)))
        w = int(round(math.sqrt(target / ratio)))
        if 0 < h < H and 0 < w < W and area[0] <= h * w / total <= area[1]:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    return None


def random_erase(pixels, rng, area=(0.02, 0.4), aspect=0.3):
    """Fill one random box with the per-channel image mean."""
    box = erase_box(pixels.shape, rng, area, aspect)
    if box is None:
        return pixels, None
    top, left, h, w = box
    out = pixels.copy()
    out[:, top:top + h, left:left + w] = pixels.mean(axis=(1, 2), keepdims=True)
    return out, box


def standardize(pixels):
    return ((pixels - STANDARDIZE_MEAN) / STANDARDIZE_STD).astype(np.float32)


def augment_chain(pixels, rng, train_mode, config=None):
    """Turn decoded pixels into a network-ready 3xHxW tensor.

    Train: HDA, resize, flip, random erasing, standardise.  Eval: resize and
    standardise only.  HDA runs before resizing so crops and pads are
    relative to the original box.
    """
    config = config or AugmentConfig()
    x = np.asarray(pixels, dtype=np.float32)
    if train_mode:
        x = hda_augment(x, config.hda, rng)
    x = resize_bilinear(x, config.height, config.width)
    if train_mode:
        if rng.random() < config.flip_prob:
            x = hflip(x)
        if rng.random() < config.erase_prob:
            x, _ = random_erase(x, rng, config.erase_area, config.erase_aspect)
    return standardize(x)


def load_batch(images, train_mode, config, seed=0, epoch=0, first_index=0):
    """Augment a list of images into an Nx3xHxW array; sample i uses stream (seed, epoch, first_index+i)."""
    out = np.empty((len(images), 3, config.height, config.width), np.float32)
    for i, im in enumerate(images):
        out[i] = augment_chain(im.pixels, sample_rng(seed, epoch, first_index + i), train_mode, config)
    return out


# ---------------------------------------------------------------- sampling

def group_by_label(images):
    groups = defaultdict(list)
    for i, im in enumerate(images):
        groups[im.label].append(i)
    return dict(sorted(groups.items()))


def pk_sample(images, spec, epoch, step, groups=None):
    """Draw P identities and K images each; a pure function of (seed, epoch, step).

    Images are drawn without replacement when an identity has at least K of
    them and with replacement otherwise.
    """
    groups = groups if groups is not None else group_by_label(images)
    labels = list(groups)
    if len(labels) < spec.P:
        raise SamplingError(f"need at least P={spec.P} identities, dataset has {len(labels)}")
    rng = np.random.default_rng([int(spec.seed), 7, int(epoch), int(step)])
    chosen = rng.choice(len(labels), size=spec.P, replace=False)
    batch = []
    for c in chosen:
        members = groups[labels[c]]
        picks = rng.choice(len(members), size=spec.K, replace=len(members) < spec.K)
        batch.extend(images[members[p]] for p in picks)
    return batch
