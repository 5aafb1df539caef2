import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vmrfanet.data import (AugmentConfig, BatchSpec, HdaConfig, LabeledImage, augment_chain, erase_box,
                           group_by_label, hda_apply, hda_augment, hda_draw, hflip, load_batch, load_manifest,
                           pk_sample, random_erase, resize_bilinear, sample_rng, split_dataset, standardize,
                           synth_generate, write_manifest)
from vmrfanet.errors import ConfigError, EmptyDatasetError, IngestionError, SamplingError
from vmrfanet.io import write_ppm


def clipped_half_normal_mean(sigma, clip):
    """E[min(|g|, clip)] for g ~ N(0, sigma), in closed form."""
    z = clip / sigma
    tail = 1 - 0.5 * (1 + math.erf(z / math.sqrt(2)))
    return sigma * math.sqrt(2 / math.pi) * (1 - math.exp(-z * z / 2)) + 2 * clip * tail


def _write_images(tmp_path, rows, size=(3, 10, 6)):
    lines = ["path,person_id,camera_id"]
    for i, (pid, cam) in enumerate(rows):
        name = f"img{i}.ppm"
        write_ppm(tmp_path / name, np.full(size, (i + 1) / (len(rows) + 1), np.float32))
        lines.append(f"{name},{pid},{cam}")
    path = tmp_path / "m.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- manifests

def test_manifest_reindexes_labels(tmp_path):
    images = load_manifest(_write_images(tmp_path, [(17, 0), (5, 1), (17, 1)]))
    assert len(images) == 3
    assert [im.label for im in images] == [1, 0, 1]
    assert {im.label for im in images} == {0, 1}
    assert images[0].pixels.shape == (3, 10, 6)


def test_manifest_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("path,person_id,camera_id\n")
    with pytest.raises(EmptyDatasetError):
        load_manifest(empty)
    with pytest.raises(IngestionError, match="N_v=2"):
        load_manifest(_write_images(tmp_path, [(0, 0), (1, 2)]), num_cameras=2)
    with pytest.raises(IngestionError, match="does not exist"):
        load_manifest(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("path,person_id,camera_id\nimg0.ppm,1\n")
    with pytest.raises(IngestionError, match="row 2"):
        load_manifest(bad)
    (tmp_path / "p5.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    wrong = tmp_path / "wrong.csv"
    wrong.write_text("path,person_id,camera_id\np5.ppm,0,0\n")
    with pytest.raises(IngestionError, match="P6"):
        load_manifest(wrong)


def test_manifest_round_trip(tmp_path):
    images = load_manifest(_write_images(tmp_path, [(3, 0), (4, 1)]))
    out = tmp_path / "copy.csv"
    write_manifest(out, images)
    again = load_manifest(out)
    assert [(a.path, a.person_id, a.camera_id) for a in again] == [(a.path, a.person_id, a.camera_id) for a in images]


# ---------------------------------------------------------------- synthetic data

def test_synth_counts_and_determinism(tmp_path):
    m1 = synth_generate(20, 4, 25, 32, 16, seed=1, out_dir=str(tmp_path / "a"))
    m2 = synth_generate(20, 4, 25, 32, 16, seed=1, out_dir=str(tmp_path / "b"))
    a, b = load_manifest(m1), load_manifest(m2)
    assert len(a) == 500
    assert len(open(m1).read().splitlines()) == 501
    for x, y in zip(a[::37], b[::37]):
        assert open(x.path, "rb").read() == open(y.path, "rb").read()
    assert sorted({im.camera_id for im in a}) == [0, 1, 2, 3]
    assert open(m1).read() == open(m2).read()


def test_synth_rejects_bad_counts(tmp_path):
    with pytest.raises(ConfigError):
        synth_generate(0, 4, 25, 32, 16, seed=1, out_dir=str(tmp_path))


def test_synth_camera_signal_recoverable(tmp_path):
    images = load_manifest(synth_generate(10, 4, 12, 64, 24, seed=2, out_dir=str(tmp_path)))
    feats = np.array([im.pixels.mean(axis=(1, 2)) for im in images])
    cams = np.array([im.camera_id for im in images])
    train = np.random.default_rng(0).random(len(images)) < 0.5
    means = np.stack([feats[train & (cams == c)].mean(0) for c in range(4)])
    pred = np.linalg.norm(feats[~train, None] - means[None], axis=-1).argmin(1)
    assert (pred == cams[~train]).mean() > 0.9


def test_split_is_identity_disjoint(tiny_dataset):
    _, images = tiny_dataset
    train, query, gallery = split_dataset(images, 0.34)
    train_ids = {im.person_id for im in train}
    test_ids = {im.person_id for im in query} | {im.person_id for im in gallery}
    assert not train_ids & test_ids and len(test_ids) == 2
    keys = [(im.person_id, im.camera_id) for im in query]
    assert len(keys) == len(set(keys))
    assert len(train) + len(query) + len(gallery) == len(images)


# ---------------------------------------------------------------- HDA

def test_hda_examples():
    img = np.random.default_rng(0).random((3, 40, 12)).astype(np.float32)
    assert hda_apply(img, 0.0, 0.0, "top") is img
    cropped = hda_apply(img, -0.30, min(0.30, 0.15), "top")
    assert cropped.shape == (3, 34, 12)
    np.testing.assert_array_equal(cropped, img[:, 6:])
    padded = hda_apply(img, 0.1, 0.1, "bottom")
    assert padded.shape == (3, 44, 12)
    np.testing.assert_allclose(padded[:, -4:], np.broadcast_to(img.mean(axis=(1, 2))[:, None, None], (3, 4, 12)),
                               rtol=1e-6)
    with pytest.raises(ConfigError):
        hda_augment(img[:, :7], HdaConfig(), np.random.default_rng(0))


def test_hda_config_validation():
    with pytest.raises(ConfigError):
        HdaConfig(apply_prob=1.5)
    with pytest.raises(ConfigError):
        HdaConfig(clip=0)


@given(seed=st.integers(0, 10_000), h=st.integers(8, 200))
def test_hda_row_change_bounded(seed, h):
    cfg = HdaConfig()
    img = np.zeros((3, h, 5), np.float32)
    out = hda_augment(img, cfg, np.random.default_rng(seed))
    assert out.shape[2] == 5
    assert abs(out.shape[0] - 3) == 0
    assert abs(out.shape[1] - h) <= round(cfg.clip * h)


def test_hda_statistics_small():
    r = np.random.default_rng(0)
    draws = [hda_draw(r, HdaConfig()) for _ in range(20_000)]
    applied = np.array([d[0] for d in draws])
    fractions = np.array([d[2] for d in draws])[applied]
    assert abs(applied.mean() - 0.4) < 0.02
    assert fractions.max() <= 0.15
    assert abs(fractions.mean() - clipped_half_normal_mean(0.05, 0.15)) < 0.002
    sides = np.array([d[3] == "top" for d in draws])
    assert abs(sides.mean() - 0.5) < 0.02


def test_clipped_half_normal_oracle_matches_monte_carlo():
    g = np.abs(np.random.default_rng(1).normal(0, 0.05, 400_000))
    assert abs(np.minimum(g, 0.15).mean() - clipped_half_normal_mean(0.05, 0.15)) < 2e-4
    assert abs(clipped_half_normal_mean(0.05, 0.15) - 0.0397) < 0.001


# ---------------------------------------------------------------- resize, flip, erase, chain

def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((3, 8, 4)).astype(np.float32)
    np.testing.assert_array_equal(resize_bilinear(img, 8, 4), img)
    const = np.full((3, 5, 7), 0.25, np.float32)
    np.testing.assert_allclose(resize_bilinear(const, 11, 3), 0.25, rtol=1e-6)


def test_resize_half_pixel_convention():
    img = np.array([[[0.0, 1.0]]], np.float32)
    # upsampling 2 -> 4 with half-pixel centres samples at -0.25, 0.25, 0.75, 1.25 (clamped)
    np.testing.assert_allclose(resize_bilinear(img, 1, 4)[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)
    down = resize_bilinear(np.arange(4, dtype=np.float32).reshape(1, 1, 4), 1, 2)
    np.testing.assert_allclose(down[0, 0], [0.5, 2.5], atol=1e-6)


def test_flip_is_involution():
    img = np.random.default_rng(0).random((3, 5, 4))
    np.testing.assert_array_equal(hflip(hflip(img)), img)
    np.testing.assert_array_equal(hflip(img)[:, :, 0], img[:, :, -1])


def test_erase_area_bounds():
    r = np.random.default_rng(0)
    ratios, aspects = [], []
    for _ in range(10_000):
        box = erase_box((3, 96, 32), r)
        assert box is not None
        top, left, h, w = box
        assert 0 <= top and top + h <= 96 and 0 <= left and left + w <= 32
        ratios.append(h * w / (96 * 32))
        aspects.append(h / w)
    assert 0.02 <= min(ratios) and max(ratios) <= 0.4


def test_random_erase_fills_with_mean():
    img = np.random.default_rng(0).random((3, 20, 10)).astype(np.float32)
    out, (top, left, h, w) = random_erase(img, np.random.default_rng(1))
    patch = out[:, top:top + h, left:left + w]
    np.testing.assert_allclose(patch, np.broadcast_to(img.mean(axis=(1, 2))[:, None, None], patch.shape), rtol=1e-6)


def test_chain_eval_deterministic_and_standardised():
    img = np.random.default_rng(0).random((3, 50, 20)).astype(np.float32)
    cfg = AugmentConfig(96, 32)
    a = augment_chain(img, None, False, cfg)
    b = augment_chain(img, np.random.default_rng(9), False, cfg)
    assert a.shape == (3, 96, 32) and a.tobytes() == b.tobytes()
    np.testing.assert_allclose(standardize(np.array([0.5, 0.75])), [0.0, 1.0])


def test_chain_train_uses_stream():
    img = np.random.default_rng(0).random((3, 50, 20)).astype(np.float32)
    cfg = AugmentConfig(96, 32)
    a = augment_chain(img, sample_rng(0, 1, 5), True, cfg)
    b = augment_chain(img, sample_rng(0, 1, 5), True, cfg)
    c = [augment_chain(img, sample_rng(0, 1, i), True, cfg) for i in range(6)]
    assert a.tobytes() == b.tobytes()
    assert len({x.tobytes() for x in c}) > 1


def test_load_batch_is_composition_independent(tiny_dataset):
    _, images = tiny_dataset
    cfg = AugmentConfig(96, 32)
    batch = load_batch(images[:6], True, cfg, seed=3, epoch=2, first_index=10)
    single = load_batch(images[4:5], True, cfg, seed=3, epoch=2, first_index=14)
    assert batch[4].tobytes() == single[0].tobytes()


# ---------------------------------------------------------------- P x K sampling

def test_pk_batch_size():
    assert BatchSpec(24, 4).batch_size == 96


def test_pk_composition_over_an_epoch(tiny_dataset):
    _, images = tiny_dataset
    spec = BatchSpec(4, 3, seed=1)
    groups = group_by_label(images)
    for step in range(10):
        batch = pk_sample(images, spec, epoch=0, step=step, groups=groups)
        labels, counts = np.unique([im.label for im in batch], return_counts=True)
        assert len(labels) == 4 and np.all(counts == 3)
        for lab in labels:
            paths = [im.path for im in batch if im.label == lab]
            assert len(set(paths)) == 3  # without replacement when enough images
    again = pk_sample(images, spec, 0, 3, groups)
    assert [im.path for im in again] == [im.path for im in pk_sample(images, spec, 0, 3, groups)]


def test_pk_with_replacement_for_small_identity():
    images = [LabeledImage(f"a{i}", 0, 0, 0) for i in range(2)] + [LabeledImage(f"b{i}", 1, 0, 1) for i in range(5)]
    batch = pk_sample(images, BatchSpec(2, 4, seed=0), 0, 0)
    small = [im.path for im in batch if im.label == 0]
    assert len(small) == 4 and set(small) <= {"a0", "a1"}


def test_pk_needs_enough_identities():
    images = [LabeledImage("x", 0, 0, 0), LabeledImage("y", 1, 0, 1)]
    with pytest.raises(SamplingError):
        pk_sample(images, BatchSpec(3, 2), 0, 0)
