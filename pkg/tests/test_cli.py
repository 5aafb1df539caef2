import os

import pytest

from vmrfanet import io
from vmrfanet.cli import load_embeddings, run
from vmrfanet.config import KEYS

TRAIN_SET = ["--set", "data.P=2", "--set", "data.K=2", "--set", "sched.epochs=2",
             "--set", "sched.steps_per_epoch=2", "--set", "data.num_cameras=3"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["synth", "--out", str(out), "--ids", "6", "--cams", "3", "--per-id", "6",
                "--height", "64", "--width", "24", "--test-fraction", "0.34", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run(["train", "--manifest", str(synth_dir / "train.csv"), "--out", str(out), "--epochs", "2",
                "--seed", "1"] + TRAIN_SET)
    assert code == 0
    return out


def test_synth_outputs(synth_dir):
    for name in ("manifest.csv", "train.csv", "query.csv", "gallery.csv"):
        assert (synth_dir / name).is_file()
    assert len((synth_dir / "manifest.csv").read_text().splitlines()) == 1 + 36


def test_train_writes_log_and_checkpoint(trained):
    assert (trained / "last.ckpt").is_file()
    lines = (trained / "train_log.csv").read_text().splitlines()
    assert len(lines) == 1 + 4


def test_train_is_deterministic(synth_dir, trained, tmp_path):
    assert run(["train", "--manifest", str(synth_dir / "train.csv"), "--out", str(tmp_path), "--epochs", "2",
                "--seed", "1"] + TRAIN_SET) == 0
    assert (tmp_path / "train_log.csv").read_text() == (trained / "train_log.csv").read_text()


def test_embed_and_eval(synth_dir, trained, tmp_path, capsys):
    ckpt = str(trained / "last.ckpt")
    for name in ("query", "gallery"):
        assert run(["embed", "--checkpoint", ckpt, "--manifest", str(synth_dir / f"{name}.csv"),
                    "--out", str(tmp_path / f"{name}.vtns")]) == 0
    g = load_embeddings(str(tmp_path / "gallery.vtns"))
    assert g.embeddings.shape[0] == len(g.person_ids)
    capsys.readouterr()
    assert run(["eval", "--query", str(tmp_path / "query.vtns"), "--gallery", str(tmp_path / "gallery.vtns"),
                "--cmc-out", str(tmp_path / "cmc.csv")]) == 0
    out = capsys.readouterr().out
    assert "mAP" in out and "rank-1" in out
    assert (tmp_path / "cmc.csv").read_text().startswith("rank,cmc\n1,")


def test_eval_self_retrieval_is_perfect(tmp_path, capsys):
    import numpy as np
    feats = np.eye(4, dtype=np.float32)
    for name, cam in (("q", 0), ("g", 1)):
        io.save_tensor(str(tmp_path / f"{name}.vtns"), feats)
        (tmp_path / f"{name}.csv").write_text("person_id,camera_id\n" + "".join(f"{i},{cam}\n" for i in range(4)))
    assert run(["eval", "--query", str(tmp_path / "q.vtns"), "--gallery", str(tmp_path / "g.vtns")]) == 0
    assert "100.0" in capsys.readouterr().out


def test_augment_preview(synth_dir, trained, tmp_path):
    assert run(["augment-preview", "--manifest", str(synth_dir / "train.csv"), "--n", "2",
                "--out", str(tmp_path), "--checkpoint", str(trained / "last.ckpt")]) == 0
    names = sorted(os.listdir(tmp_path))
    assert "000_before.ppm" in names and "001_after.ppm" in names
    masks = [n for n in names if n.startswith("000_mask") and n.endswith(".vtns")]
    assert len(masks) == 2
    m = io.load_tensor(str(tmp_path / masks[0]))
    assert m.ndim == 3 and (m > 0).all() and (m < 2).all()


def test_unknown_key_exits_1_without_output(synth_dir, tmp_path, capsys):
    out = tmp_path / "never"
    code = run(["train", "--manifest", str(synth_dir / "train.csv"), "--out", str(out),
                "--set", "loss.lambda9=1"])
    assert code == 1
    err = capsys.readouterr().err
    assert "loss.lambda1" in err and "net.attention" in err
    assert not out.exists()


def test_exit_codes(tmp_path, capsys):
    assert run(["embed", "--checkpoint", str(tmp_path / "missing.ckpt"), "--manifest", "x.csv",
                "--out", str(tmp_path / "e.vtns")]) == 1
    assert run(["no-such-command"]) == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    (tmp_path / "m.csv").write_text("path,person_id,camera_id\n")
    assert run(["embed", "--checkpoint", str(bad), "--manifest", str(tmp_path / "m.csv"),
                "--out", str(tmp_path / "e.vtns")]) == 2


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert all(k in out for k in KEYS)


def test_gradcheck_output(capsys):
    assert run(["gradcheck", "--instances", "2", "--coords", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("conv2d") for line in lines)
    assert lines[-1].startswith("end-to-end")
    assert all(line.split()[2] in ("ok", "FAIL") for line in lines)
