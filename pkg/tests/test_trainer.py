import numpy as np
import pytest
from hypothesis import given, strategies as st

from vmrfanet.config import (KEYS, REFERENCE_MILESTONES, Schedule, build_config, describe_keys, parse_lines,
                             parse_overrides)
from vmrfanet.errors import ConfigError, ContractError, TrainingDivergenceError
from vmrfanet.tensor import Parameter
from vmrfanet.trainer import (LOG_HEADER, OptimizerState, Trainer, load_checkpoint, lr_at, save_checkpoint,
                              sgd_step)


def _param(value, grad, name="head.fc.weight", group="head"):
    p = Parameter(np.array(value, np.float32), name=name, group=group)
    p.grad = np.array(grad, np.float32)
    return p


def _state(mu=0.9, wd=0.0, lr=0.1, decay_norm=True):
    return OptimizerState(mu, wd, {"backbone": lr, "head": lr}, decay_norm)


# ---------------------------------------------------------------- optimizer

def test_plain_step():
    p = _param([1.0], [0.1])
    sgd_step([p], _state(mu=0.0))
    assert p.data[0] == pytest.approx(0.99)


def test_momentum_recurrence():
    p = _param([0.0], [1.0])
    state = _state(mu=0.9, lr=1.0)
    sgd_step([p], state)
    np.testing.assert_allclose(state.buffers[p.name], [1.0])
    sgd_step([p], state)
    np.testing.assert_allclose(state.buffers[p.name], [1.9])
    np.testing.assert_allclose(p.data, [-2.9], rtol=1e-6)


def test_zero_gradient_is_fixed_point():
    p = _param([0.3, -1.7], [0.0, 0.0])
    before = p.data.tobytes()
    sgd_step([p], _state())
    assert p.data.tobytes() == before


def test_weight_decay_coupled_and_norm_flag():
    conv = _param([2.0], [0.0], name="stem.conv.weight", group="backbone")
    bn = _param([2.0], [0.0], name="stem.bn.weight", group="backbone")
    sgd_step([conv, bn], OptimizerState(0.0, 0.5, {"backbone": 0.1, "head": 1.0}, decay_norm=False))
    assert conv.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert bn.data[0] == 2.0
    bn2 = _param([2.0], [0.0], name="stem.bn.weight", group="backbone")
    sgd_step([bn2], OptimizerState(0.0, 0.5, {"backbone": 0.1, "head": 1.0}, decay_norm=True))
    assert bn2.data[0] == pytest.approx(1.9)


def test_group_learning_rates():
    a = _param([1.0], [1.0], name="stage1.x.weight", group="backbone")
    b = _param([1.0], [1.0], name="mrfa1.x.weight", group="head")
    sgd_step([a, b], OptimizerState(0.0, 0.0, {"backbone": 0.01, "head": 0.1}))
    assert a.data[0] == pytest.approx(0.99) and b.data[0] == pytest.approx(0.9)


def test_missing_gradient():
    p = Parameter(np.zeros(2, np.float32), name="w")
    p.grad = None
    with pytest.raises(ContractError, match="'w'"):
        sgd_step([p], _state())


# ---------------------------------------------------------------- schedule

def test_lr_examples():
    s = Schedule()
    assert s.milestones == REFERENCE_MILESTONES and s.total_epochs == 450
    assert lr_at(0, s, 0.1) == 0.1
    assert lr_at(149, s, 0.1) == 0.1
    assert lr_at(150, s, 0.1) == pytest.approx(0.05)
    assert lr_at(360, s, 0.01) == pytest.approx(3.90625e-5)
    with pytest.raises(ContractError):
        lr_at(450, s, 0.1)
    with pytest.raises(ContractError):
        lr_at(-1, s, 0.1)


@given(total=st.integers(1, 600), data=st.data())
def test_lr_non_increasing_and_piecewise_constant(total, data):
    s = Schedule.compressed(total)
    assert all(b > a for a, b in zip(s.milestones, s.milestones[1:]))
    e = data.draw(st.integers(0, total - 2)) if total > 1 else 0
    if total > 1:
        assert lr_at(e + 1, s, 1.0) <= lr_at(e, s, 1.0)
        if e + 1 not in s.milestones:
            assert lr_at(e + 1, s, 1.0) == lr_at(e, s, 1.0)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        Schedule((5, 5), 0.5, 10)
    with pytest.raises(ConfigError):
        Schedule((5,), 1.5, 10)
    assert Schedule.compressed(40).milestones == (13, 16, 19, 21, 24, 27, 29, 32)


# ---------------------------------------------------------------- config

def test_config_file_and_overrides():
    values = parse_lines("# comment\nloss.lambda1 = 2  # trailing\n\nnet.attention=off\n")
    values.update(parse_overrides(["loss.lambda1=3", "sched.milestones=2,4"]))
    cfg = build_config(values, seed=7)
    assert cfg.weights.lambda1 == 3.0 and not cfg.net.attention_enabled
    assert cfg.schedule.milestones == (2, 4) and cfg.seed == 7


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="valid keys"):
        parse_overrides(["net.attn=1"])
    with pytest.raises(ConfigError):
        parse_lines("just text")
    with pytest.raises(ConfigError):
        build_config({"net.attention": "maybe"})
    with pytest.raises(ConfigError):
        build_config({"net.camera_loss_site": "elsewhere"})


def test_reference_defaults():
    cfg = build_config({"net.scale": "paper"})
    assert (cfg.weights.lambda1, cfg.weights.lambda2, cfg.weights.lambda3) == (5, 5, 1)
    assert (cfg.triplet.P, cfg.triplet.K, cfg.camera.epsilon) == (24, 4, 0.1)
    assert (cfg.optim.momentum, cfg.optim.weight_decay) == (0.9, 0.0005)
    assert (cfg.optim.lr_backbone, cfg.optim.lr_head) == (0.01, 0.1)
    assert cfg.schedule.milestones == REFERENCE_MILESTONES and cfg.schedule.total_epochs == 450
    assert (cfg.hda.sigma, cfg.hda.clip, cfg.hda.apply_prob) == (0.05, 0.15, 0.4)
    assert cfg.net.input_height == 384 and cfg.augment.height == 384
    text = describe_keys()
    assert all(k in text for k in KEYS)


# ---------------------------------------------------------------- training runs

def _config(tmp_path, **extra):
    values = {"net.num_identities": "6", "data.num_cameras": "3", "data.P": "3", "data.K": "2",
              "sched.epochs": "4", "sched.steps_per_epoch": "2", "train.checkpoint_every": "2",
              "train.out_dir": str(tmp_path)}
    values.update(extra)
    return build_config(values, seed=11)


def test_identical_runs_give_identical_logs(tmp_path, tiny_dataset):
    _, images = tiny_dataset
    logs = []
    for name in ("a", "b"):
        t = Trainer(_config(tmp_path / name), images)
        t.run(2)
        logs.append((tmp_path / name / "train_log.csv").read_text())
    assert logs[0] == logs[1]
    lines = logs[0].splitlines()
    assert lines[0] == ",".join(LOG_HEADER) and len(lines) == 5


def test_resume_reproduces_trajectory(tmp_path, tiny_dataset):
    _, images = tiny_dataset
    full = Trainer(_config(tmp_path / "full"), images)
    full.run(4)
    part = Trainer(_config(tmp_path / "part"), images)
    part.run(2)
    resumed = Trainer(_config(tmp_path / "part"), images)
    assert resumed.resume(part.checkpoint_path(2)) == 2
    resumed.run(4)
    assert (tmp_path / "full" / "train_log.csv").read_text() == (tmp_path / "part" / "train_log.csv").read_text()
    for (n, a), (_, b) in zip(full.network.named_parameters(), resumed.network.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_checkpoint_round_trip_and_corruption(tmp_path, tiny_dataset):
    _, images = tiny_dataset
    t = Trainer(_config(tmp_path), images)
    t.run(1, write_files=False)
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, t.network, t.state, 1)
    fresh = Trainer(_config(tmp_path), images)
    before = {k: v.copy() for k, v in fresh.network.state_dict().items()}
    raw = bytearray(path.read_bytes())
    raw[1] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    from vmrfanet.errors import FormatError
    with pytest.raises(FormatError):
        load_checkpoint(bad, fresh.network, fresh.state)
    for k, v in fresh.network.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    assert load_checkpoint(path, fresh.network, fresh.state) == 1
    for k, v in t.network.state_dict().items():
        assert fresh.network.state_dict()[k].tobytes() == v.tobytes()
    assert set(fresh.state.buffers) == set(t.state.buffers)


def test_zero_weights_no_camera_is_pure_id(tmp_path, tiny_dataset):
    _, images = tiny_dataset
    cfg = _config(tmp_path, **{"loss.lambda1": "0", "loss.lambda2": "0", "loss.lambda3": "0",
                               "net.camera_loss_site": "none"})
    t = Trainer(cfg, images)
    t.run(1, write_files=False)
    for _, _, values, combined in t.history:
        assert values["L_camera"] == 0.0
        assert combined == pytest.approx(values["L_ID"], rel=1e-6)


def test_divergence_keeps_last_good_checkpoint(tmp_path, tiny_dataset):
    _, images = tiny_dataset
    t = Trainer(_config(tmp_path), images)
    t.run(2)
    good = (tmp_path / "last.ckpt").read_bytes()
    for p in t.network.parameters():
        if p.name.startswith("id_classifiers.0"):
            p.data[...] = np.nan
    with pytest.raises(TrainingDivergenceError):
        t.run(4)
    assert (tmp_path / "last.ckpt").read_bytes() == good


def test_identity_count_must_match(tmp_path, tiny_dataset):
    _, images = tiny_dataset
    with pytest.raises(ContractError):
        Trainer(_config(tmp_path, **{"net.num_identities": "5"}), images)
