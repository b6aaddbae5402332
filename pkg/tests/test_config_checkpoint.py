import json
import struct

import numpy as np
import pytest
import torch

from attract_repulse.augment import make_two_view_batch
from attract_repulse.checkpoint import (FORMAT_VERSION, MAGIC, load_checkpoint, read_header,
                                        save_checkpoint)
from attract_repulse.config import (DataConfig, RunConfig, TrainConfig, load_config, save_config)
from attract_repulse.exceptions import CheckpointError, InvalidInputError
from attract_repulse.losses import LossConfig
from attract_repulse.model import ModelSpec
from attract_repulse.train import batch_rng, epoch_order, init_state, train_epoch, train_step


def tiny_config(seed=3, **data):
    return RunConfig(
        seed=seed,
        loss=LossConfig(eta=0.9),
        train=TrainConfig(warmup_epochs=1, total_epochs=4, batch_size=8),
        model=ModelSpec(num_classes=3, widths=(8, 8), blocks_per_stage=1, dropout=0.3, aux_stage=0),
        data=DataConfig(kind="synthetic", num_classes=3, n_per_class=8, image_size=8, **data),
    )


# config -------------------------------------------------------------------------

def test_json_round_trip(tmp_path):
    cfg = tiny_config()
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert back.model.widths == (8, 8)


def test_digest_tracks_content():
    assert tiny_config(seed=3).digest() == tiny_config(seed=3).digest()
    assert tiny_config(seed=3).digest() != tiny_config(seed=4).digest()


@pytest.mark.parametrize("where", [None, "loss", "augment.policy"])
def test_unknown_keys_rejected(where):
    d = tiny_config().to_dict()
    target = d
    for part in (where.split(".") if where else []):
        target = target[part]
    target["bogus"] = 1
    with pytest.raises(InvalidInputError, match="bogus"):
        RunConfig.from_dict(d)


def test_seed_is_mandatory():
    d = tiny_config().to_dict()
    del d["seed"]
    with pytest.raises(InvalidInputError):
        RunConfig.from_dict(d)
    with pytest.raises(InvalidInputError):
        RunConfig(seed="1")


def test_embedded_invariants_validated():
    d = tiny_config().to_dict()
    d["loss"]["delta"] = 2.0
    with pytest.raises(InvalidInputError):
        RunConfig.from_dict(d)
    with pytest.raises(InvalidInputError):
        RunConfig(seed=0, model=ModelSpec(num_classes=5))


# checkpoint -----------------------------------------------------------------------

def state_for(cfg, spe=3, dtype=torch.float64):
    return init_state(cfg.model, cfg.loss, cfg.augment, cfg.train.schedule(spe), cfg.train.optim,
                      cfg.seed, cfg.train.batch_size, dtype)


def data(n=24, seed=0):
    r = np.random.default_rng(seed)
    return r.normal(size=(n, 3, 8, 8)), r.integers(0, 3, n)


def step_once(state, x, y):
    """The step ``train_epoch`` would take next."""
    spe, bs = state.schedule.steps_per_epoch, state.batch_size
    order = epoch_order(state.seed, state.epoch, x.shape[0])
    b = state.step - state.epoch * spe
    idx = order[b * bs:(b + 1) * bs]
    batch = make_two_view_batch(x[idx], y[idx], batch_rng(state.seed, state.step), state.aug_cfg,
                                num_classes=3, epsilon=state.loss_cfg.epsilon_smooth)
    return train_step(state, batch)[0]


def params(state):
    return [t.clone() for t in state.model.state_dict().values()] + \
           [t.clone() for t in state.teacher.model.state_dict().values()]


def test_continuation_is_parameter_exact(tmp_path):
    cfg = tiny_config()
    x, y = data()
    a = state_for(cfg)
    for _ in range(4):
        a = step_once(a, x, y)
    path = save_checkpoint(a, tmp_path / "mid.ckpt", cfg)
    a = step_once(a, x, y)  # crosses into epoch 1 mid-way
    a = step_once(a, x, y)

    b = load_checkpoint(path).restore()
    assert b.step == 4
    b = step_once(b, x, y)
    b = step_once(b, x, y)
    for u, v in zip(params(a), params(b)):
        assert torch.equal(u, v)
    assert a.optimizer.state_dict()["state"].keys() == b.optimizer.state_dict()["state"].keys()


def test_resume_through_train_epoch(tmp_path):
    cfg = tiny_config()
    x, y = data()
    a = state_for(cfg)
    train_epoch(a, x, y)
    save_checkpoint(a, tmp_path / "e1.ckpt", cfg)
    train_epoch(a, x, y)
    b = load_checkpoint(tmp_path / "e1.ckpt").restore()
    train_epoch(b, x, y)
    for u, v in zip(params(a), params(b)):
        assert torch.equal(u, v)


def test_header_has_version_and_digest(tmp_path):
    cfg = tiny_config()
    path = save_checkpoint(state_for(cfg), tmp_path / "h.ckpt", cfg)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack_from("<I", raw, 8)[0] == FORMAT_VERSION
    h = read_header(path)
    assert h["format_version"] == FORMAT_VERSION
    assert h["config_digest"] == cfg.digest()
    assert RunConfig.from_dict(h["config"]) == cfg
    assert not (tmp_path / "h.ckpt.tmp").exists()


@pytest.mark.parametrize("keep", [4, 12, 40, -1])
def test_truncated_file_is_rejected(tmp_path, keep):
    cfg = tiny_config()
    path = save_checkpoint(state_for(cfg), tmp_path / "t.ckpt", cfg)
    raw = path.read_bytes()
    path.write_bytes(raw[:keep])
    with pytest.raises(CheckpointError, match="offset|truncated"):
        load_checkpoint(path)


def test_version_mismatch_and_corruption(tmp_path):
    cfg = tiny_config()
    path = save_checkpoint(state_for(cfg), tmp_path / "v.ckpt", cfg)
    raw = bytearray(path.read_bytes())
    bumped = bytes(raw[:8]) + struct.pack("<I", FORMAT_VERSION + 1) + bytes(raw[12:])
    (tmp_path / "v2.ckpt").write_bytes(bumped)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v2.ckpt")
    raw[-1] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "c.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.ckpt")


def test_failed_load_leaves_live_state_untouched(tmp_path):
    cfg = tiny_config()
    live = state_for(cfg)
    before = params(live)
    path = save_checkpoint(live, tmp_path / "x.ckpt", cfg)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(path).restore()
    assert all(torch.equal(u, v) for u, v in zip(before, params(live)))


def test_header_json_is_plain_text(tmp_path):
    cfg = tiny_config()
    path = save_checkpoint(state_for(cfg), tmp_path / "j.ckpt", cfg, extra={"note": "x"})
    raw = path.read_bytes()
    hlen = struct.unpack_from("<I", raw, 12)[0]
    assert json.loads(raw[16:16 + hlen])["extra"] == {"note": "x"}
