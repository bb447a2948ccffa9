import struct

import numpy as np
import pytest

from rnp.checkpoint import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    checkpoint_from,
    load_checkpoint,
    restore_model,
    restore_rng,
    save_checkpoint,
)
from rnp.model import RnpConfig, RnpModel, Subsequence, predict_one_step
from rnp.training import Adam

CFG = RnpConfig(hidden_size=5, latent_dim=3, encoder_layers=2, bidirectional=True)


def _forward(model):
    rng = np.random.default_rng(0)
    ctx = [Subsequence(0, rng.normal(size=(4, 1)), rng.normal(size=(4, 1)))]
    tgt = Subsequence(10, rng.normal(size=(6, 1)), rng.normal(size=(6, 1)))
    return predict_one_step(model, ctx, tgt, 25, np.random.default_rng(1))


@pytest.fixture
def saved(tmp_path):
    model = RnpModel.create(CFG, 4)
    opt = Adam(model.param_dict(), 1e-3)
    for p in model.parameters():
        p.grad[...] = 0.1
    opt.step()
    rng = np.random.default_rng(77)
    rng.standard_normal(5)
    path = tmp_path / "m.rnpc"
    save_checkpoint(path, checkpoint_from(model, opt, epoch=3, rng=rng, extra={"seed": 9}))
    return path, model, opt, rng


def test_round_trip_is_bitwise(saved):
    path, model, opt, rng = saved
    ck = load_checkpoint(path)
    again = restore_model(ck)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), again.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    a, b = _forward(model), _forward(again)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert ck.epoch == 3 and ck.adam_t == 1 and ck.extra == {"seed": 9}
    assert all(ck.adam_m[k].tobytes() == opt.m[k].tobytes() for k in opt.m)
    assert restore_rng(ck).standard_normal(3).tobytes() == rng.standard_normal(3).tobytes()
    assert ck.config == CFG


def test_bad_magic(saved):
    path = saved[0]
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_future_version(saved):
    path = saved[0]
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [6, 40, -9])
def test_truncated_file(saved, cut):
    path = saved[0]
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_trailing_bytes(saved):
    path = saved[0]
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_shape_mismatch_against_config(saved):
    ck = load_checkpoint(saved[0])
    ck.config = RnpConfig(hidden_size=6, latent_dim=3, encoder_layers=2, bidirectional=True)
    with pytest.raises(CheckpointShapeError):
        restore_model(ck)
    ck.config = RnpConfig(hidden_size=5, latent_dim=3)
    with pytest.raises(CheckpointShapeError):
        restore_model(ck)


def test_save_leaves_no_temp_file(saved):
    path = saved[0]
    assert [p.name for p in path.parent.iterdir()] == ["m.rnpc"]
