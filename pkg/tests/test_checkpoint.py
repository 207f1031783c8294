import json
import struct

import numpy as np
import pytest

from semvlp import tensor as T
from semvlp.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from semvlp.encoder import MODES, ObjectInput, SharedParams, TextInput, encode
from semvlp.finetune import ensure_heads
from semvlp.optim import Adam, linear_decay_lr

PROBE_TEXT = TextInput((1, 7, 12, 9, 2))


def probe_objects(fd):
    rng = np.random.default_rng(11)
    return ObjectInput(rng.normal(size=(3, fd)), [[0, 0, 10, 10], [20, 20, 50, 60], [5, 60, 30, 90]],
                       (100, 100), [0, 1, 2])


@pytest.fixture
def trained(world_params, world_config):
    ensure_heads(world_params, "retrieval")
    opt = Adam(lr=1e-3, total_steps=10)
    for mode in MODES:
        world_params.zero_grad()
        out = encode(PROBE_TEXT, probe_objects(world_config.object_feature_dim), world_params, mode)
        T.backward(T.tsum(T.mul(out.pooled, out.pooled)))
        opt.step(world_params)
    return world_params, opt


def test_roundtrip_bitwise_probe(tmp_path, trained, world_config):
    p, opt = trained
    path = save_checkpoint(tmp_path / "a.ckpt", p, opt, {"step": 2})
    q, opt2, meta = load_checkpoint(path)
    assert meta == {"step": 2}
    assert q.names() == p.names()
    for n in p.names():
        assert np.array_equal(p[n].data, q[n].data)
    for mode in MODES:
        a = encode(PROBE_TEXT, probe_objects(world_config.object_feature_dim), p, mode).pooled.data
        b = encode(PROBE_TEXT, probe_objects(world_config.object_feature_dim), q, mode).pooled.data
        assert a.tobytes() == b.tobytes()
    assert opt2.t == opt.t and opt2.lr == opt.lr
    for n in opt.m:
        assert np.array_equal(opt.m[n], opt2.m[n]) and np.array_equal(opt.v[n], opt2.v[n])


def test_header_manifest_layout(tmp_path, trained):
    p, _ = trained
    path = save_checkpoint(tmp_path / "b.ckpt", p)
    header = read_header(path)
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    payload = raw[8 + n:]
    offset = 0
    for entry in header["manifest"]:
        assert entry["offset"] == offset
        arr = np.frombuffer(payload[offset:offset + entry["nbytes"]], dtype="<f8").reshape(entry["shape"])
        assert np.array_equal(arr, p[entry["name"]].data)
        offset += entry["nbytes"]
    assert offset == len(payload)
    assert header["config"] == p.config.to_dict()


def test_resume_continues_identically(tmp_path, world_config):
    def one_step(p, opt):
        p.zero_grad()
        out = encode(PROBE_TEXT, probe_objects(world_config.object_feature_dim), p, MODES[1])
        T.backward(T.tsum(out.pooled))
        opt.step(p)

    p = SharedParams.initialize(world_config, 2)
    opt = Adam(lr=1e-3, total_steps=5)
    one_step(p, opt)
    q, opt_q, _ = load_checkpoint(save_checkpoint(tmp_path / "c.ckpt", p, opt))
    one_step(p, opt)
    one_step(q, opt_q)
    for n in p.names():
        assert np.array_equal(p[n].data, q[n].data)


def test_bad_files_raise(tmp_path, trained):
    p, _ = trained
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"\x01\x02")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)
    path = save_checkpoint(tmp_path / "d.ckpt", p)
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(cut)
    blob = json.dumps({"magic": "other"}).encode()
    wrong = tmp_path / "wrong.ckpt"
    wrong.write_bytes(struct.pack("<Q", len(blob)) + blob)
    with pytest.raises(CheckpointError):
        read_header(wrong)


def test_linear_decay_schedule():
    assert linear_decay_lr(1e-4, 0, 100) == 1e-4
    assert linear_decay_lr(1e-4, 50, 100) == pytest.approx(5e-5)
    assert linear_decay_lr(1e-4, 100, 100) == 0.0
    assert linear_decay_lr(1e-3, 4, 100, warmup_steps=10) == pytest.approx(5e-4)


def test_adam_clips_global_norm(world_config):
    p = SharedParams.initialize(world_config, 0)
    before = p.state()
    p.zero_grad()
    p["embed.img"].grad[...] = 1e6
    Adam(lr=0.1, max_grad_norm=1.0).step(p)
    delta = np.abs(p["embed.img"].data - before["embed.img"]).max()
    assert delta == pytest.approx(0.1, rel=1e-3)   # first Adam step moves each coordinate by about lr
