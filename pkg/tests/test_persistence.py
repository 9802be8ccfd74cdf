import hashlib
import io
import struct

import numpy as np
import pytest

from ssdpose import checkpoint as ckpt_io
from ssdpose.config import ConfigError, RunConfig, parse_overrides
from ssdpose.datagen import Dataset, generate_dataset
from ssdpose.inference import Detection, format_detections, parse_detections
from ssdpose.anchors import BoxGeom
from ssdpose.model import NonFiniteError, build
from ssdpose.training import batch_indices, lr_at, parse_log, train

SMALL = {"count": 24, "batch_size": 4, "steps": 6, "checkpoint_every": 3, "channels": [8, 8, 16, 16],
         "extra_channels": [16]}


@pytest.fixture(scope="module")
def small_data():
    cfg = RunConfig().updated(SMALL)
    imgs, objs = generate_dataset(cfg.scene_spec(), cfg.count)
    return cfg, Dataset(None, [f"i{k}" for k in range(len(imgs))], imgs, objs)


# --- config ------------------------------------------------------------------

def test_defaults_documented_values():
    cfg = RunConfig()
    assert (cfg.alpha1, cfg.alpha2, cfg.neg_pos_ratio) == (1.0, 1.5, 3.0)
    assert (cfg.momentum, cfg.weight_decay) == (0.9, 5e-4)
    assert (cfg.score_thresh, cfg.nms_iou, cfg.top_k) == (0.05, 0.45, 200)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="alpah2"):
        RunConfig().updated({"alpah2": 2})


def test_override_coercion_and_validation():
    cfg = RunConfig().updated(parse_overrides(["lr=0.01", "n_bins=24", "force_match=false", "crop_aspect=1,1"]))
    assert cfg.lr == 0.01 and cfg.n_bins == 24 and cfg.force_match is False and cfg.crop_aspect == [1.0, 1.0]
    with pytest.raises(ConfigError):
        RunConfig().updated({"pose_sharing": "both"})
    with pytest.raises(ConfigError):
        RunConfig().updated({"n_bins": "eight"})
    with pytest.raises(ConfigError):
        parse_overrides(["lr"])


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig().updated({"lr": 0.02, "channels": [8, 8, 8, 8]})
    p = tmp_path / "c.yaml"
    p.write_text(cfg.dump())
    assert RunConfig.from_file(p) == cfg
    p.write_text("- not a mapping\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)


# --- checkpoint --------------------------------------------------------------

def _net(cfg, seed=0):
    return build(cfg.network_spec(), cfg.head_config(), cfg.layer_specs(), seed)


def test_checkpoint_reproduces_logits(tmp_path, small_data):
    cfg, data = small_data
    net = _net(cfg, seed=4)
    x = data.as_float()[:2]
    ref = net.forward(x)
    path = tmp_path / "m.ckpt"
    vel = {k: np.full(v.shape, 0.5, np.float32) for k, v in net.state_dict().items()}
    ckpt_io.save(ckpt_io.Checkpoint.from_detector(net, 7, vel, cfg.to_dict()), path)
    ck = ckpt_io.load(path)
    assert ck.step == 7 and ck.n_bins == cfg.n_bins and ck.pose_sharing == "share" and ck.config == cfg.to_dict()
    again = ck.detector().forward(x)
    for a, b in ((ref.cls, again.cls), (ref.loc, again.loc), (ref.pose, again.pose)):
        assert np.max(np.abs(a.data - b.data)) <= 1e-6
    assert all(np.array_equal(vel[k], ck.velocity[k]) for k in vel)
    hdr = ckpt_io.peek_header(path)
    assert hdr["n_bins"] == cfg.n_bins and hdr["step"] == 7


def test_checkpoint_layout_and_integrity(tmp_path, small_data):
    cfg, _ = small_data
    path = tmp_path / "m.ckpt"
    ckpt_io.save(ckpt_io.Checkpoint.from_detector(_net(cfg)), path)
    raw = bytearray(path.read_bytes())
    assert raw[:8] == b"SSDPOSE\0" and raw[8] == ckpt_io.VERSION
    assert hashlib.sha256(raw[:-32]).digest() == bytes(raw[-32:])
    hlen = struct.unpack_from("<I", raw, 9)[0]
    assert raw[13:13 + hlen].startswith(b"{")

    bad = tmp_path / "bad.ckpt"
    flipped = bytearray(raw)
    flipped[-40] ^= 0xFF
    bad.write_bytes(bytes(flipped))
    with pytest.raises(ckpt_io.CheckpointError, match="checksum"):
        ckpt_io.load(bad)

    newer = bytearray(raw)
    newer[8] = ckpt_io.VERSION + 1
    body = bytes(newer[:-32])
    bad.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(ckpt_io.CheckpointError, match="version"):
        ckpt_io.load(bad)

    bad.write_bytes(b"not a checkpoint at all, definitely not" * 2)
    with pytest.raises(ckpt_io.CheckpointError, match="magic"):
        ckpt_io.load(bad)


def test_save_is_atomic(tmp_path, small_data):
    cfg, _ = small_data
    path = tmp_path / "m.ckpt"
    ckpt_io.save(ckpt_io.Checkpoint.from_detector(_net(cfg)), path)
    assert not list(tmp_path.glob("*.tmp"))


# --- detections file ---------------------------------------------------------

def test_detections_round_trip():
    rng = np.random.default_rng(0)
    dets = {}
    for i in range(5):
        ds = []
        for _ in range(int(rng.integers(0, 4))):
            x0, y0 = rng.uniform(0, 0.5, 2)
            ds.append(Detection(int(rng.integers(3)), float(rng.uniform()),
                                BoxGeom.from_corners(x0, y0, x0 + 0.3, y0 + 0.2), int(rng.integers(8)),
                                float(rng.uniform()), f"images/{i:06d}.png"))
        dets[f"images/{i:06d}.png"] = ds
    text = format_detections(dets, 8)
    back, n = parse_detections(text)
    assert n == 8
    assert {k: v for k, v in dets.items() if v}.keys() == back.keys()
    for k, v in back.items():
        for a, b in zip(dets[k], v):
            assert (a.class_id, a.score, a.pose_bin, a.pose_conf, a.image_id) == \
                (b.class_id, b.score, b.pose_bin, b.pose_conf, b.image_id)
            assert a.box.corners == pytest.approx(b.box.corners, abs=1e-15)
    assert format_detections(back, 8) == format_detections(parse_detections(format_detections(back, 8))[0], 8)
    with pytest.raises(ValueError):
        parse_detections("a 1 2 3\n")


# --- training ----------------------------------------------------------------

def test_batch_indices_cover_each_epoch():
    idx = np.concatenate([batch_indices(s, 4, 10, 0) for s in range(5)])
    assert sorted(idx[:10].tolist()) == list(range(10)) and sorted(idx[10:20].tolist()) == list(range(10))


def test_lr_schedule():
    cfg = RunConfig().updated({"lr": 0.1, "steps": 100, "warmup_steps": 10})
    assert lr_at(0, cfg) == pytest.approx(0.01)
    assert lr_at(50, cfg) == 0.1
    assert lr_at(75, cfg) == pytest.approx(0.01)


def test_log_records_and_determinism(tmp_path, small_data):
    cfg, data = small_data
    logs = []
    for k in range(2):
        buf = io.StringIO()
        train(cfg, data, log_file=buf)
        logs.append(buf.getvalue())
    assert logs[0] == logs[1]
    p = tmp_path / "log.txt"
    p.write_text(logs[0])
    recs = parse_log(p)
    assert len(recs) == cfg.steps
    assert [r["step"] for r in recs] == list(range(1, cfg.steps + 1))
    assert {"l_cls", "l_loc", "l_pose", "l_total", "n_matched"} <= recs[0].keys()


def test_resume_matches_uninterrupted(tmp_path, small_data):
    cfg, data = small_data
    full = train(cfg, data)
    ck = tmp_path / "part.ckpt"
    part = train(cfg, data, out_checkpoint=ck, stop_at=3)
    assert part.step == 3 and ckpt_io.load(ck).step == 3
    rest = train(cfg, data, resume=ck)
    assert [h["l_total"] for h in rest.history] == [h["l_total"] for h in full.history[3:]]
    for k, v in full.net.state_dict().items():
        assert np.array_equal(v, rest.net.state_dict()[k])


def test_nan_aborts_and_keeps_last_checkpoint(tmp_path, small_data, monkeypatch):
    cfg, data = small_data
    ck = tmp_path / "m.ckpt"
    from ssdpose import training

    real = training.train_step

    def poisoned(net, *a, **kw):
        out = real(net, *a, **kw)
        if sum(1 for _ in calls) >= 3:
            net.params["head.0.loc.bias"].data[...] = np.nan
        calls.append(1)
        return out

    calls = []
    monkeypatch.setattr(training, "train_step", poisoned)
    buf = io.StringIO()
    with pytest.raises(NonFiniteError):
        train(cfg, data, out_checkpoint=ck, log_file=buf)
    assert "aborted" in buf.getvalue().splitlines()[-1]
    saved = ckpt_io.load(ck)
    assert saved.step == 3
    assert all(np.all(np.isfinite(v)) for v in saved.params.values())
