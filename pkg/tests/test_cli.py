import csv
import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfcorr import checkpoint
from sfcorr import config as cfgmod
from sfcorr import train as trainmod
from sfcorr.cli import main
from sfcorr.data import FrameDataset, make_videos
from sfcorr.data.loader import read_keypoints, write_video_dir
from sfcorr.data.netpbm import load_label, save_label
from sfcorr.engine import ops
from sfcorr.errors import ConfigError

TINY = """
[backbone]
channels = 8,8
strides = 2,2
kernels = 3,3
input_size = 16
[heads]
hidden = 16
out_dim = 8
global_hidden = 16
global_out_dim = 8
[loss]
queue_size = 16
[optimizer]
steps = 3
batch = 4
"""


def tiny(**overrides):
    cfg = cfgmod.parse(TINY)
    return cfgmod.apply_overrides(cfg, {tuple(k.split(".")): str(v) for k, v in overrides.items()})


@pytest.fixture(scope="module")
def videos():
    return make_videos(3, seed=1, frame_size=(16, 16), n_frames=4)


@pytest.fixture(scope="module")
def dataset(videos):
    return FrameDataset([v.frames for v in videos])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, videos):
    root = tmp_path_factory.mktemp("data")
    for i, v in enumerate(videos):
        write_video_dir(root / f"video{i:03d}", v.frames, v.masks, v.keypoints)
    (root / "tiny.ini").write_text(TINY)
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("fc")
    assert main(["train-fc", "--data", str(data_dir), "--out", str(out), "--config", str(data_dir / "tiny.ini")]) == 0
    return out


def state(pair):
    out = {f"online/{k}": v.data for k, v in pair.online.items()}
    out.update({f"target/{k}": v.data for k, v in pair.target.items()})
    out.update({f"online_buffer/{k}": v for k, v in pair.online_buffers.items()})
    out.update({f"target_buffer/{k}": v for k, v in pair.target_buffers.items()})
    return out


def assert_same_state(a, b, keys=None):
    keys = keys if keys is not None else a.keys()
    for k in keys:
        assert a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]), k


# config ------------------------------------------------------------------------------

@given(st.lists(st.integers(1, 128), min_size=1, max_size=5), st.floats(1e-6, 10, allow_nan=False),
       st.booleans(), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=100, deadline=None)
def test_config_round_trip(channels, tau, residual, seed):
    cfg = cfgmod.Config()
    cfg = cfg.replace(backbone=cfgmod.BackboneSection(channels=tuple(channels), residual=residual),
                      loss=cfgmod.LossSection(tau=tau), seeds=cfgmod.SeedsSection(init=seed, data=seed + 1))
    assert cfgmod.parse(cfgmod.serialize(cfg)) == cfg


def test_unknown_key_and_section_rejected():
    with pytest.raises(ConfigError, match="loss.rr"):
        cfgmod.parse("[loss]\nrr = 1\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        cfgmod.parse("[losses]\nr = 1\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError, match="loss.r"):
        cfgmod.parse("[loss]\nr = half\n")
    with pytest.raises(ConfigError, match="malformed"):
        cfgmod.parse("r = 1\n")


def test_partial_config_keeps_defaults():
    cfg = cfgmod.parse("[loss]\nr = 1.5  # wider\n")
    assert cfg.loss.r == 1.5 and cfg.loss.tau == cfgmod.Config().loss.tau


def test_architecture_hash_tracks_shapes_only():
    base = cfgmod.architecture_hash(tiny())
    assert cfgmod.architecture_hash(tiny(**{"optimizer.lr": 0.5, "loss.r": 2.0})) == base
    assert cfgmod.architecture_hash(tiny(**{"heads.out_dim": 9})) != base


# checkpoint --------------------------------------------------------------------------

@given(st.sampled_from(["<f4", "<f8", "<i8", "u1", "<i4"]),
       st.lists(st.integers(0, 4), min_size=0, max_size=3), st.integers(0, 2 ** 64 - 1))
@settings(max_examples=50, deadline=None)
def test_checkpoint_round_trip_bit_exact(dtype, shape, chash):
    arr = (np.random.default_rng(0).standard_normal(shape) * 50).astype(dtype)
    entries, h = checkpoint.decode(checkpoint.encode({"a": arr, "b/c": arr.ravel()}, chash))
    assert h == chash
    assert entries["a"].dtype == arr.dtype and entries["a"].tobytes() == arr.tobytes()
    assert entries["a"].shape == arr.shape


def test_checkpoint_detects_every_single_byte_flip():
    blob = bytearray(checkpoint.encode({"w": np.arange(6.0).reshape(2, 3)}, 7))
    for pos in range(len(blob)):
        bad = blob.copy()
        bad[pos] ^= 0x10
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.decode(bytes(bad))


def test_checkpoint_version_and_magic():
    body = checkpoint.encode({"w": np.zeros(2)}, 1)[:-4]
    newer = body[:4] + struct.pack("<H", checkpoint.VERSION + 1) + body[6:]
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.decode(newer + struct.pack("<I", zlib.crc32(newer)))
    other = b"XXXX" + body[4:]
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.decode(other + struct.pack("<I", zlib.crc32(other)))
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.decode(b"SFCK")


def test_checkpoint_unsupported_dtype():
    with pytest.raises(checkpoint.CheckpointError, match="dtype"):
        checkpoint.encode({"c": np.zeros(2, dtype=np.complex128)}, 0)


def test_checkpoint_save_is_atomic(tmp_path):
    path = checkpoint.save(tmp_path / "m.sfck", {"w": np.ones(3)}, 5)
    assert [p.name for p in tmp_path.iterdir()] == ["m.sfck"]
    entries, h = checkpoint.load(path)
    assert h == 5 and np.array_equal(entries["w"], np.ones(3))


def test_model_save_load_bit_exact(tmp_path, dataset):
    res = trainmod.train("joint", tiny(), dataset)
    trainmod.save_model(tmp_path / "m.sfck", res.pair, tiny(), "joint", steps=3)
    loaded = trainmod.load_model(tmp_path / "m.sfck")
    assert loaded.kind == "joint" and loaded.steps == 3 and loaded.config == tiny()
    assert_same_state(state(res.pair), state(loaded.pair))


# training ----------------------------------------------------------------------------

def test_zero_steps_saves_the_initialization(tmp_path, dataset):
    cfg = tiny(**{"optimizer.steps": 0})
    res = trainmod.train("fc", cfg, dataset, out_dir=tmp_path)
    assert len(res.losses) == 0
    assert_same_state(state(trainmod.load_model(tmp_path / "model.sfck").pair), state(trainmod.build_model(cfg, "fc")))
    assert trainmod.read_loss_log(tmp_path / "loss.csv") == []


def test_negative_steps_rejected(dataset):
    with pytest.raises(ConfigError):
        trainmod.train("fc", tiny(**{"optimizer.steps": -1}), dataset)


@pytest.mark.parametrize("kind", trainmod.KINDS)
def test_training_is_deterministic(kind, dataset):
    a, b = (trainmod.train(kind, tiny(), dataset) for _ in range(2))
    assert a.losses.tobytes() == b.losses.tobytes()
    assert_same_state(state(a.pair), state(b.pair))


def test_seed_changes_the_run(dataset):
    a = trainmod.train("fc", tiny(), dataset)
    b = trainmod.train("fc", tiny(**{"seeds.data": 1}), dataset)
    assert not np.array_equal(a.losses, b.losses)


def test_joint_with_zero_alpha_matches_fc(dataset):
    fc = trainmod.train("fc", tiny(), dataset)
    joint = trainmod.train("joint", tiny(**{"loss.alpha": 0.0}), dataset)
    assert fc.losses.tobytes() == joint.losses.tobytes()
    a, b = state(fc.pair), state(joint.pair)
    assert_same_state(a, b, keys=a.keys())


def test_training_changes_online_and_target(dataset):
    cfg = tiny()
    init, res = state(trainmod.build_model(cfg, "fc")), state(trainmod.train("fc", cfg, dataset).pair)
    assert not np.array_equal(init["online/backbone.0.conv"], res["online/backbone.0.conv"])
    assert not np.array_equal(init["target/backbone.0.conv"], res["target/backbone.0.conv"])


def test_loss_log_columns(trained):
    rows = trainmod.read_loss_log(trained / "loss.csv")
    assert len(rows) == 3 and tuple(rows[0]) == trainmod.LOG_COLUMNS
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    assert all(-1 <= float(r["loss"]) <= 1 and int(r["positives"]) > 0 for r in rows)
    assert cfgmod.load(trained / "config.ini") == tiny()


def test_semantic_queue_fills_and_first_loss_near_log_k(dataset):
    cfg = tiny(**{"loss.tau": 1.0, "optimizer.steps": 1})
    res = trainmod.train("semantic", cfg, dataset)
    # cosines lie in [-1, 1], so at tau = 1 the loss is within 2 of log(K + 1)
    assert abs(res.losses[0] - math.log(17)) <= 2
    assert res.queue.filled == 4
    res = trainmod.train("semantic", tiny(**{"optimizer.steps": 5}), dataset)
    assert res.queue.filled == 16


def test_grad_check_first_step_passes(dataset):
    res = trainmod.train("joint", tiny(**{"optimizer.steps": 1}), dataset, grad_check_first=True)
    assert len(res.losses) == 1


# command line ------------------------------------------------------------------------

def test_cli_train_is_bit_identical_across_runs(tmp_path, data_dir, trained):
    argv = ["train-fc", "--data", str(data_dir), "--out", str(tmp_path), "--config", str(data_dir / "tiny.ini")]
    assert main(argv) == 0
    assert (tmp_path / "model.sfck").read_bytes() == (trained / "model.sfck").read_bytes()
    assert (tmp_path / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()


def test_cli_flags_override_config(tmp_path, data_dir):
    assert main(["train-fc", "--data", str(data_dir), "--out", str(tmp_path), "--config", str(data_dir / "tiny.ini"),
                 "--optimizer.steps", "1", "--seed", "9"]) == 0
    cfg = cfgmod.load(tmp_path / "config.ini")
    assert cfg.optimizer.steps == 1 and cfg.seeds.init == 9 and cfg.seeds.data == 9


def test_cli_propagate_and_eval(tmp_path, data_dir, trained, capsys):
    video = data_dir / "video000"
    out = tmp_path / "pred"
    def argv(dest):
        return ["propagate", "--fine", str(trained / "model.sfck"), "--video", str(video), "--out", str(dest),
                "--propagation.radius", "2", "--propagation.top_k", "3", "--heatmap", "1,1"]
    assert main(argv(out)) == 0
    assert len(list((out / "labels").glob("*.pgm"))) == 4 and len(list((out / "heatmaps").glob("*.pgm"))) == 4
    first = load_label(out / "labels" / "frame00000.pgm")
    np.testing.assert_array_equal(first, load_label(video / "labels" / "frame00000.pgm"))
    again = tmp_path / "again"
    assert main(argv(again)) == 0
    for f in (out / "labels").glob("*.pgm"):
        assert f.read_bytes() == (again / "labels" / f.name).read_bytes()

    report = tmp_path / "report.csv"
    assert main(["eval", "--pred", str(out), "--gt", str(video), "--report", str(report)]) == 0
    rows = list(csv.reader(report.open()))
    assert rows[0] == ["frame", "J", "F", "JF"] and rows[-1][0] == "mean" and len(rows) == 6
    for r in rows[1:]:
        assert 0 <= float(r[1]) <= 1 and abs((float(r[1]) + float(r[2])) / 2 - float(r[3])) < 2e-6
    assert "J_m" in capsys.readouterr().out


def test_cli_eval_perfect_and_empty(tmp_path, data_dir):
    video = data_dir / "video001"
    report = tmp_path / "self.csv"
    assert main(["eval", "--pred", str(video), "--gt", str(video), "--report", str(report)]) == 0
    assert list(csv.reader(report.open()))[-1][1:] == ["1.000000"] * 3
    empty = tmp_path / "empty" / "labels"
    empty.mkdir(parents=True)
    for f in (video / "labels").glob("*.pgm"):
        save_label(empty / f.name, np.zeros_like(load_label(f)))
    assert main(["eval", "--pred", str(empty.parent), "--gt", str(video), "--report", str(report)]) == 0
    assert float(list(csv.reader(report.open()))[-1][1]) == 0.0


def test_cli_keypoint_mode(tmp_path, data_dir, trained):
    video = data_dir / "video000"
    out = tmp_path / "kp"
    assert main(["propagate", "--fine", str(trained / "model.sfck"), "--video", str(video), "--out", str(out),
                 "--mode", "kp", "--propagation.radius", "2"]) == 0
    pred = read_keypoints(out / "keypoints.txt")
    gt = read_keypoints(video / "keypoints.txt")
    assert pred.shape == gt.shape and np.array_equal(pred[0], gt[0])
    assert main(["eval", "--pred", str(out), "--gt", str(video), "--metric", "pck"]) == 0


def test_cli_synth_and_dump_heatmap(tmp_path, trained):
    assert main(["synth", "--out", str(tmp_path / "s"), "--videos", "1", "--frames", "2", "--size", "16"]) == 0
    assert len(list((tmp_path / "s" / "video000").glob("*.ppm"))) == 2
    assert main(["dump-heatmap", "--ckpt", str(trained / "model.sfck"), "--video", str(tmp_path / "s" / "video000"),
                 "--cell", "0,0", "--target-frame", "1", "--out", str(tmp_path / "h.pgm")]) == 0
    assert (tmp_path / "h.pgm").exists()


# exit codes --------------------------------------------------------------------------

def test_exit_code_config_error(tmp_path, data_dir, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[optimizer]\nstepz = 3\n")
    assert main(["train-fc", "--data", str(data_dir), "--out", str(tmp_path), "--config", str(bad)]) == 2
    assert "optimizer.stepz" in capsys.readouterr().err


def test_exit_code_data_error(tmp_path, trained):
    assert main(["train-fc", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 3
    corrupt = tmp_path / "c.sfck"
    blob = bytearray((trained / "model.sfck").read_bytes())
    blob[100] ^= 1
    corrupt.write_bytes(bytes(blob))
    assert main(["propagate", "--fine", str(corrupt), "--video", str(tmp_path), "--out", str(tmp_path / "p")]) == 3
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(tmp_path / "missing")]) == 3


def test_exit_code_numeric_error(monkeypatch, capsys):
    good = ops.Conv2d.backward
    monkeypatch.setattr(ops.Conv2d, "backward", staticmethod(lambda ctx, g: tuple(x * 1.01 for x in good(ctx, g))))
    assert main(["gradcheck", "--cases", "2"]) == 4
    assert "FAIL" in capsys.readouterr().out


def test_propagate_refuses_architecture_mismatch(tmp_path, data_dir, trained):
    other = tmp_path / "other.ini"
    other.write_text(TINY.replace("out_dim = 8\nglobal", "out_dim = 12\nglobal"))
    argv = ["propagate", "--fine", str(trained / "model.sfck"), "--video", str(data_dir / "video000"),
            "--out", str(tmp_path / "p"), "--config", str(other), "--propagation.radius", "2"]
    assert main(argv) == 2
    assert main(argv + ["--allow-mismatch"]) == 0
    assert main(argv[:-4] + ["--config", str(data_dir / "tiny.ini"), "--propagation.radius", "2"]) == 0


def test_propagate_needs_a_checkpoint(tmp_path, data_dir):
    assert main(["propagate", "--video", str(data_dir / "video000"), "--out", str(tmp_path)]) == 2
