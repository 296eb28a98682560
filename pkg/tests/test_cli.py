import hashlib
import json

import numpy as np
import pytest

from evhar import cli
from evhar.event_codec import EncoderConfig, EventStream, accumulate_events, resize_pad, uniform_downsample
from evhar.formats import read_clip_dir, write_clip_dir, write_evs1


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["datagen", "--out", str(root), "--per-class", "7", "--res", "32", "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "train"
    before = digest(small_data)
    code = cli.main(["train", "--data", str(small_data), "--out", str(out), "--epochs", "2", "--batch", "8"])
    assert code == 0
    assert digest(small_data) == before
    return out


def random_stream(seed, n=500):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, 1_000_000, n))
    return EventStream(40, 30, t, rng.integers(0, 40, n), rng.integers(0, 30, n), rng.choice([-1, 1], n))


def test_encode_writes_requested_frames(tmp_path, capsys):
    write_evs1(tmp_path / "s.evs1", random_stream(0))
    assert cli.main(["encode", "--input", str(tmp_path / "s.evs1"), "--output", str(tmp_path / "out"), "--frames", "10"]) == 0
    files = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert files == [f"frame_{i:04d}.pgm" for i in range(10)] + ["meta.txt"]
    assert "density" in capsys.readouterr().out
    manifest = cli.read_manifest(tmp_path / "out.run.json")
    assert manifest["subcommand"] == "encode" and manifest["status"] == "success"


def test_encode_empty_stream_warns_and_writes_zero_frames(tmp_path, capsys):
    write_evs1(tmp_path / "e.evs1", EventStream(16, 16))
    assert cli.main(["encode", "--input", str(tmp_path / "e.evs1"), "--output", str(tmp_path / "o")]) == 0
    frames, _ = read_clip_dir(tmp_path / "o")
    assert frames.shape == (10, 128, 128) and not frames.any()
    assert "warning" in capsys.readouterr().err


def test_encode_five_frames_is_floor_downsampling(tmp_path):
    stream = random_stream(1)
    write_evs1(tmp_path / "s.evs1", stream)
    for t in (5, 10):
        args = ["encode", "--input", str(tmp_path / "s.evs1"), "--output", str(tmp_path / f"f{t}"),
                "--frames", str(t), "--res", "30x40"]
        assert cli.main(args) == 0
    five, _ = read_clip_dir(tmp_path / "f5")
    acc = accumulate_events(stream, EncoderConfig())
    expect = np.stack([resize_pad(f, (30, 40)) for f in uniform_downsample(acc, 5)])
    assert np.array_equal(five, np.round(expect * 255).astype(np.uint8))


def test_encode_video_directory(tmp_path):
    frames = np.zeros((6, 20, 20), dtype=np.uint8)
    for i in range(6):
        frames[i, 5:10, 2 + 2 * i : 7 + 2 * i] = 200
    write_clip_dir(tmp_path / "video", frames, 30)
    assert cli.main(["encode", "--input", str(tmp_path / "video"), "--output", str(tmp_path / "o"),
                     "--frames", "4", "--res", "20"]) == 0
    clip, _ = read_clip_dir(tmp_path / "o")
    assert clip.shape == (4, 20, 20) and clip.any()


def test_encode_bad_input_is_runtime_error(tmp_path):
    (tmp_path / "bad.evs1").write_bytes(b"garbage")
    assert cli.main(["encode", "--input", str(tmp_path / "bad.evs1"), "--output", str(tmp_path / "o")]) == 1
    assert cli.read_manifest(tmp_path / "o.run.json")["status"] == "failed"


def test_datagen_identical_trees_and_manifest(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["datagen", "--out", str(tmp_path / name), "--per-class", "2", "--seed", "7", "--res", "32"]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    m = cli.read_manifest(tmp_path / "a.run.json")
    assert m["seed"] == 7 and m["config"]["synth"]["seed"] == 7 and m["status"] == "success"


def test_usage_errors_exit_two(tmp_path):
    assert cli.main(["datagen", "--out", str(tmp_path / "x"), "--per-class", "0"]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["train"]) == 2
    assert cli.main(["encode", "--input", "x", "--output", "y", "--res", "abc"]) == 2


def test_train_outputs_and_manifest(trained, capsys):
    for name in ("best.ckpt", "training_log.csv", "confusion.csv", "run_manifest.json"):
        assert (trained / name).is_file()
    m = cli.read_manifest(trained / "run_manifest.json")
    assert m["status"] == "success" and m["finished"] is not None
    assert m["config"]["train"]["batch_size"] == 8
    assert m["results"]["parameter_count"] == 1_178_502


def test_train_defaults_follow_published_regime():
    args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    assert (args.batch, args.lr, args.wd, args.gamma, args.epochs, args.patience) == (32, 0.0009, 1e-4, 2.0, 1000, 100)
    assert args.channel_mult == 1.0 and args.dropout == 0.5 and not args.attention


def test_eval_reproduces_recorded_accuracy(trained, small_data, tmp_path, capsys):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(small_data), "--out", str(out)]) == 0
    recorded = cli.read_manifest(trained / "run_manifest.json")["results"]["test_accuracy"]
    assert cli.read_manifest(out / "run_manifest.json")["results"]["accuracy"] == recorded
    assert (out / "confusion.csv").read_text() == (trained / "confusion.csv").read_text()


def test_identical_runs_give_identical_artifacts(trained, small_data, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["train", "--data", str(small_data), "--out", str(out), "--epochs", "2", "--batch", "8"]) == 0
    for name in ("best.ckpt", "training_log.csv", "confusion.csv"):
        assert (out / name).read_bytes() == (trained / name).read_bytes()


def test_infer_on_zero_clip(trained, tmp_path, capsys):
    write_clip_dir(tmp_path / "zero", np.zeros((10, 32, 32), dtype=np.uint8), 10)
    assert cli.main(["infer", "--checkpoint", str(trained / "best.ckpt"), "--sequence", str(tmp_path / "zero"),
                     "--out", str(tmp_path / "inf")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    probs = [float(line.split("\t")[1]) for line in lines[:-1]]
    assert len(probs) == 6 and abs(sum(probs) - 1) < 1e-5
    assert lines[-1].split("\t")[1] in {"contract", "expand", "translate-down", "translate-left",
                                         "translate-right", "translate-up"}


def test_checkpoint_errors(trained, small_data, tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "bad.ckpt"), "--sequence", str(small_data)]) == 1
    assert cli.main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tmp_path / "nowhere")]) == 1
    other = tmp_path / "other"
    for cls in ("p", "q"):
        write_clip_dir(other / cls / "0", np.zeros((10, 32, 32), dtype=np.uint8), 10)
    assert cli.main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(other)]) == 2


def test_ablate_grid_file(small_data, tmp_path):
    grid = tmp_path / "grid.txt"
    grid.write_text("# two variants\nhalf: channel-mult=0.5\nshort: frames=5\n")
    out = tmp_path / "abl"
    code = cli.main(["ablate", "--data", str(small_data), "--grid", str(grid), "--out", str(out),
                     "--epochs", "1", "--batch", "8"])
    assert code == 0
    rows = (out / "summary.csv").read_text().splitlines()
    assert rows[0] == "config,f1,accuracy,best_val_loss,minutes,status"
    assert [r.split(",")[0] for r in rows[1:]] == ["baseline", "half", "short"]
    assert all(r.endswith(",ok") for r in rows[1:])
    _, cfg, _ = __import__("evhar.model", fromlist=["x"]).load_checkpoint(out / "short" / "best.ckpt")
    assert cfg.clip_length == 5


def test_ablate_records_failed_rows(small_data, tmp_path):
    grid = tmp_path / "grid.txt"
    grid.write_text("tiny: channel-mult=0.5\nbroken: frames=5 channel-mult=-1\n")
    code = cli.main(["ablate", "--data", str(small_data), "--grid", str(grid), "--out", str(tmp_path / "a"),
                     "--epochs", "1", "--batch", "8"])
    assert code == 1
    rows = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[-1].split(",")[0] == "broken" and "failed" in rows[-1]
    assert json.loads((tmp_path / "a" / "run_manifest.json").read_text())["status"] == "failed"


def test_parse_grid_errors():
    with pytest.raises(Exception):
        cli.parse_grid("x: depth=3\n")
    assert cli.parse_grid("a: frames=5\n\n# c\nb: channel-mult=2\n") == [("a", {"frames": 5}), ("b", {"channel-mult": 2.0})]
