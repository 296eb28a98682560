import numpy as np
import pytest

from evhar import model as M
from evhar.errors import ConfigError
from evhar.formats import write_clip_dir
from evhar.training.augment import augment, gaussian_blur, hflip, resolve_augment_classes, rotate_translate
from evhar.training.data import ClipDataset, load_dataset, split_indices
from evhar.training.optim import OptimizerConfig
from evhar.training.trainer import TrainConfig, Trainer, read_confusion

TINY = dict(channels=(2, 2, 4, 4, 4), clip_length=3, input_resolution=(32, 32), num_classes=3)


def toy_dataset(n_per_class=6, seed=0, log_access=False):
    """Three classes distinguished by which third of the frame is bright."""
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    for c in range(3):
        for _ in range(n_per_class):
            clip = rng.integers(0, 40, (3, 32, 32)).astype(np.uint8)
            clip[:, :, c * 10 : c * 10 + 10] += 200
            clips.append(clip)
            labels.append(c)
    return ClipDataset(np.stack(clips), labels, ["a", "b", "c"], log_access=log_access)


def small_train(**kw):
    base = dict(batch_size=4, max_epochs=3, patience=5, seed=1, workers=1)
    base.update(kw)
    return TrainConfig(**base)


class _NeverRng:
    def random(self):
        return 1.0

    def uniform(self, lo, hi):
        return (lo + hi) / 2


def test_augment_identity_for_other_classes_and_missed_coins():
    clip = np.random.default_rng(0).random((1, 4, 16, 16)).astype(np.float32)
    out = augment(clip, 0, frozenset({1}), np.random.default_rng(0))
    assert np.array_equal(out, clip) and out is not clip
    out = augment(clip, 1, frozenset({1}), _NeverRng())
    assert np.array_equal(out, clip)


def test_augment_is_frame_consistent_and_bounded():
    rng = np.random.default_rng(3)
    frame = rng.random((16, 16))
    clip = np.stack([frame] * 5)[None]
    for seed in range(20):
        out = augment(clip, 0, frozenset({0}), np.random.default_rng(seed))
        assert out.shape == clip.shape
        assert out.min() >= 0 and out.max() <= 1
        assert all(np.array_equal(out[0, 0], out[0, i]) for i in range(5))


def test_augment_primitives():
    clip = np.arange(2 * 3 * 4, dtype=np.float64).reshape(1, 2, 3, 4)
    assert np.array_equal(hflip(clip)[..., 0], clip[..., -1])
    np.testing.assert_allclose(rotate_translate(clip, 0.0), clip)
    shifted = rotate_translate(np.pad(np.ones((1, 1, 2, 2)), ((0, 0), (0, 0), (3, 3), (3, 3))), 0.0, (1.0, 0.0))
    assert shifted[0, 0, 4:6, 3:5].sum() == 4 and shifted[0, 0, 3].sum() == 0
    np.testing.assert_allclose(rotate_translate(np.ones((1, 1, 9, 9)), 90.0)[0, 0, 4], 1.0)
    blurred = gaussian_blur(np.pad(np.ones((1, 1, 1, 1)), ((0, 0), (0, 0), (4, 4), (4, 4))), 1.0)
    assert blurred[0, 0, 4, 4] < 1 and blurred[0, 0, 4, 5] > 0


def test_resolve_augment_classes():
    names = ["Cooking", "Drinking", "Eating", "Getting up", "Sitting down", "Washing up"]
    assert resolve_augment_classes(names) == {2, 5}
    assert resolve_augment_classes(["washing_up", "x"]) == {0}
    assert resolve_augment_classes(["a", "b"]) == frozenset()
    assert resolve_augment_classes(["a", "b"], ["B", 0]) == {0, 1}
    with pytest.raises(ValueError):
        resolve_augment_classes(["a"], ["zzz"])


def test_split_is_stratified_disjoint_and_seeded():
    labels = np.repeat(np.arange(6), 200)
    tr, va, te = split_indices(labels, seed=4)
    assert len(tr) == 840 and len(va) == 180 and len(te) == 180
    assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))
    assert np.bincount(labels[te]).tolist() == [30] * 6
    again = split_indices(labels, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip((tr, va, te), again))
    with pytest.raises(ConfigError):
        split_indices(np.repeat(np.arange(3), 2))
    with pytest.raises(ConfigError):
        split_indices(labels, (0.5, 0.5, 0.1))


def test_load_dataset_re_downsamples_with_floor_rule(tmp_path):
    frames = np.stack([np.full((8, 8), 10 * i, dtype=np.uint8) for i in range(10)])
    for cls in ("x", "y"):
        write_clip_dir(tmp_path / cls / "0", frames, 10)
    ds = load_dataset(tmp_path, frames=5)
    assert ds.clips.shape == (2, 5, 8, 8)
    assert ds.clips[0, :, 0, 0].tolist() == [0, 20, 40, 60, 80]
    assert load_dataset(tmp_path, frames=20).clips[0, :4, 0, 0].tolist() == [0, 0, 10, 10]
    assert load_dataset(tmp_path, resolution=(4, 4)).clips.shape == (2, 10, 4, 4)


def test_clip_dataset_batch_and_access_log():
    ds = toy_dataset(log_access=True)
    batch = ds.batch([0, 5], "val")
    assert batch.shape == (2, 1, 3, 32, 32) and batch.dtype == np.float32
    assert batch.max() <= 1.0
    assert ds.access_log == [("val", 0), ("val", 5)]


def test_patience_stops_frozen_model_at_epoch_two(tmp_path):
    ds = toy_dataset()
    cfg = M.ModelConfig(**TINY, bn_momentum=0.0)
    tc = small_train(max_epochs=50, patience=1, optimizer=OptimizerConfig(learning_rate=0.0))
    _, report = Trainer(ds, cfg, tc, tmp_path).fit()
    assert len(report.history) == 2 and report.stopped_early and report.best_epoch == 1
    assert (tmp_path / "training_log.csv").read_text().count("\n") == 3


def test_training_outputs_and_checkpoint(tmp_path):
    ds = toy_dataset()
    cfg = M.ModelConfig(**TINY)
    trainer = Trainer(ds, cfg, small_train(), tmp_path)
    best, report = trainer.fit()
    lines = (tmp_path / "training_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc,val_f1"
    assert len(lines) == 4
    cm = read_confusion(tmp_path / "confusion.csv")
    assert cm.shape == (3, 3) and cm.sum() == len(trainer.test_idx)
    params, cfg2, meta = M.load_checkpoint(tmp_path / "best.ckpt")
    assert cfg2 == cfg and meta["best_epoch"] == report.best_epoch
    assert meta["test_accuracy"] == report.test.accuracy
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(params.tensors(), best.tensors()))
    assert report.parameter_count == best.count()


def test_same_seed_gives_identical_logs(tmp_path):
    ds = toy_dataset()
    cfg = M.ModelConfig(**TINY)
    Trainer(ds, cfg, small_train(), tmp_path / "a").fit()
    Trainer(ds, cfg, small_train(), tmp_path / "b").fit()
    Trainer(ds, cfg, small_train(workers=3), tmp_path / "c").fit()
    a = (tmp_path / "a" / "training_log.csv").read_bytes()
    assert a == (tmp_path / "b" / "training_log.csv").read_bytes()
    assert a == (tmp_path / "c" / "training_log.csv").read_bytes()


def test_worker_count_independent_with_augmentation(tmp_path):
    ds = toy_dataset()
    cfg = M.ModelConfig(**TINY)
    logs = []
    for workers in (1, 2, 4):
        tc = small_train(max_epochs=2, workers=workers, augmentation_classes=("a", "c"))
        Trainer(ds, cfg, tc, tmp_path / str(workers)).fit()
        logs.append((tmp_path / str(workers) / "training_log.csv").read_bytes())
    assert logs[0] == logs[1] == logs[2]


def test_train_accuracy_tracks_the_training_batches():
    tc = small_train(optimizer=OptimizerConfig(learning_rate=0.02))
    trainer = Trainer(toy_dataset(), M.ModelConfig(**TINY), tc)
    assert np.isnan(trainer.train_accuracy)
    seen = []
    for epoch in range(1, 31):
        trainer.train_epoch(epoch)
        seen.append(trainer.train_accuracy)
        if seen[-1] == 1.0:
            break
    n = len(trainer.train_idx)
    assert all(round(a * n) == a * n for a in seen)
    assert seen[-1] == 1.0


def test_test_split_untouched_until_final_evaluation(tmp_path):
    ds = toy_dataset(log_access=True)
    trainer = Trainer(ds, M.ModelConfig(**TINY), small_train(), tmp_path)
    trainer.fit()
    phases = [p for p, _ in ds.access_log]
    first_test = phases.index("test")
    assert "test" not in phases[:first_test] and set(phases[first_test:]) == {"test"}
    test_set = set(trainer.test_idx.tolist())
    assert all(i not in test_set for p, i in ds.access_log if p != "test")
    assert {i for p, i in ds.access_log if p == "train"} == set(trainer.train_idx.tolist())


def test_configuration_errors():
    ds = toy_dataset()
    with pytest.raises(ConfigError):
        Trainer(ds, M.ModelConfig(**{**TINY, "num_classes": 4}), small_train())
    with pytest.raises(ConfigError):
        Trainer(ds, M.ModelConfig(**TINY), small_train(), split=(np.arange(5), np.array([], int), np.arange(5, 9)))
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(split=(0.5, 0.2, 0.2))
