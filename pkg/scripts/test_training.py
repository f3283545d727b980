"""Training steps, data preparation, the epoch loop and the skip ablation."""

import math

import numpy as np
import pytest

from conftest import PROJECT_ROOT, tiny_model_config
from src.levit_unet.checkpoint import load_checkpoint, read_checkpoint
from src.levit_unet.config import load_run_config
from src.levit_unet.errors import ConfigurationError, TrainingDivergedError
from src.levit_unet.metrics import evaluate_cases
from src.levit_unet.model import build_model
from src.levit_unet.optim import Adam
from src.levit_unet.synthetic import generate_synthetic_dataset
from src.levit_unet.training import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    TRAIN_LOG,
    AblationRow,
    foreground_dsc,
    format_ablation,
    prepare_manifest,
    run_ablation,
    train,
    train_step,
)


def _small_run(tmp_path, **sections):
    overrides = {
        "model.img_size": 32,
        "model.num_classes": 3,
        "train.batch_size": 2,
        "train.epochs": 1,
        "train.augment": False,
        "train.checkpoint_dir": str(tmp_path / "ckpt"),
        "data.synthetic.n_cases": 2,
        "data.synthetic.slices_per_case": 2,
        "data.synthetic.test_cases": 1,
        "data.synthetic.size": 32,
    }
    overrides.update(sections)
    return load_run_config(None, overrides)


def test_foreground_dsc_ignores_background():
    gt = np.array([[[0, 1, 2, 2]]])
    assert foreground_dsc(gt, gt, 3) == 1.0
    assert foreground_dsc(np.zeros_like(gt), gt, 3) == 0.0
    assert foreground_dsc(np.zeros_like(gt), np.zeros_like(gt), 3) == 1.0


def test_train_steps_reduce_loss_on_a_fixed_batch():
    model = build_model(tiny_model_config(), seed=0)
    optimizer = Adam(model.named_parameters(), lr=1e-2, weight_decay=0.0)
    rng = np.random.default_rng(0)
    labels = np.zeros((2, 32, 32), dtype=np.int64)
    labels[:, 8:24, 8:24] = 1
    labels[:, 12:20, 12:20] = 2
    images = (labels / 2.0 + rng.normal(0, 0.05, size=labels.shape)).astype(np.float32)[:, None]
    first, predicted = train_step(model, optimizer, images, labels)
    assert predicted.shape == (2, 32, 32)
    for _ in range(15):
        last, _ = train_step(model, optimizer, images, labels)
    assert last < first
    assert optimizer.state.step == 16


def test_overfitting_one_sample_decreases_loss_every_step():
    model = build_model(tiny_model_config(), seed=0)
    optimizer = Adam(model.named_parameters(), lr=1e-3, weight_decay=0.0)
    rng = np.random.default_rng(1)
    labels = np.zeros((1, 32, 32), dtype=np.int64)
    labels[0, 4:14, 6:20] = 1
    labels[0, 18:28, 10:26] = 2
    images = (labels / 2.0 + rng.normal(0, 0.05, size=labels.shape)).astype(np.float32)[:, None]
    losses = [train_step(model, optimizer, images, labels)[0] for _ in range(50)]
    assert all(loss >= 0.0 for loss in losses)
    assert all(later <= earlier for earlier, later in zip(losses, losses[1:])), losses
    assert losses[-1] < losses[0]


def test_non_finite_loss_aborts_training():
    model = build_model(tiny_model_config(), seed=0)
    optimizer = Adam(model.named_parameters(), lr=1e-3)
    images = np.full((2, 1, 32, 32), np.nan, dtype=np.float32)
    before = model.state_dict()
    with pytest.raises(TrainingDivergedError, match="step 1"):
        train_step(model, optimizer, images, np.zeros((2, 32, 32), dtype=np.int64))
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before if k.startswith("param/"))


def test_prepare_manifest_generates_synthetic_data(tmp_path):
    config = _small_run(tmp_path)
    manifest = prepare_manifest(config, tmp_path / "run")
    assert manifest.path == tmp_path / "run" / "data" / "manifest.tsv"
    assert list(manifest.cases("test")) == ["case0002"]


def test_prepare_manifest_with_default_classes(tmp_path):
    config = load_run_config(
        None, {"data.synthetic.n_cases": 3, "data.synthetic.slices_per_case": 4, "data.synthetic.test_cases": 1}
    )
    assert config.model.num_classes == 9
    manifest = prepare_manifest(config, tmp_path / "run")
    assert manifest.num_classes == 9
    for record in manifest.load_split("train"):
        assert set(np.unique(record.label)) == set(range(9))


def test_prepare_manifest_on_the_default_config(tmp_path):
    manifest = prepare_manifest(load_run_config(None), tmp_path / "run")
    assert manifest.num_classes == 9
    assert len(manifest.cases("train")) == 20 and len(manifest.cases("test")) == 4


def test_prepare_manifest_checks_class_count(tmp_path):
    generated = generate_synthetic_dataset(tmp_path / "d", n_cases=1, slices_per_case=1, size=32, num_classes=4)
    config = load_run_config(None, {"data.manifest": str(generated.path), "model.num_classes": 3})
    with pytest.raises(ConfigurationError, match="K=4"):
        prepare_manifest(config, tmp_path / "run")


def test_ablation_table_format():
    rows = [AblationRow(0, False, 1_500_000, 0.25), AblationRow(4, True, 2_000_000, 0.5)]
    lines = format_ablation(rows).splitlines()
    assert lines[0] == "num_skips\tconv_only\tparams(M)\ttest_dsc"
    assert lines[2] == "4\ttrue\t2.00\t0.5000"
    assert rows[0].to_record() == "num_skips=0 conv_only=false params=1500000 test_dsc=0.25"


@pytest.mark.slow
def test_train_writes_checkpoints_log_and_resumes(tmp_path):
    run_dir = tmp_path / "run"
    config = _small_run(tmp_path)
    result = train(config, run_dir)
    assert (run_dir / LAST_CHECKPOINT).is_file() and (run_dir / BEST_CHECKPOINT).is_file()
    assert (run_dir / "effective_config.yaml").is_file()
    log = (run_dir / TRAIN_LOG).read_text().splitlines()
    assert log[0].split("\t") == ["epoch", "loss", "train_dsc", "eval_dsc", "seconds"]
    assert len(log) == 2
    assert 0.0 <= result.best_dsc <= 1.0
    assert read_checkpoint(run_dir / LAST_CHECKPOINT).extra["epoch"] == "1"

    resumed = train(_small_run(tmp_path, **{"train.epochs": 2}), run_dir, resume=run_dir / LAST_CHECKPOINT)
    assert [s.epoch for s in resumed.history] == [2]
    ckpt = read_checkpoint(run_dir / LAST_CHECKPOINT)
    assert ckpt.extra["epoch"] == "2"
    assert ckpt.optimizer.step == 2 * 2
    assert len((run_dir / TRAIN_LOG).read_text().splitlines()) == 3


@pytest.mark.slow
def test_zero_epochs_saves_initial_model(tmp_path):
    run_dir = tmp_path / "run"
    result = train(_small_run(tmp_path, **{"train.epochs": 0}), run_dir)
    model, ckpt = load_checkpoint(result.best_checkpoint)
    assert ckpt.extra["epoch"] == "0"
    assert result.history == []


@pytest.mark.slow
def test_resume_refuses_other_architecture(tmp_path):
    run_dir = tmp_path / "run"
    train(_small_run(tmp_path, **{"train.epochs": 0}), run_dir)
    with pytest.raises(ConfigurationError, match="differs"):
        train(_small_run(tmp_path, **{"model.num_skips": 2}), tmp_path / "other", resume=run_dir / LAST_CHECKPOINT)


@pytest.mark.slow
def test_skip_ablation_on_synthetic_data(tmp_path):
    config = _small_run(
        tmp_path,
        **{
            "train.lr": 1e-3,
            "ablate.epochs": 4,
            "data.synthetic.n_cases": 4,
            "data.synthetic.slices_per_case": 3,
            "data.synthetic.size": 64,
            "model.img_size": 64,
        },
    )
    rows = run_ablation(config, tmp_path / "ablation")
    assert [(r.num_skips, r.conv_only) for r in rows] == [(n, c) for c in (False, True) for n in range(5)]
    assert all(not math.isnan(r.test_dsc) for r in rows)
    by_cell = {(r.num_skips, r.conv_only): r for r in rows}
    assert by_cell[(4, False)].params > by_cell[(4, True)].params
    assert by_cell[(4, False)].test_dsc >= by_cell[(0, False)].test_dsc


@pytest.mark.slow
def test_resumed_run_continues_the_uninterrupted_loss_curve(tmp_path):
    straight = train(_small_run(tmp_path, **{"train.epochs": 2}), tmp_path / "straight")
    split_dir = tmp_path / "split"
    first = train(_small_run(tmp_path, **{"train.epochs": 1}), split_dir)
    resumed = train(_small_run(tmp_path, **{"train.epochs": 2}), split_dir, resume=split_dir / LAST_CHECKPOINT)
    assert first.history[0].loss == straight.history[0].loss
    assert resumed.history[0].loss == pytest.approx(straight.history[1].loss, rel=1e-6)
    logged = [line.split("\t") for line in (split_dir / TRAIN_LOG).read_text().splitlines()[1:]]
    assert [int(row[0]) for row in logged] == [1, 2]
    assert float(logged[0][1]) == straight.history[0].loss
    assert float(logged[1][1]) == pytest.approx(straight.history[1].loss, rel=1e-6)


@pytest.mark.slow
def test_synthetic_acceptance_run_reaches_target_dice(tmp_path):
    config = load_run_config(
        PROJECT_ROOT / "configs" / "synthetic_acceptance.yaml",
        {"train.checkpoint_dir": str(tmp_path / "run"), "data.synthetic.out_dir": str(tmp_path / "data")},
    )
    result = train(config, tmp_path / "run")
    assert len(result.history) <= 30
    model, _ = load_checkpoint(result.best_checkpoint)
    report = evaluate_cases(model, result.manifest, split="test", hd_mode=None)
    assert len(report.cases) == 4
    assert report.mean_dsc >= 0.90
