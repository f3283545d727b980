"""
Training and evaluation runs: data preparation, the epoch loop with
best-by-DSC checkpointing and resume, and the skip/conv-only ablation grid.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .checkpoint import load_checkpoint, load_pretrained_encoder, save_checkpoint
from .config import RunConfig, SyntheticSection
from .data import CaseManifest, load_manifest, make_batches
from .errors import ConfigurationError, InputError, TrainingDivergedError
from .losses import combined_loss
from .metrics import MetricReport, evaluate_cases
from .model import LevitUNet, build_model
from .optim import Adam, AdamState
from .synthetic import generate_synthetic_dataset
from .tensor import Tensor

logger = logging.getLogger(__name__)

LAST_CHECKPOINT = "last.lvtu"
BEST_CHECKPOINT = "best.lvtu"
TRAIN_LOG = "train_log.tsv"


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_dsc: float
    eval_dsc: float
    seconds: float

    def log_line(self) -> str:
        return (
            f"epoch={self.epoch} loss={self.loss:.6f} train_dsc={self.train_dsc:.4f} "
            f"eval_dsc={self.eval_dsc:.4f} time={self.seconds:.1f}s"
        )


@dataclass
class TrainResult:
    run_dir: Path
    model: LevitUNet
    manifest: CaseManifest
    best_dsc: float
    history: List[EpochStats] = field(default_factory=list)

    @property
    def last_checkpoint(self) -> Path:
        return self.run_dir / LAST_CHECKPOINT

    @property
    def best_checkpoint(self) -> Path:
        return self.run_dir / BEST_CHECKPOINT


def prepare_manifest(config: RunConfig, run_dir: Path) -> CaseManifest:
    """Load the configured manifest, or generate the synthetic dataset."""
    if config.data.manifest:
        manifest = load_manifest(config.data.manifest)
    else:
        s = config.data.synthetic or SyntheticSection(size=config.model.img_size)
        out_dir = Path(s.out_dir) if s.out_dir else run_dir / "data"
        manifest = generate_synthetic_dataset(
            out_dir,
            n_cases=s.n_cases,
            slices_per_case=s.slices_per_case,
            size=s.size,
            num_classes=config.model.num_classes,
            seed=s.seed,
            test_cases=s.test_cases,
        )
    if manifest.num_classes != config.model.num_classes:
        raise ConfigurationError(
            f"manifest {manifest.path} has K={manifest.num_classes} but model.num_classes={config.model.num_classes}"
        )
    return manifest


def foreground_dsc(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean Dice over foreground classes on a batch of label maps (both-empty counts as 1)."""
    scores = []
    for c in range(1, num_classes):
        a, b = pred == c, gt == c
        total = int(a.sum()) + int(b.sum())
        scores.append(1.0 if total == 0 else 2.0 * int(np.logical_and(a, b).sum()) / total)
    return float(np.mean(scores))


def train_step(
    model: LevitUNet,
    optimizer: Adam,
    images: np.ndarray,
    labels: np.ndarray,
    ce_weight: float = 0.5,
) -> Tuple[float, np.ndarray]:
    """One forward/backward/update. Returns the loss and the batch's argmax labels."""
    model.train()
    optimizer.zero_grad()
    logits = model(Tensor(images))
    loss = combined_loss(logits, labels, ce_weight=ce_weight, dice_weight=1.0 - ce_weight)
    value = loss.item()
    if not math.isfinite(value):
        logger.error(f"Non-finite loss {value} at optimizer step {optimizer.state.step + 1}")
        raise TrainingDivergedError(f"loss became {value} at optimizer step {optimizer.state.step + 1}")
    predicted = np.argmax(logits.data, axis=1)
    loss.backward()
    optimizer.step()
    logger.debug(f"step={optimizer.state.step} loss={value:.6f}")
    return value, predicted


def evaluate_model(model: LevitUNet, manifest: CaseManifest, split: str = "test", hd_mode: Optional[str] = "p95") -> MetricReport:
    return evaluate_cases(model, manifest, split=split, hd_mode=hd_mode)


def train(config: RunConfig, run_dir: Path, resume: Optional[Path] = None) -> TrainResult:
    """Train per `config`, writing checkpoints and the epoch log into `run_dir`.

    last.lvtu is rewritten after every epoch and best.lvtu whenever the test
    DSC improves. A divergence aborts the run and leaves both untouched.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.dump(run_dir / "effective_config.yaml")
    model_config = config.model.to_model_config()
    manifest = prepare_manifest(config, run_dir)

    start_epoch = 0
    best_dsc = -1.0
    if resume is not None:
        model, ckpt = load_checkpoint(resume, expected_config=model_config)
        state = ckpt.optimizer or AdamState(lr=config.learning_rate, weight_decay=config.train.weight_decay)
        start_epoch = int(ckpt.extra.get("epoch", "0"))
        best_dsc = float(ckpt.extra.get("best_dsc", "-1"))
        logger.info(f"Resuming from {resume} after epoch {start_epoch} (best DSC {best_dsc:.4f})")
    else:
        model = build_model(model_config, seed=config.train.seed)
        if config.train.pretrained_encoder:
            load_pretrained_encoder(model, config.train.pretrained_encoder)
        state = AdamState(lr=config.learning_rate, weight_decay=config.train.weight_decay)
    optimizer = Adam(model.named_parameters(), state=state)

    train_records = manifest.load_split("train")
    if not train_records:
        raise InputError(f"{manifest.path}: the train split is empty")
    has_test = bool(manifest.cases("test"))
    logger.info(
        f"Training {len(train_records)} slices, lr={state.lr}, wd={state.weight_decay}, "
        f"batch={config.train.batch_size}, epochs={start_epoch}->{config.train.epochs}"
    )

    result = TrainResult(run_dir, model, manifest, best_dsc)
    if config.train.epochs == 0 or start_epoch >= config.train.epochs:
        extra = {"epoch": str(start_epoch), "best_dsc": repr(best_dsc)}
        save_checkpoint(model, run_dir / LAST_CHECKPOINT, optimizer.state, extra)
        if not (run_dir / BEST_CHECKPOINT).exists():
            save_checkpoint(model, run_dir / BEST_CHECKPOINT, optimizer.state, extra)
        logger.info("No epochs to run; wrote checkpoint of the current model")
        return result

    log_path = run_dir / TRAIN_LOG
    if not log_path.exists() or resume is None:
        log_path.write_text("epoch\tloss\ttrain_dsc\teval_dsc\tseconds\n", encoding="utf-8")

    k = model_config.num_classes
    for epoch in range(start_epoch, config.train.epochs):
        started = time.perf_counter()
        batches = make_batches(
            train_records,
            config.train.batch_size,
            model_config.img_size,
            shuffle_seed=config.train.seed,
            in_channels=model_config.in_channels,
            augment=config.train.augment,
            epoch=epoch,
        )
        losses, dscs = [], []
        for batch in batches:
            loss, predicted = train_step(model, optimizer, batch.images, batch.labels, config.train.ce_weight)
            losses.append(loss)
            dscs.append(foreground_dsc(predicted, batch.labels, k))

        split = "test" if has_test else "train"
        eval_dsc = evaluate_model(model, manifest, split=split, hd_mode=None).mean_dsc
        stats = EpochStats(epoch + 1, float(np.mean(losses)), float(np.mean(dscs)), eval_dsc, time.perf_counter() - started)
        result.history.append(stats)
        logger.info(stats.log_line())
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(f"{stats.epoch}\t{stats.loss!r}\t{stats.train_dsc!r}\t{stats.eval_dsc!r}\t{stats.seconds:.3f}\n")

        if eval_dsc > result.best_dsc:
            result.best_dsc = eval_dsc
            save_checkpoint(
                model, run_dir / BEST_CHECKPOINT, optimizer.state, {"epoch": str(epoch + 1), "best_dsc": repr(eval_dsc)}
            )
        save_checkpoint(
            model,
            run_dir / LAST_CHECKPOINT,
            optimizer.state,
            {"epoch": str(epoch + 1), "best_dsc": repr(result.best_dsc)},
        )
    return result


@dataclass
class AblationRow:
    num_skips: int
    conv_only: bool
    params: int
    test_dsc: float

    def to_record(self) -> str:
        return (
            f"num_skips={self.num_skips} conv_only={str(self.conv_only).lower()} "
            f"params={self.params} test_dsc={self.test_dsc!r}"
        )


def run_ablation(config: RunConfig, run_dir: Path) -> List[AblationRow]:
    """Train and score every (num_skips, conv_only) combination on the same data."""
    run_dir = Path(run_dir)
    rows = []
    for conv_only in config.ablate.conv_only:
        for num_skips in config.ablate.num_skips:
            cell = replace(
                config,
                model=replace(config.model, num_skips=num_skips, conv_only=conv_only),
                train=replace(
                    config.train,
                    epochs=config.ablate.epochs if config.ablate.epochs is not None else config.train.epochs,
                ),
            )
            if cell.data.synthetic is not None and cell.data.synthetic.out_dir is None:
                cell = replace(
                    cell, data=replace(cell.data, synthetic=replace(cell.data.synthetic, out_dir=str(run_dir / "data")))
                )
            name = f"N{num_skips}{'_convonly' if conv_only else ''}"
            logger.info(f"Ablation cell {name}")
            result = train(cell, run_dir / name)
            best, _ = load_checkpoint(result.best_checkpoint)
            has_test = bool(result.manifest.cases("test"))
            report = evaluate_model(best, result.manifest, split="test" if has_test else "train", hd_mode=None)
            params = sum(p.size for p in best.parameters())
            rows.append(AblationRow(num_skips, conv_only, params, report.mean_dsc))
    return rows


def format_ablation(rows: List[AblationRow]) -> str:
    lines = ["num_skips\tconv_only\tparams(M)\ttest_dsc"]
    for r in rows:
        lines.append(f"{r.num_skips}\t{str(r.conv_only).lower()}\t{r.params / 1e6:.2f}\t{r.test_dsc:.4f}")
    return "\n".join(lines) + "\n"
