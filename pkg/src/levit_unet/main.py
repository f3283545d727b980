"""
Command-line entry point: train, eval, predict, bench and ablate.

    python -m src.levit_unet.main train --config configs/synthetic_128s.yaml --out runs/demo
"""

import argparse
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from .checkpoint import load_checkpoint
from .config import RunConfig, default_config_path, load_run_config
from .data import SLICE_NAME, default_workers, read_raw_tensor, write_raw_tensor
from .errors import InputError, LevitUNetError
from .metrics import evaluate_cases
from .model import ModelConfig, build_model, predict_labels
from .profiler import format_table, profile_model
from .training import BEST_CHECKPOINT, format_ablation, prepare_manifest, run_ablation, train

logger = logging.getLogger(__name__)

COMMANDS = ("train", "eval", "predict", "bench", "ablate")


def setup_logging(log_file: Path) -> None:
    """DEBUG to `log_file`, INFO to the console."""
    log_file.parent.mkdir(parents=True, exist_ok=True)
    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    file_handler = logging.FileHandler(log_file, mode="w")
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(
        logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s")
    )
    root_logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(logging.Formatter("%(levelname)s - %(message)s"))
    root_logger.addHandler(console_handler)


class CliParser(argparse.ArgumentParser):
    """Reports usage errors as InputError instead of printing usage and exiting."""

    def error(self, message: str):
        raise InputError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="levit_unet", description="LeViT-UNet segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=default_config_path(), help="YAML run configuration (env CONFIG_PATH)")
        p.add_argument("--variant", choices=("128s", "192", "384"))
        p.add_argument("--num-skips", type=int, dest="num_skips")
        p.add_argument("--conv-only", action="store_true", dest="conv_only")
        p.add_argument("--seed", type=int)
        p.add_argument("--hd-mode", choices=("max", "p95"), dest="hd_mode")
        p.add_argument("--hd-points", choices=("all", "surface"), dest="hd_points")
        p.add_argument("--out", help="run directory (train/ablate), output prefix (eval/bench) or directory (predict)")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue training from")
            p.add_argument("--epochs", type=int)
        if name in ("eval", "predict"):
            p.add_argument("--checkpoint", help="model checkpoint (.lvtu)")
        if name == "predict":
            p.add_argument("--input", nargs="+", default=[], help="*_img.lvtr files or directories holding them")
        if name == "ablate":
            p.add_argument("--epochs", type=int)
    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    epochs_key = "ablate.epochs" if args.command == "ablate" else "train.epochs"
    return {
        "model.variant": args.variant,
        "model.num_skips": args.num_skips,
        "model.conv_only": True if args.conv_only else None,
        "train.seed": args.seed,
        "eval.hd_mode": args.hd_mode,
        "eval.hd_points": args.hd_points,
        epochs_key: getattr(args, "epochs", None),
    }


def _run_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    return Path(args.out) if args.out else Path(config.train.checkpoint_dir)


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    run_dir = _run_dir(args, config)
    result = train(config, run_dir, resume=Path(args.resume) if args.resume else None)
    logger.info(f"Training finished: best eval DSC {result.best_dsc:.4f}, checkpoints in {run_dir}")
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    checkpoint = args.checkpoint or config.eval.checkpoint or str(Path(config.train.checkpoint_dir) / BEST_CHECKPOINT)
    if not Path(checkpoint).is_file():
        raise InputError(f"checkpoint {checkpoint} does not exist")
    model, _ = load_checkpoint(checkpoint)
    if model.config.num_classes != config.model.num_classes:
        config.model.num_classes = model.config.num_classes
    manifest = prepare_manifest(config, Path(config.train.checkpoint_dir))
    report = evaluate_cases(
        model, manifest, split=config.eval.split, hd_mode=config.eval.hd_mode, hd_points=config.eval.hd_points
    )
    print(report.to_table(), end="")
    report.write(args.out or config.eval.out)
    return 0


def _collect_inputs(inputs: Sequence[str]) -> List[Path]:
    if not inputs:
        raise InputError("predict needs at least one --input file or directory")
    paths: List[Path] = []
    for raw in inputs:
        p = Path(raw)
        if p.is_dir():
            paths.extend(sorted(p.glob("*_img.lvtr")))
        elif p.is_file():
            paths.append(p)
        else:
            raise InputError(f"input {p} does not exist")
    if not paths:
        raise InputError(f"no *_img.lvtr files found in {list(inputs)}")
    return paths


def cmd_predict(args: argparse.Namespace, config: RunConfig) -> int:
    if not args.checkpoint:
        raise InputError("predict needs --checkpoint")
    if not args.out:
        raise InputError("predict needs --out <directory>")
    inputs = _collect_inputs(args.input)
    model, _ = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        image = read_raw_tensor(path)
        if image.dtype != np.float32 or image.ndim != 2:
            raise InputError(f"{path}: expected a 2-D float32 image, got {image.dtype} {image.shape}")
        labels = predict_labels(model, np.clip(image, 0.0, 1.0)[None])[0]
        match = SLICE_NAME.match(path.name)
        stem = f"{match.group('case')}_{match.group('index')}" if match else path.stem
        target = out_dir / f"{stem}_pred.lvtr"
        write_raw_tensor(target, labels.astype(np.uint8))
        logger.info(f"Predicted {path} -> {target}")
    return 0


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    b = config.bench
    threads = default_workers() if os.getenv("LEVIT_UNET_THREADS") else None
    reports = []
    for conv_only in (False, True):
        for variant in b.variants:
            model_config = ModelConfig(
                variant=variant,
                num_classes=config.model.num_classes,
                in_channels=config.model.in_channels,
                conv_only=conv_only,
                img_size=b.input_size,
            )
            model = build_model(model_config, seed=config.train.seed)
            name = f"LeViT-UNet-{variant}{' (conv-only)' if conv_only else ''}"
            reports.append(
                profile_model(
                    model,
                    name,
                    fps=b.fps,
                    multi_thread=b.multi_thread,
                    batch=b.batch,
                    warmup_iters=b.warmup_iters,
                    measure_iters=b.measure_iters,
                    threads=threads,
                )
            )
    table = format_table(reports)
    print(table, end="")
    prefix = Path(args.out or b.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_name(prefix.name + ".txt").write_text(table, encoding="utf-8")
    prefix.with_name(prefix.name + ".records").write_text(
        "\n".join(r.to_record() for r in reports) + "\n", encoding="utf-8"
    )
    return 0


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    run_dir = _run_dir(args, config)
    rows = run_ablation(config, run_dir)
    table = format_ablation(rows)
    print(table, end="")
    prefix = run_dir / config.ablate.out
    prefix.with_name(prefix.name + ".txt").write_text(table, encoding="utf-8")
    prefix.with_name(prefix.name + ".records").write_text(
        "\n".join(r.to_record() for r in rows) + "\n", encoding="utf-8"
    )
    return 0


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def _error_record(error: BaseException) -> str:
    message = str(error).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
    return f'error={type(error).__name__} message="{message}"'


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except InputError as e:
        print(_error_record(e), file=sys.stderr)
        return e.exit_code

    log_env = os.getenv("LEVIT_UNET_LOG")
    if log_env:
        log_file = Path(log_env)
    elif args.out and args.command in ("train", "ablate"):
        log_file = Path(args.out) / "levit_unet.log"
    else:
        log_file = Path("levit_unet.log")
    setup_logging(log_file)
    logger.info("=" * 80)
    logger.info(f"levit_unet {args.command} started; log file: {log_file}")
    logger.info("=" * 80)

    try:
        config = load_run_config(args.config, config_overrides(args))
        logger.debug(f"Effective config: {config.to_dict()}")
        return HANDLERS[args.command](args, config)
    except LevitUNetError as e:
        logger.error(f"{args.command} failed: {e}")
        print(_error_record(e), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.critical(f"Unexpected failure in {args.command}: {e}\n{traceback.format_exc()}")
        print(_error_record(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
