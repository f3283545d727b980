"""
Efficiency profiling: parameter counts, multiply-accumulate estimates and
throughput. One MAC is reported as one FLOP.
"""

import logging
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .functional import recording_macs
from .layers import Module
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


def count_params(model: Module, depth: int = 2) -> Tuple[int, Dict[str, int]]:
    """Learnable scalars in total and grouped by the first `depth` name components."""
    by_module: Dict[str, int] = {}
    for name, p in model.named_parameters():
        group = ".".join(name.split(".")[:depth])
        by_module[group] = by_module.get(group, 0) + p.size
    return sum(by_module.values()), by_module


def _input_shape(model: Module, input_shape: Optional[Sequence[int]]) -> Tuple[int, ...]:
    if input_shape is not None:
        return tuple(input_shape)
    cfg = model.config
    return (1, cfg.in_channels, cfg.img_size, cfg.img_size)


def trace_macs(model: Module, input_shape: Optional[Sequence[int]] = None) -> Dict[str, int]:
    """Per-layer MACs for one image, from an eval forward on a zero-batch input."""
    _, c, h, w = _input_shape(model, input_shape)
    was_training = model.training
    model.eval()
    try:
        with no_grad(), recording_macs() as recorder:
            model(Tensor(np.zeros((0, c, h, w), dtype=np.float32)))
    finally:
        model.train(was_training)
    return recorder.by_layer()


def estimate_macs(model: Module, input_shape: Optional[Sequence[int]] = None) -> int:
    return sum(trace_macs(model, input_shape).values())


def measure_fps(
    model: Module,
    input_size: Optional[int] = None,
    batch: int = 1,
    warmup_iters: int = 2,
    measure_iters: int = 5,
    threads: Optional[int] = 1,
    seed: int = 0,
) -> float:
    """Median images/second over `measure_iters` eval forwards after `warmup_iters`.

    threads=1 pins BLAS to one thread; None leaves the library default.
    """
    cfg = model.config
    size = input_size or cfg.img_size
    x = Tensor(np.random.default_rng(seed).random((batch, cfg.in_channels, size, size), dtype=np.float32))
    was_training = model.training
    model.eval()
    rates: List[float] = []
    try:
        with threadpool_limits(limits=threads), no_grad():
            for _ in range(warmup_iters):
                model(x)
            for _ in range(measure_iters):
                start = time.perf_counter()
                model(x)
                rates.append(batch / (time.perf_counter() - start))
    finally:
        model.train(was_training)
    fps = float(np.median(rates))
    logger.debug(f"measure_fps size={size} batch={batch} threads={threads}: {fps:.2f} img/s")
    return fps


def hardware_note() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} numpy-{np.__version__}"


@dataclass
class ProfileReport:
    name: str
    params_total: int
    macs_total: int
    input_size: int
    params_by_module: Dict[str, int] = field(default_factory=dict)
    macs_by_layer: Dict[str, int] = field(default_factory=dict)
    fps: Optional[float] = None
    fps_multi: Optional[float] = None
    batch: int = 1
    warmup_iters: int = 0
    measure_iters: int = 0
    hardware: str = ""

    @property
    def params_m(self) -> float:
        return self.params_total / 1e6

    @property
    def gflops(self) -> float:
        return self.macs_total / 1e9

    def to_record(self) -> str:
        fps = "nan" if self.fps is None else f"{self.fps:.3f}"
        fps_multi = "nan" if self.fps_multi is None else f"{self.fps_multi:.3f}"
        return (
            f"model={self.name} params={self.params_total} macs={self.macs_total} input={self.input_size} "
            f"fps_1t={fps} fps_mt={fps_multi} batch={self.batch} warmup={self.warmup_iters} "
            f"iters={self.measure_iters} hardware=\"{self.hardware}\""
        )


def profile_model(
    model: Module,
    name: str,
    input_size: Optional[int] = None,
    fps: bool = True,
    multi_thread: bool = False,
    batch: int = 1,
    warmup_iters: int = 2,
    measure_iters: int = 5,
    threads: Optional[int] = None,
) -> ProfileReport:
    size = input_size or model.config.img_size
    total, by_module = count_params(model)
    by_layer = trace_macs(model, (1, model.config.in_channels, size, size))
    report = ProfileReport(
        name=name,
        params_total=total,
        macs_total=sum(by_layer.values()),
        input_size=size,
        params_by_module=by_module,
        macs_by_layer=by_layer,
        batch=batch,
        warmup_iters=warmup_iters if fps else 0,
        measure_iters=measure_iters if fps else 0,
        hardware=hardware_note(),
    )
    if fps:
        report.fps = measure_fps(model, size, batch, warmup_iters, measure_iters, threads=1)
        if multi_thread:
            report.fps_multi = measure_fps(model, size, batch, warmup_iters, measure_iters, threads=threads)
    logger.info(f"Profiled {name}: {report.params_m:.2f} M params, {report.gflops:.2f} GFLOPs")
    return report


def format_table(reports: Sequence[ProfileReport]) -> str:
    lines = ["model\tparams(M)\tFLOPs(G)\tFPS(1t)\tFPS(mt)"]
    for r in reports:
        fps = "-" if r.fps is None else f"{r.fps:.2f}"
        fps_multi = "-" if r.fps_multi is None else f"{r.fps_multi:.2f}"
        lines.append(f"{r.name}\t{r.params_m:.2f}\t{r.gflops:.2f}\t{fps}\t{fps_multi}")
    return "\n".join(lines) + "\n"
