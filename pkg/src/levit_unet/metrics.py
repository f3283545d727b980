"""
Evaluation metrics: per-class Dice and Hausdorff distance on slices or
stacked volumes, and per-case evaluation reports.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy import ndimage

from .data import CaseManifest, default_workers, load_entry
from .errors import ConfigurationError, InputError
from .model import LevitUNet, predict_labels

logger = logging.getLogger(__name__)

HD_MODES = ("max", "p95")
# "all": every voxel of each mask; "surface": boundary voxels only
HD_POINTS = ("all", "surface")

SlicePredictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class LabelMap:
    values: np.ndarray  # integer labels, [h, w] or [d, h, w]
    spacing: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.spacing) != self.values.ndim:
            raise ConfigurationError(f"spacing {self.spacing} does not match label dims {self.values.shape}")
        if min(self.spacing) <= 0:
            raise ConfigurationError(f"spacing must be positive, got {self.spacing}")


def _masks(pred, gt, class_id: int) -> Tuple[np.ndarray, np.ndarray]:
    p = pred.values if isinstance(pred, LabelMap) else np.asarray(pred)
    g = gt.values if isinstance(gt, LabelMap) else np.asarray(gt)
    if p.shape != g.shape:
        raise ConfigurationError(f"prediction shape {p.shape} differs from ground truth {g.shape}")
    return p == class_id, g == class_id


def dsc(pred, gt, class_id: int) -> float:
    """2|A∩B|/(|A|+|B|); 1 when both masks are empty."""
    a, b = _masks(pred, gt, class_id)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _resolve_spacing(pred, gt, spacing, ndim: int) -> Tuple[float, ...]:
    if spacing is None:
        maps = [m for m in (pred, gt) if isinstance(m, LabelMap)]
        if len(maps) == 2 and tuple(maps[0].spacing) != tuple(maps[1].spacing):
            raise ConfigurationError(f"spacing mismatch: {maps[0].spacing} vs {maps[1].spacing}")
        spacing = maps[0].spacing if maps else (1.0,) * ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim or min(spacing) <= 0:
        raise ConfigurationError(f"spacing {spacing} invalid for {ndim}-D labels")
    return spacing


def surface_voxels(mask: np.ndarray, connectivity: int = 1) -> np.ndarray:
    """Voxels of `mask` removed by one binary erosion."""
    structure = ndimage.generate_binary_structure(mask.ndim, connectivity)
    return mask ^ ndimage.binary_erosion(mask, structure=structure, iterations=1)


def directed_distances(a: np.ndarray, b: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Distance from every voxel of `a` to the nearest voxel of `b` (b nonempty)."""
    return ndimage.distance_transform_edt(~b, sampling=spacing)[a]


def hausdorff_with_flag(
    pred,
    gt,
    class_id: int,
    mode: str = "p95",
    spacing: Optional[Sequence[float]] = None,
    points: str = "all",
) -> Tuple[float, bool]:
    """Hausdorff distance and whether it is the one-empty sentinel (volume diagonal)."""
    if mode not in HD_MODES:
        raise ConfigurationError(f"unknown Hausdorff mode '{mode}', expected one of {HD_MODES}")
    if points not in HD_POINTS:
        raise ConfigurationError(f"unknown Hausdorff point set '{points}', expected one of {HD_POINTS}")
    a, b = _masks(pred, gt, class_id)
    spacing = _resolve_spacing(pred, gt, spacing, a.ndim)
    a_any, b_any = bool(a.any()), bool(b.any())
    if not a_any and not b_any:
        return 0.0, False
    if a_any != b_any:
        diagonal = math.sqrt(sum((n * s) ** 2 for n, s in zip(a.shape, spacing)))
        logger.warning(
            f"Hausdorff class {class_id}: one mask is empty, using volume diagonal {diagonal:.3f} mm"
        )
        return diagonal, True
    if points == "surface":
        a, b = surface_voxels(a), surface_voxels(b)
    d_ab = directed_distances(a, b, spacing)
    d_ba = directed_distances(b, a, spacing)
    if mode == "max":
        return float(max(d_ab.max(), d_ba.max())), False
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95)), False


def hausdorff(
    pred, gt, class_id: int, mode: str = "p95", spacing: Optional[Sequence[float]] = None, points: str = "all"
) -> float:
    """Symmetric Hausdorff distance in mm between the two class masks.

    mode "max" is the classic HD; "p95" the 95th percentile of the pooled
    directed distances. points "all" measures from every mask voxel,
    "surface" only between boundary voxels (the usual HD95 convention).
    Both empty → 0; exactly one empty → volume diagonal.
    """
    return hausdorff_with_flag(pred, gt, class_id, mode, spacing, points)[0]


def stack_slices(
    slices: Union[Mapping[int, np.ndarray], Iterable[Tuple[int, np.ndarray]]],
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    expected_count: Optional[int] = None,
) -> LabelMap:
    """Assemble (slice_index, [h, w] labels) pairs into a [d, h, w] volume ordered by index."""
    items = dict(slices.items() if isinstance(slices, Mapping) else slices)
    if not items:
        raise InputError("no slices to stack")
    depth = expected_count if expected_count is not None else max(items) + 1
    missing = sorted(set(range(depth)) - set(items))
    extra = sorted(set(items) - set(range(depth)))
    if missing or extra:
        raise InputError(f"slice indices must be 0..{depth - 1}: missing {missing}, unexpected {extra}")
    shapes = {np.asarray(v).shape for v in items.values()}
    if len(shapes) != 1:
        raise InputError(f"slices have differing shapes {sorted(shapes)}")
    volume = np.stack([np.asarray(items[i]) for i in range(depth)])
    return LabelMap(volume, tuple(float(s) for s in spacing))


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------
@dataclass
class ClassMetric:
    dsc: float
    hd: Optional[float]
    flagged: bool = False


@dataclass
class MetricReport:
    hd_mode: str
    num_classes: int
    cases: Dict[str, Dict[int, ClassMetric]] = field(default_factory=dict)
    hd_points: str = "all"

    @property
    def foreground(self) -> List[int]:
        return list(range(1, self.num_classes))

    @property
    def flagged(self) -> Set[Tuple[str, int]]:
        return {(case, c) for case, per in self.cases.items() for c, m in per.items() if m.flagged}

    def class_dsc(self, class_id: int) -> float:
        values = [per[class_id].dsc for per in self.cases.values()]
        return float(np.mean(values)) if values else float("nan")

    def class_hd(self, class_id: int) -> float:
        values = [
            per[class_id].hd for per in self.cases.values() if per[class_id].hd is not None and not per[class_id].flagged
        ]
        return float(np.mean(values)) if values else float("nan")

    @property
    def mean_dsc(self) -> float:
        """Mean over cases, then over foreground classes."""
        return float(np.mean([self.class_dsc(c) for c in self.foreground]))

    @property
    def mean_hd(self) -> float:
        values = [v for v in (self.class_hd(c) for c in self.foreground) if not math.isnan(v)]
        return float(np.mean(values)) if values else float("nan")

    def to_table(self) -> str:
        header = ["case"] + [f"dsc_{c}" for c in self.foreground] + [f"hd{self.hd_mode}_{c}" for c in self.foreground]
        rows = ["\t".join(header)]
        for case in sorted(self.cases):
            per = self.cases[case]
            cells = [case] + [f"{per[c].dsc:.4f}" for c in self.foreground]
            for c in self.foreground:
                m = per[c]
                cells.append("-" if m.hd is None else f"{m.hd:.3f}{'*' if m.flagged else ''}")
            rows.append("\t".join(cells))
        means = ["mean"] + [f"{self.class_dsc(c):.4f}" for c in self.foreground]
        means += [f"{self.class_hd(c):.3f}" for c in self.foreground]
        rows.append("\t".join(means))
        rows.append(
            f"mean_dsc={self.mean_dsc:.4f}\tmean_hd={self.mean_hd:.3f}\thd_mode={self.hd_mode}\thd_points={self.hd_points}"
        )
        if self.flagged:
            rows.append("* one-empty sentinel, excluded from HD means")
        return "\n".join(rows) + "\n"

    def to_records(self) -> List[str]:
        records = []
        for case in sorted(self.cases):
            for c, m in sorted(self.cases[case].items()):
                hd = "nan" if m.hd is None else repr(m.hd)
                records.append(
                    f"case={case} class={c} dsc={m.dsc!r} hd={hd} hd_mode={self.hd_mode} flagged={str(m.flagged).lower()}"
                )
        records.append(
            f"aggregate mean_dsc={self.mean_dsc!r} mean_hd={self.mean_hd!r} hd_mode={self.hd_mode} hd_points={self.hd_points}"
        )
        return records

    def write(self, prefix: Union[str, Path]) -> Tuple[Path, Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        table = prefix.with_name(prefix.name + ".txt")
        records = prefix.with_name(prefix.name + ".records")
        table.write_text(self.to_table(), encoding="utf-8")
        records.write_text("\n".join(self.to_records()) + "\n", encoding="utf-8")
        logger.info(f"Wrote metrics to {table} and {records}")
        return table, records


def case_metrics(
    pred: LabelMap, gt: LabelMap, num_classes: int, hd_mode: Optional[str], hd_points: str = "all"
) -> Dict[int, ClassMetric]:
    """Per-foreground-class metrics for one case; hd_mode None skips Hausdorff."""
    out = {}
    for c in range(1, num_classes):
        if hd_mode is None:
            out[c] = ClassMetric(dsc(pred, gt, c), None)
        else:
            hd, flagged = hausdorff_with_flag(pred, gt, c, hd_mode, points=hd_points)
            out[c] = ClassMetric(dsc(pred, gt, c), hd, flagged)
    return out


def _as_predictor(model: Union[LevitUNet, SlicePredictor], batch_size: int) -> SlicePredictor:
    if not isinstance(model, LevitUNet):
        return model
    model.eval()

    def predict(images: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [predict_labels(model, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        )

    return predict


def evaluate_cases(
    model: Union[LevitUNet, SlicePredictor],
    manifest: CaseManifest,
    split: str = "test",
    hd_mode: Optional[str] = "p95",
    workers: Optional[int] = None,
    batch_size: int = 8,
    hd_points: str = "all",
) -> MetricReport:
    """Predict every slice of every case, stack per case, and score it.

    `model` is a LevitUNet or any callable mapping [n, h, w] images to
    [n, h, w] labels. Cases run in parallel; results merge by case ID.
    """
    if hd_mode is not None and hd_mode not in HD_MODES:
        raise ConfigurationError(f"unknown Hausdorff mode '{hd_mode}', expected one of {HD_MODES}")
    if hd_points not in HD_POINTS:
        raise ConfigurationError(f"unknown Hausdorff point set '{hd_points}', expected one of {HD_POINTS}")
    cases = manifest.cases(split)
    if not cases:
        raise InputError(f"{manifest.path}: split '{split}' has no cases")
    predictor = _as_predictor(model, batch_size)
    k = manifest.num_classes

    def run_case(item):
        case_id, entries = item
        records = [load_entry(e, k) for e in entries]
        images = np.stack([r.image for r in records])
        predicted = predictor(images)
        pred = stack_slices({r.slice_index: p for r, p in zip(records, predicted)}, manifest.spacing)
        gt = stack_slices({r.slice_index: r.label for r in records}, manifest.spacing)
        logger.debug(f"Evaluated case {case_id}: {len(records)} slices")
        return case_id, case_metrics(pred, gt, k, hd_mode, hd_points)

    report = MetricReport(hd_mode or "none", k, hd_points=hd_points)
    with ThreadPoolExecutor(max_workers=workers or default_workers()) as pool:
        for case_id, metrics in pool.map(run_case, cases.items()):
            report.cases[case_id] = metrics
    logger.info(
        f"Evaluated {len(report.cases)} {split} cases: mean DSC={report.mean_dsc:.4f}, "
        f"mean HD({report.hd_mode})={report.mean_hd:.3f}"
    )
    return report
