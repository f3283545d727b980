"""
Synthetic shapes dataset: noisy slices with one non-overlapping ellipse,
rectangle or ring per foreground class. Fully determined by the seed.
"""

import logging
import math
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .data import CaseManifest, ManifestEntry, SliceRecord, load_manifest, save_slice, write_manifest
from .errors import InputError

logger = logging.getLogger(__name__)

SHAPES = ("ellipse", "rectangle", "ring")
NOISE_SIGMA = 0.1
MIN_RADIUS = 2.0

Cell = Tuple[float, float, float]  # top, left, side


def shape_for_class(class_id: int) -> str:
    return SHAPES[(class_id - 1) % len(SHAPES)]


def grid_side(num_classes: int) -> int:
    """Cells per side of the placement grid: one cell per foreground class."""
    return math.ceil(math.sqrt(num_classes - 1))


def radius_bounds(size: int, num_classes: int) -> Tuple[float, float]:
    """Region radius range, [size/10, size/5] shrunk so a region fits inside its cell."""
    cell = size / grid_side(num_classes)
    high = min(size / 5.0, (cell - 1.0) / 2.0 - 0.5)
    low = min(size / 10.0, 0.6 * high)
    return low, high


def _region_mask(shape: str, size: int, cell: Cell, bounds: Tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    top, left, side = cell
    low, high = bounds
    rows, cols = np.mgrid[0:size, 0:size]
    if shape == "ring":
        outer = rng.uniform(max(low, MIN_RADIUS), high)
        cy = rng.uniform(top + outer, top + side - 1 - outer)
        cx = rng.uniform(left + outer, left + side - 1 - outer)
        d2 = (rows - cy) ** 2 + (cols - cx) ** 2
        return (d2 <= outer ** 2) & (d2 >= (0.5 * outer) ** 2)
    ry, rx = rng.uniform(low, high, size=2)
    cy = rng.uniform(top + ry, top + side - 1 - ry)
    cx = rng.uniform(left + rx, left + side - 1 - rx)
    if shape == "ellipse":
        return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
    return (np.abs(rows - cy) <= ry) & (np.abs(cols - cx) <= rx)


def synthetic_slice(case_id: str, slice_index: int, size: int, num_classes: int, rng: np.random.Generator) -> SliceRecord:
    """One slice containing every class 1..K-1 exactly once as a separate region.

    Each class is dropped into its own randomly chosen cell of a g×g grid
    (g = ⌈√(K−1)⌉), so regions never overlap and placement cannot fail.
    """
    if num_classes < 2:
        raise InputError(f"synthetic data needs K >= 2, got {num_classes}")
    if size < 16:
        raise InputError(f"synthetic slice size {size} is too small to place regions")
    bounds = radius_bounds(size, num_classes)
    if bounds[1] < MIN_RADIUS:
        raise InputError(
            f"synthetic slice size {size} is too small to place {num_classes - 1} regions "
            f"(radius limit {bounds[1]:.2f} < {MIN_RADIUS})"
        )
    g = grid_side(num_classes)
    side = size / g
    cells = rng.permutation(g * g)[: num_classes - 1]
    label = np.zeros((size, size), dtype=np.uint8)
    for class_id, cell_index in enumerate(cells, start=1):
        row, col = divmod(int(cell_index), g)
        mask = _region_mask(shape_for_class(class_id), size, (row * side, col * side, side), bounds, rng)
        if not mask.any() or np.any(label[mask]):
            raise InputError(f"class {class_id} region on a {size}x{size} slice is empty or overlaps")
        label[mask] = class_id
    means = (np.arange(num_classes) + 0.5) / num_classes
    image = means[label] + rng.normal(0.0, NOISE_SIGMA, size=label.shape)
    return SliceRecord(case_id, slice_index, np.clip(image, 0.0, 1.0).astype(np.float32), label)


def generate_synthetic_dataset(
    out_dir: Union[str, Path],
    n_cases: int,
    slices_per_case: int,
    size: int,
    num_classes: int,
    seed: int = 0,
    test_cases: int = 0,
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> CaseManifest:
    """Write slice files plus `manifest.tsv` under `out_dir` and return the loaded manifest.

    The first `n_cases` cases form the train split, the next `test_cases`
    the test split. Each slice draws from its own (seed, case, slice) stream.
    """
    if n_cases < 0 or test_cases < 0 or n_cases + test_cases < 1 or slices_per_case < 1:
        raise InputError(
            f"need at least one case and one slice per case, got n_cases={n_cases}, "
            f"test_cases={test_cases}, slices_per_case={slices_per_case}"
        )
    out_dir = Path(out_dir)
    slice_dir = out_dir / "slices"
    slice_dir.mkdir(parents=True, exist_ok=True)

    entries: List[ManifestEntry] = []
    for case_number in range(n_cases + test_cases):
        split = "train" if case_number < n_cases else "test"
        case_id = f"case{case_number:04d}"
        for slice_index in range(slices_per_case):
            rng = np.random.default_rng([seed, case_number, slice_index])
            record = synthetic_slice(case_id, slice_index, size, num_classes, rng)
            img_path, lbl_path = save_slice(slice_dir, record)
            entries.append(ManifestEntry(split, case_id, slice_index, img_path, lbl_path))

    manifest_path = write_manifest(out_dir / "manifest.tsv", num_classes, spacing, entries)
    logger.info(
        f"Generated synthetic dataset in {out_dir}: {n_cases} train + {test_cases} test cases, "
        f"{slices_per_case} slices each, {size}x{size}, K={num_classes}, seed={seed}"
    )
    return load_manifest(manifest_path)
