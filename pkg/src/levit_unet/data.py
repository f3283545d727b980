"""
Slice datasets: raw tensor files, case manifests, augmentation and batching.
"""

import logging
import math
import os
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, FormatError, InputError
from .functional import resize_matrix

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RAW_MAGIC = b"LVTR"
RAW_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
MANIFEST_MAGIC = "#LVTU-MANIFEST"
SPLITS = ("train", "test")
SLICE_NAME = re.compile(r"^(?P<case>.+)_(?P<index>\d+)_img\.lvtr$")


def default_workers() -> int:
    """Worker threads for loading and evaluation, capped by LEVIT_UNET_THREADS."""
    raw = os.getenv("LEVIT_UNET_THREADS")
    if raw:
        try:
            value = int(raw)
        except ValueError as e:
            raise ConfigurationError(f"LEVIT_UNET_THREADS must be an integer, got '{raw}'") from e
        if value < 1:
            raise ConfigurationError(f"LEVIT_UNET_THREADS must be >= 1, got {value}")
        return value
    return max(1, min(4, os.cpu_count() or 1))


# ----------------------------------------------------------------------
# RawTensorFile
# ----------------------------------------------------------------------
def encode_raw_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.float32:
        code = 0
    elif array.dtype == np.uint8:
        code = 1
    else:
        raise InputError(f"raw tensor files hold float32 or uint8 data, got {array.dtype}")
    header = RAW_MAGIC + struct.pack(f"<BI{array.ndim}I", code, array.ndim, *array.shape)
    return header + np.ascontiguousarray(array, dtype=RAW_DTYPES[code]).tobytes()


def decode_raw_tensor(data: bytes, path: str = "<bytes>") -> np.ndarray:
    if len(data) < 9:
        raise FormatError(f"file too short for a raw tensor header ({len(data)} bytes)", path, len(data))
    if data[:4] != RAW_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {RAW_MAGIC!r}", path, 0)
    code = data[4]
    if code not in RAW_DTYPES:
        raise FormatError(f"unknown dtype code {code}", path, 4)
    ndim = struct.unpack_from("<I", data, 5)[0]
    dims_end = 9 + 4 * ndim
    if ndim == 0 or len(data) < dims_end:
        raise FormatError(f"invalid dimension count {ndim}", path, 5)
    dims = struct.unpack_from(f"<{ndim}I", data, 9)
    if 0 in dims:
        raise FormatError(f"zero-length dimension in {dims}", path, 9)
    dtype = RAW_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(data) - dims_end != expected:
        raise FormatError(
            f"payload has {len(data) - dims_end} bytes, dims {dims} need {expected}", path, dims_end
        )
    return np.frombuffer(data, dtype=dtype, offset=dims_end).reshape(dims).copy()


def write_raw_tensor(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_raw_tensor(array))


def read_raw_tensor(path: PathLike) -> np.ndarray:
    path = Path(path)
    return decode_raw_tensor(path.read_bytes(), str(path))


# ----------------------------------------------------------------------
# Slices
# ----------------------------------------------------------------------
@dataclass
class SliceRecord:
    case_id: str
    slice_index: int
    image: np.ndarray  # float32 [h, w] in [0, 1]
    label: np.ndarray  # uint8 [h, w]


def slice_paths(directory: PathLike, case_id: str, slice_index: int) -> Tuple[Path, Path]:
    base = Path(directory) / f"{case_id}_{slice_index}"
    return base.with_name(base.name + "_img.lvtr"), base.with_name(base.name + "_lbl.lvtr")


def load_slice(
    image_path: PathLike,
    label_path: Optional[PathLike] = None,
    num_classes: Optional[int] = None,
    case_id: Optional[str] = None,
    slice_index: Optional[int] = None,
) -> SliceRecord:
    """Read an image/label pair named `<case>_<idx>_img.lvtr` / `<case>_<idx>_lbl.lvtr`."""
    image_path = Path(image_path)
    match = SLICE_NAME.match(image_path.name)
    if case_id is None or slice_index is None:
        if match is None:
            raise InputError(f"{image_path}: slice file names must look like <case>_<idx>_img.lvtr")
        case_id = case_id if case_id is not None else match.group("case")
        slice_index = slice_index if slice_index is not None else int(match.group("index"))
    if label_path is None:
        if match is None:
            raise InputError(f"{image_path}: cannot derive the label path from this file name")
        label_path = image_path.with_name(image_path.name[: -len("_img.lvtr")] + "_lbl.lvtr")
    label_path = Path(label_path)

    image = read_raw_tensor(image_path)
    label = read_raw_tensor(label_path)
    if image.dtype != np.float32:
        raise FormatError("image file must hold float32 data", str(image_path), 4)
    if label.dtype != np.uint8:
        raise FormatError("label file must hold uint8 data", str(label_path), 4)
    if image.ndim != 2 or image.shape != label.shape:
        raise InputError(f"{image_path}: image {image.shape} and label {label.shape} must be equal 2-D shapes")
    if not np.all(np.isfinite(image)):
        raise InputError(f"{image_path}: image contains NaN or Inf")
    if num_classes is not None and label.size and int(label.max()) >= num_classes:
        raise InputError(f"{label_path}: label value {int(label.max())} outside [0, {num_classes})")
    logger.debug(f"Loaded slice {case_id}/{slice_index} shape={image.shape}")
    return SliceRecord(case_id, slice_index, np.clip(image, 0.0, 1.0), label)


def save_slice(directory: PathLike, record: SliceRecord) -> Tuple[Path, Path]:
    img_path, lbl_path = slice_paths(directory, record.case_id, record.slice_index)
    write_raw_tensor(img_path, record.image.astype(np.float32))
    write_raw_tensor(lbl_path, record.label.astype(np.uint8))
    return img_path, lbl_path


# ----------------------------------------------------------------------
# Manifests
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ManifestEntry:
    split: str
    case_id: str
    slice_index: int
    image_path: Path
    label_path: Path


@dataclass
class CaseManifest:
    path: Path
    num_classes: int
    spacing: Tuple[float, float, float]
    entries: List[ManifestEntry]

    def split_entries(self, split: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def cases(self, split: str) -> Dict[str, List[ManifestEntry]]:
        """case_id → entries ordered by slice index, cases in first-appearance order."""
        out: Dict[str, List[ManifestEntry]] = {}
        for entry in self.split_entries(split):
            out.setdefault(entry.case_id, []).append(entry)
        for entries in out.values():
            entries.sort(key=lambda e: e.slice_index)
        return out

    def load_split(self, split: str, workers: Optional[int] = None) -> List[SliceRecord]:
        entries = self.split_entries(split)
        with ThreadPoolExecutor(max_workers=workers or default_workers()) as pool:
            return list(pool.map(lambda e: load_entry(e, self.num_classes), entries))


def load_entry(entry: ManifestEntry, num_classes: int) -> SliceRecord:
    return load_slice(entry.image_path, entry.label_path, num_classes, entry.case_id, entry.slice_index)


def _parse_header(line: str, path: Path) -> Tuple[int, Tuple[float, float, float]]:
    fields = line.rstrip("\n").split("\t")
    if fields[0] != MANIFEST_MAGIC:
        raise InputError(f"{path}:1: field 'header': expected '{MANIFEST_MAGIC}', got '{fields[0]}'")
    values = dict(f.partition("=")[::2] for f in fields[1:])
    try:
        k = int(values["K"])
    except (KeyError, ValueError) as e:
        raise InputError(f"{path}:1: field 'K': missing or not an integer") from e
    if k < 2:
        raise InputError(f"{path}:1: field 'K': must be >= 2, got {k}")
    try:
        spacing = tuple(float(v) for v in values["spacing"].split(","))
    except (KeyError, ValueError) as e:
        raise InputError(f"{path}:1: field 'spacing': missing or not three numbers") from e
    if len(spacing) != 3 or min(spacing) <= 0:
        raise InputError(f"{path}:1: field 'spacing': need three positive values, got {spacing}")
    return k, spacing


def load_manifest(path: PathLike) -> CaseManifest:
    """Parse and fully validate a manifest. Any malformed entry raises; nothing partial is returned."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest {path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise InputError(f"{path}:1: field 'header': manifest is empty")
    num_classes, spacing = _parse_header(lines[0], path)
    base = path.parent

    entries: List[ManifestEntry] = []
    seen: Dict[Tuple[str, int], int] = {}
    case_split: Dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise InputError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        split, case_id, raw_index, img, lbl = fields
        if split not in SPLITS:
            raise InputError(f"{path}:{lineno}: field 'split': '{split}' is not one of {SPLITS}")
        if not case_id:
            raise InputError(f"{path}:{lineno}: field 'case_id': empty")
        if case_split.setdefault(case_id, split) != split:
            raise InputError(f"{path}:{lineno}: field 'case_id': case '{case_id}' appears in both splits")
        try:
            index = int(raw_index)
        except ValueError as e:
            raise InputError(f"{path}:{lineno}: field 'slice_index': '{raw_index}' is not an integer") from e
        if index < 0:
            raise InputError(f"{path}:{lineno}: field 'slice_index': negative index {index}")
        if (case_id, index) in seen:
            raise InputError(
                f"{path}:{lineno}: field 'slice_index': duplicate of line {seen[(case_id, index)]}"
            )
        seen[(case_id, index)] = lineno
        img_path, lbl_path = base / img, base / lbl
        for field_name, p in (("img_path", img_path), ("lbl_path", lbl_path)):
            if not p.is_file():
                raise InputError(f"{path}:{lineno}: field '{field_name}': file {p} does not exist")
        entries.append(ManifestEntry(split, case_id, index, img_path, lbl_path))

    indices: Dict[str, List[int]] = {}
    for e in entries:
        indices.setdefault(e.case_id, []).append(e.slice_index)
    for case_id, idx in indices.items():
        if sorted(idx) != list(range(len(idx))):
            missing = sorted(set(range(max(idx) + 1)) - set(idx))
            raise InputError(f"{path}: field 'slice_index': case '{case_id}' is missing slices {missing}")

    logger.info(f"Loaded manifest {path}: K={num_classes}, {len(indices)} cases, {len(entries)} slices")
    return CaseManifest(path, num_classes, spacing, entries)


def write_manifest(
    path: PathLike,
    num_classes: int,
    spacing: Tuple[float, float, float],
    entries: Sequence[ManifestEntry],
) -> Path:
    path = Path(path)
    base = path.parent
    lines = [f"{MANIFEST_MAGIC}\tK={num_classes}\tspacing={','.join(repr(float(s)) for s in spacing)}"]
    for e in entries:
        img = os.path.relpath(e.image_path, base)
        lbl = os.path.relpath(e.label_path, base)
        lines.append(f"{e.split}\t{e.case_id}\t{e.slice_index}\t{img}\t{lbl}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------
def apply_transform(record: SliceRecord, hflip: bool, vflip: bool, angle: float) -> SliceRecord:
    """Flip, then rotate counter-clockwise by `angle` degrees about the center.

    Images use bilinear interpolation, labels nearest neighbour; pixels
    rotated in from outside are 0 / background.
    """
    image, label = record.image, record.label
    if hflip:
        image, label = image[:, ::-1], label[:, ::-1]
    if vflip:
        image, label = image[::-1, :], label[::-1, :]
    if angle:
        quarter_turns = angle / 90.0
        if quarter_turns == int(quarter_turns) and image.shape[0] == image.shape[1]:
            k = int(quarter_turns) % 4
            image, label = np.rot90(image, k), np.rot90(label, k)
        else:
            image = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
            label = ndimage.rotate(label, angle, reshape=False, order=0, mode="constant", cval=0)
    return replace(
        record,
        image=np.clip(np.ascontiguousarray(image, dtype=np.float32), 0.0, 1.0),
        label=np.ascontiguousarray(label, dtype=np.uint8),
    )


def augment(record: SliceRecord, rng: np.random.Generator, max_angle: float = 20.0) -> SliceRecord:
    """Random horizontal flip (p=0.5), vertical flip (p=0.5) and rotation in ±max_angle degrees."""
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    angle = float(rng.uniform(-max_angle, max_angle))
    return apply_transform(record, hflip, vflip, angle)


# ----------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------
def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape
    if (h, w) == (size, size):
        return image.astype(np.float32, copy=False)
    out = resize_matrix(h, size) @ image.astype(np.float64) @ resize_matrix(w, size).T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_labels(label: np.ndarray, size: int) -> np.ndarray:
    h, w = label.shape
    if (h, w) == (size, size):
        return label
    rows = np.minimum(np.floor((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(np.floor((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return label[rows[:, None], cols[None, :]]


@dataclass
class Batch:
    images: np.ndarray  # float32 [n, in_channels, s, s]
    labels: np.ndarray  # int64 [n, s, s]
    indices: Tuple[int, ...]


class BatchLoader:
    """Deterministically ordered batches, built by a thread pool with bounded prefetch.

    The shuffle order and each batch's augmentation stream depend only on
    (seed, epoch, batch number), never on the worker count.
    """

    def __init__(
        self,
        records: Sequence[SliceRecord],
        batch_size: int,
        target_size: int,
        seed: int = 0,
        in_channels: int = 3,
        shuffle: bool = True,
        augment: bool = False,
        epoch: int = 0,
        workers: Optional[int] = None,
        prefetch: int = 2,
    ):
        if not records:
            raise InputError("cannot batch an empty record set")
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        if target_size < 16 or target_size % 16:
            raise ConfigurationError(f"target_size must be a positive multiple of 16, got {target_size}")
        self.records = records
        self.batch_size = batch_size
        self.target_size = target_size
        self.seed = seed
        self.in_channels = in_channels
        self.augment = augment
        self.epoch = epoch
        self.workers = workers or default_workers()
        self.prefetch = max(1, prefetch)
        if shuffle:
            self.order = np.random.default_rng([seed, epoch]).permutation(len(records))
        else:
            self.order = np.arange(len(records))

    def __len__(self) -> int:
        return math.ceil(len(self.records) / self.batch_size)

    def batch_indices(self) -> List[Tuple[int, ...]]:
        return [
            tuple(int(i) for i in self.order[start:start + self.batch_size])
            for start in range(0, len(self.order), self.batch_size)
        ]

    def build(self, number: int, indices: Tuple[int, ...]) -> Batch:
        rng = np.random.default_rng([self.seed, self.epoch, number]) if self.augment else None
        images, labels = [], []
        for i in indices:
            record = self.records[i]
            if rng is not None:
                record = augment(record, rng)
            images.append(resize_image(record.image, self.target_size))
            labels.append(resize_labels(record.label, self.target_size))
        stacked = np.stack(images)[:, None]
        return Batch(
            images=np.repeat(stacked, self.in_channels, axis=1),
            labels=np.stack(labels).astype(np.int64),
            indices=indices,
        )

    def __iter__(self) -> Iterator[Batch]:
        plan = self.batch_indices()
        if self.workers <= 1:
            for number, indices in enumerate(plan):
                yield self.build(number, indices)
            return
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            pending = []
            window = self.workers + self.prefetch
            for number, indices in enumerate(plan):
                pending.append(pool.submit(self.build, number, indices))
                if len(pending) >= window:
                    yield pending.pop(0).result()
            for future in pending:
                yield future.result()


def make_batches(
    records: Sequence[SliceRecord],
    batch_size: int,
    target_size: int,
    shuffle_seed: int,
    in_channels: int = 3,
    augment: bool = False,
    epoch: int = 0,
    workers: Optional[int] = None,
) -> BatchLoader:
    return BatchLoader(
        records,
        batch_size,
        target_size,
        seed=shuffle_seed,
        in_channels=in_channels,
        augment=augment,
        epoch=epoch,
        workers=workers,
    )
