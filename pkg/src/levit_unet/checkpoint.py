"""
Checkpoint serialization.

Layout (little-endian):
    b"LVTU" | u32 version | u32 header_len | header (UTF-8 key=value lines)
    | u32 n_records | records | u32 CRC-32C of every preceding byte

Each record is u32 name_len | name | u32 ndim | u32 dims... | f32 payload.
Record names are prefixed with "param/", "buffer/", "adam.m/" or "adam.v/".
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import crc32c
import numpy as np

from .errors import ConfigurationError, FormatError, IntegrityError
from .model import LevitUNet, ModelConfig, build_model
from .optim import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"LVTU"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    config: ModelConfig
    seed: int
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    optimizer: Optional[AdamState] = None
    extra: Dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _encode_header(items: List[Tuple[str, str]]) -> bytes:
    lines = []
    for key, value in items:
        if "=" in key or "\n" in key or "\n" in value:
            raise ConfigurationError(f"checkpoint header entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def _encode_record(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    dims = array.shape
    head = struct.pack(f"<I{len(raw_name)}sI{len(dims)}I", len(raw_name), raw_name, len(dims), *dims)
    return head + np.ascontiguousarray(array, dtype="<f4").tobytes()


def save_checkpoint(
    model: LevitUNet,
    path: PathLike,
    optimizer_state: Optional[AdamState] = None,
    extra: Optional[Dict[str, str]] = None,
) -> int:
    """Write `model` (and optionally the optimizer) to `path`; returns the byte count.

    The file is written to a sibling temp file and renamed into place, so an
    interrupted save never clobbers the previous checkpoint.
    """
    path = Path(path)
    items = model.config.to_items() + [("seed", str(model.seed))]
    if optimizer_state is not None:
        s = optimizer_state
        items += [
            ("optimizer.lr", repr(s.lr)),
            ("optimizer.beta1", repr(s.beta1)),
            ("optimizer.beta2", repr(s.beta2)),
            ("optimizer.eps", repr(s.eps)),
            ("optimizer.weight_decay", repr(s.weight_decay)),
            ("optimizer.step", str(s.step)),
        ]
    for key, value in (extra or {}).items():
        items.append((f"extra.{key}", str(value)))
    header = _encode_header(items)

    records = [_encode_record(f"param/{n}", p.data) for n, p in model.named_parameters()]
    records += [_encode_record(f"buffer/{n}", b) for n, b in model.named_buffers()]
    if optimizer_state is not None:
        for n in sorted(optimizer_state.first_moment):
            records.append(_encode_record(f"adam.m/{n}", optimizer_state.first_moment[n]))
            records.append(_encode_record(f"adam.v/{n}", optimizer_state.second_moment[n]))

    body = b"".join(
        [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, struct.pack("<I", len(records))] + records
    )
    checksum = crc32c.crc32c(body)
    blob = body + struct.pack("<I", checksum)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    logger.debug(f"Saved checkpoint {path}: {len(blob)} bytes, {len(records)} records, crc32c={checksum:08x}")
    return len(blob)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise IntegrityError(f"truncated checkpoint while reading {what}", self.path, self.offset)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path: PathLike) -> Checkpoint:
    """Parse and verify a checkpoint file without building a model."""
    path = Path(path)
    blob = path.read_bytes()
    where = str(path)
    if len(blob) < 20:
        raise IntegrityError(f"checkpoint too short ({len(blob)} bytes)", where, len(blob))
    body, stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    actual = crc32c.crc32c(body)
    if actual != stored:
        raise IntegrityError(
            f"checksum mismatch: stored {stored:08x}, computed {actual:08x}", where, len(blob) - 4
        )

    r = _Reader(body, where)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a LeViT-UNet checkpoint", where, 0)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})", where, 4)
    header_len = r.u32("header length")
    header_offset = r.offset
    try:
        header_text = r.take(header_len, "header").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"header is not UTF-8: {e}", where, header_offset) from e
    items: Dict[str, str] = {}
    for line in header_text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line {line!r}", where, header_offset)
        items[key] = value

    params: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    first: Dict[str, np.ndarray] = {}
    second: Dict[str, np.ndarray] = {}
    targets = {"param": params, "buffer": buffers, "adam.m": first, "adam.v": second}
    n_records = r.u32("record count")
    for _ in range(n_records):
        record_offset = r.offset
        name = r.take(r.u32("name length"), "record name").decode("utf-8")
        ndim = r.u32("ndim")
        dims = tuple(r.u32("dim") for _ in range(ndim))
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * count, f"payload of {name}")
        kind, sep, key = name.partition("/")
        if not sep or kind not in targets:
            raise FormatError(f"unknown record kind in {name!r}", where, record_offset)
        targets[kind][key] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if r.offset != len(body):
        raise FormatError(f"{len(body) - r.offset} trailing bytes after the last record", where, r.offset)

    config = ModelConfig.from_items(items)
    optimizer = None
    if "optimizer.step" in items:
        optimizer = AdamState(
            lr=float(items["optimizer.lr"]),
            beta1=float(items["optimizer.beta1"]),
            beta2=float(items["optimizer.beta2"]),
            eps=float(items["optimizer.eps"]),
            weight_decay=float(items["optimizer.weight_decay"]),
            step=int(items["optimizer.step"]),
            first_moment=first,
            second_moment=second,
        )
    extra = {k[len("extra."):]: v for k, v in items.items() if k.startswith("extra.")}
    logger.debug(f"Read checkpoint {path}: {len(blob)} bytes, {n_records} records, crc32c={stored:08x}")
    return Checkpoint(
        config=config,
        seed=int(items.get("seed", "0")),
        params=params,
        buffers=buffers,
        optimizer=optimizer,
        extra=extra,
        version=version,
    )


def _check_tensors(model_items: Dict[str, Tuple[int, ...]], stored: Dict[str, np.ndarray], kind: str, path: str) -> None:
    missing = sorted(set(model_items) - set(stored))
    unexpected = sorted(set(stored) - set(model_items))
    if missing or unexpected:
        raise ConfigurationError(
            f"{path}: {kind} names do not match the model (missing={missing[:5]}, unexpected={unexpected[:5]})"
        )
    for name, shape in model_items.items():
        if stored[name].shape != shape:
            raise ConfigurationError(f"{path}: {kind} {name} has shape {stored[name].shape}, model expects {shape}")


def apply_checkpoint(model: LevitUNet, ckpt: Checkpoint, path: str = "<checkpoint>", prefix: str = "") -> None:
    """Copy stored tensors into `model`. Everything is verified before anything is assigned."""
    params = {n: p for n, p in model.named_parameters() if n.startswith(prefix)}
    buffers = {n: b for n, b in model.named_buffers() if n.startswith(prefix)}
    stored_params = {n: a for n, a in ckpt.params.items() if n.startswith(prefix)}
    stored_buffers = {n: a for n, a in ckpt.buffers.items() if n.startswith(prefix)}
    _check_tensors({n: p.shape for n, p in params.items()}, stored_params, "parameter", path)
    _check_tensors({n: b.shape for n, b in buffers.items()}, stored_buffers, "buffer", path)
    for name, param in params.items():
        param.data = stored_params[name].copy()
        param.grad = None
    for name in buffers:
        model.set_buffer(name, stored_buffers[name].copy())


def load_checkpoint(path: PathLike, expected_config: Optional[ModelConfig] = None) -> Tuple[LevitUNet, Checkpoint]:
    """Rebuild the stored model. Refuses a config that differs from `expected_config`."""
    ckpt = read_checkpoint(path)
    if expected_config is not None and expected_config != ckpt.config:
        logger.error(f"Checkpoint config mismatch: stored={ckpt.config} expected={expected_config}")
        raise ConfigurationError(f"{path}: stored model config {ckpt.config} differs from expected {expected_config}")
    model = build_model(ckpt.config, seed=ckpt.seed)
    apply_checkpoint(model, ckpt, str(path))
    return model, ckpt


def load_pretrained_encoder(model: LevitUNet, path: PathLike) -> None:
    """Initialize `model.encoder` from another checkpoint with the same encoder architecture."""
    ckpt = read_checkpoint(path)
    stored = ckpt.config.encoder_config()
    wanted = model.config.encoder_config()
    if stored != wanted or ckpt.config.img_size != model.config.img_size:
        raise ConfigurationError(f"{path}: encoder architecture {stored} does not match the model's {wanted}")
    apply_checkpoint(model, ckpt, str(path), prefix="encoder.")
    logger.info(f"Loaded pretrained encoder weights from {path}")
