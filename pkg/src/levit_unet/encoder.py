"""
LeViT encoder: a four-convolution stem, three stages of transformer blocks
with biased multi-head attention, shrinking attention between stages, and
multi-scale fusion of the last-stage features at 1/16 resolution.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigurationError
from .layers import BatchNormLayer, ConvBN, LinearLayer, Module
from .tensor import Tensor, parameter

logger = logging.getLogger(__name__)

Grid = Tuple[int, int]


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class StemConfig:
    in_channels: int = 3
    widths: Tuple[int, int, int, int] = (16, 32, 64, 128)


@dataclass(frozen=True)
class StageConfig:
    width: int
    depth: int
    heads: int
    key_dim: int = 16
    mlp_ratio: int = 2
    value_ratio: int = 2


@dataclass(frozen=True)
class EncoderConfig:
    stem: StemConfig
    stages: Tuple[StageConfig, StageConfig, StageConfig]
    downsample_value_ratio: int = 4
    downsample_mlp_ratio: int = 2
    conv_only: bool = False

    @property
    def fused_channels(self) -> int:
        if self.conv_only:
            return self.stem.widths[-1]
        return self.stem.widths[-1] + sum(s.width for s in self.stages)

    def validate(self) -> None:
        if len(self.stem.widths) != 4 or min(self.stem.widths) < 1 or self.stem.in_channels < 1:
            raise ConfigurationError(f"stem needs 4 positive widths and in_channels >= 1, got {self.stem}")
        if len(self.stages) != 3:
            raise ConfigurationError(f"encoder needs exactly 3 stages, got {len(self.stages)}")
        if self.stages[0].width != self.stem.widths[-1]:
            raise ConfigurationError(
                f"stem output width {self.stem.widths[-1]} must equal stage-1 width {self.stages[0].width}"
            )
        for i, stage in enumerate(self.stages):
            if min(stage.width, stage.depth, stage.heads, stage.key_dim, stage.mlp_ratio, stage.value_ratio) < 1:
                raise ConfigurationError(f"stage {i + 1}: every field must be >= 1, got {stage}")
        for i in range(2):
            width, key_dim = self.stages[i].width, self.stages[i].key_dim
            if width % key_dim:
                raise ConfigurationError(
                    f"downsample after stage {i + 1}: width {width} not divisible by key_dim {key_dim}"
                )


def _variant(width: int, depths, heads, widths, key_dim: int) -> EncoderConfig:
    stem = StemConfig(widths=(width // 8, width // 4, width // 2, width))
    stages = tuple(StageConfig(w, d, h, key_dim) for w, d, h in zip(widths, depths, heads))
    return EncoderConfig(stem=stem, stages=stages)


VARIANTS: Dict[str, EncoderConfig] = {
    "128s": _variant(128, (2, 3, 4), (4, 6, 8), (128, 256, 384), key_dim=16),
    "192": _variant(192, (4, 4, 4), (3, 5, 6), (192, 288, 384), key_dim=32),
    "384": _variant(384, (4, 4, 4), (6, 9, 12), (384, 512, 768), key_dim=32),
}


def variant_config(variant: str, in_channels: int = 3, conv_only: bool = False) -> EncoderConfig:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant '{variant}', expected one of {sorted(VARIANTS)}")
    base = VARIANTS[variant]
    return EncoderConfig(
        stem=StemConfig(in_channels=in_channels, widths=base.stem.widths),
        stages=base.stages,
        downsample_value_ratio=base.downsample_value_ratio,
        downsample_mlp_ratio=base.downsample_mlp_ratio,
        conv_only=conv_only,
    )


def subsampled(grid: Grid) -> Grid:
    return (math.ceil(grid[0] / 2), math.ceil(grid[1] / 2))


# ----------------------------------------------------------------------
# Token helpers
# ----------------------------------------------------------------------
def map_to_tokens(x: Tensor) -> Tensor:
    """[n, c, h, w] → [n, h·w, c]."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def tokens_to_map(tokens: Tensor, grid: Grid) -> Tensor:
    """[n, h·w, c] → [n, c, h, w]."""
    n, _, c = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(n, c, grid[0], grid[1])


def subsample_tokens(tokens: Tensor, grid: Grid) -> Tensor:
    """Keep every second row and column of the token grid (ceil)."""
    n, _, c = tokens.shape
    h, w = grid
    hq, wq = subsampled(grid)
    return tokens.reshape(n, h, w, c)[:, ::2, ::2, :].reshape(n, hq * wq, c)


def build_offset_index(h: int, w: int, h_q: int, w_q: int) -> Tuple[np.ndarray, int]:
    """Map each (query, key) pair to the slot of its signed displacement.

    Queries sit on the key grid itself or on its stride-2 subsampling.
    Slots are dense in [0, n_offsets).
    """
    if (h_q, w_q) == (h, w):
        stride = 1
    elif (h_q, w_q) == subsampled((h, w)):
        stride = 2
    else:
        raise ConfigurationError(f"query grid {h_q}x{w_q} is neither {h}x{w} nor its stride-2 subsampling")
    qr, qc = np.meshgrid(np.arange(h_q) * stride, np.arange(w_q) * stride, indexing="ij")
    kr, kc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dr = qr.reshape(-1)[:, None] - kr.reshape(-1)[None, :]
    dc = qc.reshape(-1)[:, None] - kc.reshape(-1)[None, :]
    dr_min, dc_min = -(h - 1), -(w - 1)
    n_dc = stride * (w_q - 1) - dc_min + 1
    n_dr = stride * (h_q - 1) - dr_min + 1
    index = (dr - dr_min) * n_dc + (dc - dc_min)
    return index.astype(np.int64), int(n_dr * n_dc)


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------
class Stem(Module):
    """Four 3×3 stride-2 conv → BN → hardswish layers (×16 downsampling)."""

    def __init__(self, config: StemConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        channels = (config.in_channels,) + tuple(config.widths)
        self.convs = [
            ConvBN(channels[i], channels[i + 1], 3, rng, stride=2, padding=1, activation="hardswish", name=f"stem.{i}")
            for i in range(4)
        ]

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        if x.ndim != 4:
            raise ConfigurationError(f"stem expects [n, c, h, w], got shape {x.shape}")
        _, c, h, w = x.shape
        if h % 16 or w % 16:
            raise ConfigurationError(f"input spatial size {h}x{w} must be divisible by 16")
        if c != self.config.in_channels:
            raise ConfigurationError(f"input has {c} channels, model expects {self.config.in_channels}")
        outs = []
        for conv in self.convs:
            x = conv(x)
            outs.append(x)
        return outs[0], outs[1], outs[2], outs[3]


class AttentionLayer(Module):
    """Multi-head attention with a learned per-displacement bias.

    stride=1 attends over the key grid itself; stride=2 draws queries from
    the subsampled grid (shrinking attention). Value width per head is
    value_ratio·key_dim; heads are concatenated, passed through hardswish and
    projected to out_dim.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        heads: int,
        key_dim: int,
        value_ratio: int,
        key_grid: Grid,
        rng: np.random.Generator,
        stride: int = 1,
        name: str = "attn",
    ):
        super().__init__()
        self.heads = heads
        self.key_dim = key_dim
        self.value_dim = value_ratio * key_dim
        self.key_grid = tuple(key_grid)
        self.stride = stride
        self.query_grid = self.key_grid if stride == 1 else subsampled(self.key_grid)
        self.scale = 1.0 / math.sqrt(key_dim)
        self.name = name
        self.q_proj = LinearLayer(in_dim, heads * key_dim, rng, name=f"{name}.q")
        self.k_proj = LinearLayer(in_dim, heads * key_dim, rng, name=f"{name}.k")
        self.v_proj = LinearLayer(in_dim, heads * self.value_dim, rng, name=f"{name}.v")
        self.out_proj = LinearLayer(heads * self.value_dim, out_dim, rng, name=f"{name}.out")
        self.offset_index, n_offsets = build_offset_index(*self.key_grid, *self.query_grid)
        self.bias_table = parameter(np.zeros((heads, n_offsets)))

    def attention_weights(self, tokens: Tensor, grid: Grid) -> Tuple[Tensor, Tensor]:
        """Softmax weights [n, heads, Nq, Nk] and values [n, heads, Nk, dv]."""
        if tuple(grid) != self.key_grid or tokens.shape[1] != grid[0] * grid[1]:
            raise ConfigurationError(
                f"{self.name}: {tokens.shape[1]} tokens on grid {grid} do not match the bias table "
                f"built for grid {self.key_grid}"
            )
        n = tokens.shape[0]
        nk = self.key_grid[0] * self.key_grid[1]
        nq = self.query_grid[0] * self.query_grid[1]
        x_q = tokens if self.stride == 1 else subsample_tokens(tokens, grid)
        q = self.q_proj(x_q).reshape(n, nq, self.heads, self.key_dim).transpose(0, 2, 1, 3)
        k = self.k_proj(tokens).reshape(n, nk, self.heads, self.key_dim).transpose(0, 2, 1, 3)
        v = self.v_proj(tokens).reshape(n, nk, self.heads, self.value_dim).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * self.scale + self.bias_table[:, self.offset_index]
        F.record_macs(f"{self.name}.mix", self.heads * nq * nk * (self.key_dim + self.value_dim))
        return F.softmax(scores, axis=-1), v

    def forward(self, tokens: Tensor, grid: Grid) -> Tensor:
        n = tokens.shape[0]
        nq = self.query_grid[0] * self.query_grid[1]
        weights, v = self.attention_weights(tokens, grid)
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(n, nq, self.heads * self.value_dim)
        return self.out_proj(F.hardswish(mixed))


class MLPSublayer(Module):
    """BN → expand → hardswish → contract. Returns the branch; callers add the residual."""

    def __init__(self, width: int, ratio: int, rng: np.random.Generator, name: str = "mlp"):
        super().__init__()
        self.norm = BatchNormLayer(width, channel_axis=-1)
        self.expand = LinearLayer(width, width * ratio, rng, name=f"{name}.expand")
        self.contract = LinearLayer(width * ratio, width, rng, name=f"{name}.contract")

    def forward(self, z: Tensor) -> Tensor:
        return self.contract(F.hardswish(self.expand(self.norm(z))))


class TransformerBlock(Module):
    """ẑ = MLP(BN(z)) + z, then z' = MSA(BN(ẑ)) + ẑ."""

    def __init__(self, stage: StageConfig, grid: Grid, rng: np.random.Generator, name: str = "block"):
        super().__init__()
        self.mlp = MLPSublayer(stage.width, stage.mlp_ratio, rng, name=f"{name}.mlp")
        self.attn_norm = BatchNormLayer(stage.width, channel_axis=-1)
        self.attn = AttentionLayer(
            stage.width, stage.width, stage.heads, stage.key_dim, stage.value_ratio, grid, rng, name=f"{name}.attn"
        )

    def forward(self, z: Tensor, grid: Grid) -> Tensor:
        z_hat = self.mlp(z) + z
        return self.attn(self.attn_norm(z_hat), grid) + z_hat


class DownsampleBlock(Module):
    """Shrinking attention from one stage width to the next, then a residual MLP."""

    def __init__(
        self,
        in_width: int,
        out_width: int,
        key_dim: int,
        value_ratio: int,
        mlp_ratio: int,
        grid: Grid,
        rng: np.random.Generator,
        name: str = "down",
    ):
        super().__init__()
        self.norm = BatchNormLayer(in_width, channel_axis=-1)
        self.attn = AttentionLayer(
            in_width, out_width, in_width // key_dim, key_dim, value_ratio, grid, rng, stride=2, name=f"{name}.attn"
        )
        self.mlp = MLPSublayer(out_width, mlp_ratio, rng, name=f"{name}.mlp")
        self.out_grid = subsampled(grid)

    def shrink(self, tokens: Tensor, grid: Grid) -> Tensor:
        """Attention-only downsampling; no residual since widths differ."""
        return self.attn(self.norm(tokens), grid)

    def forward(self, tokens: Tensor, grid: Grid) -> Tensor:
        z = self.shrink(tokens, grid)
        return self.mlp(z) + z


@dataclass
class EncoderOutput:
    skip_half: Tensor
    skip_quarter: Tensor
    skip_eighth: Tensor
    stem_sixteenth: Tensor
    fused_sixteenth: Optional[Tensor]


class LeViTEncoder(Module):
    def __init__(self, config: EncoderConfig, img_size: int, rng: np.random.Generator):
        super().__init__()
        config.validate()
        if img_size < 16 or img_size % 16:
            raise ConfigurationError(f"img_size {img_size} must be a positive multiple of 16")
        self.config = config
        self.stem = Stem(config.stem, rng)
        self.stage_grids: List[Grid] = []
        # Lists of lists are not walked by named_children; blocks register through stageN.
        self.stages: List[List[TransformerBlock]] = []
        self.downsamples: List[DownsampleBlock] = []
        if config.conv_only:
            return

        grid: Grid = (img_size // 16, img_size // 16)
        for i, stage in enumerate(config.stages):
            if i > 0:
                prev = config.stages[i - 1]
                self.downsamples.append(
                    DownsampleBlock(
                        prev.width,
                        stage.width,
                        prev.key_dim,
                        config.downsample_value_ratio,
                        config.downsample_mlp_ratio,
                        grid,
                        rng,
                        name=f"down{i}",
                    )
                )
                grid = subsampled(grid)
            self.stage_grids.append(grid)
            blocks = [TransformerBlock(stage, grid, rng, name=f"stage{i + 1}.{j}") for j in range(stage.depth)]
            setattr(self, f"stage{i + 1}", blocks)
            self.stages.append(blocks)
        logger.debug(f"Encoder stage grids: {self.stage_grids}")

    def forward(self, x: Tensor, include_transformer: bool = True) -> EncoderOutput:
        half, quarter, eighth, sixteenth = self.stem(x)
        if self.config.conv_only:
            return EncoderOutput(half, quarter, eighth, sixteenth, sixteenth)
        if not include_transformer:
            return EncoderOutput(half, quarter, eighth, sixteenth, None)

        _, _, h16, w16 = sixteenth.shape
        if (h16, w16) != self.stage_grids[0]:
            raise ConfigurationError(
                f"encoder was built for a {self.stage_grids[0]} token grid, input gives {(h16, w16)}"
            )
        features = [sixteenth]
        tokens = map_to_tokens(sixteenth)
        for i, blocks in enumerate(self.stages):
            if i > 0:
                tokens = self.downsamples[i - 1](tokens, self.stage_grids[i - 1])
            grid = self.stage_grids[i]
            for block in blocks:
                tokens = block(tokens, grid)
            fmap = tokens_to_map(tokens, grid)
            features.append(F.bilinear_resize(fmap, h16, w16))
        return EncoderOutput(half, quarter, eighth, sixteenth, F.concat(features, axis=1))
