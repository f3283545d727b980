"""
LeViT-UNet assembly: encoder, cascaded upsampling decoder and the
skip-connection switch used by the skip-count ablation.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import functional as F
from .encoder import VARIANTS, EncoderConfig, EncoderOutput, LeViTEncoder, StageConfig, StemConfig, variant_config
from .errors import ConfigurationError
from .layers import Conv2dLayer, ConvBN, Module
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

CUSTOM_VARIANT = "custom"


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered not in ("true", "false"):
        raise ConfigurationError(f"expected true/false, got '{text}'")
    return lowered == "true"


@dataclass(frozen=True)
class ModelConfig:
    """Full architectural description of a LeViT-UNet.

    `encoder` overrides the variant table (miniature test models); when it is
    set, `variant` must be "custom".
    """

    variant: str = "128s"
    num_classes: int = 9
    in_channels: int = 3
    num_skips: int = 4
    conv_only: bool = False
    decoder_widths: Tuple[int, int, int] = (512, 256, 128)
    img_size: int = 224
    encoder: Optional[EncoderConfig] = field(default=None, compare=True)

    def validate(self) -> None:
        if self.encoder is None and self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant '{self.variant}', expected one of {sorted(VARIANTS)}")
        if self.encoder is not None and self.variant != CUSTOM_VARIANT:
            raise ConfigurationError("an explicit encoder config requires variant 'custom'")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ConfigurationError(f"in_channels must be >= 1, got {self.in_channels}")
        if not 0 <= self.num_skips <= 4:
            raise ConfigurationError(f"num_skips must be in [0, 4], got {self.num_skips}")
        if len(self.decoder_widths) != 3 or min(self.decoder_widths) < 1:
            raise ConfigurationError(f"decoder_widths must be 3 positive integers, got {self.decoder_widths}")
        if self.img_size < 16 or self.img_size % 16:
            raise ConfigurationError(f"img_size must be a positive multiple of 16, got {self.img_size}")
        self.encoder_config().validate()

    def encoder_config(self) -> EncoderConfig:
        if self.encoder is None:
            return variant_config(self.variant, self.in_channels, self.conv_only)
        return replace(
            self.encoder,
            stem=replace(self.encoder.stem, in_channels=self.in_channels),
            conv_only=self.conv_only,
        )

    # ------------------------------------------------------------------
    # key=value serialization (checkpoint header)
    # ------------------------------------------------------------------
    def to_items(self) -> List[Tuple[str, str]]:
        items = [
            ("model.variant", self.variant),
            ("model.num_classes", str(self.num_classes)),
            ("model.in_channels", str(self.in_channels)),
            ("model.num_skips", str(self.num_skips)),
            ("model.conv_only", str(self.conv_only).lower()),
            ("model.decoder_widths", ",".join(str(w) for w in self.decoder_widths)),
            ("model.img_size", str(self.img_size)),
        ]
        if self.encoder is not None:
            enc = self.encoder
            items.append(("model.encoder.stem_widths", ",".join(str(w) for w in enc.stem.widths)))
            for i, s in enumerate(enc.stages):
                fields = (s.width, s.depth, s.heads, s.key_dim, s.mlp_ratio, s.value_ratio)
                items.append((f"model.encoder.stage{i + 1}", ",".join(str(v) for v in fields)))
            items.append(("model.encoder.downsample_value_ratio", str(enc.downsample_value_ratio)))
            items.append(("model.encoder.downsample_mlp_ratio", str(enc.downsample_mlp_ratio)))
        return items

    @classmethod
    def from_items(cls, items: Dict[str, str]) -> "ModelConfig":
        try:
            encoder = None
            if "model.encoder.stem_widths" in items:
                stages = tuple(
                    StageConfig(*_ints(items[f"model.encoder.stage{i}"])) for i in (1, 2, 3)
                )
                encoder = EncoderConfig(
                    stem=StemConfig(widths=_ints(items["model.encoder.stem_widths"])),
                    stages=stages,
                    downsample_value_ratio=int(items["model.encoder.downsample_value_ratio"]),
                    downsample_mlp_ratio=int(items["model.encoder.downsample_mlp_ratio"]),
                )
            return cls(
                variant=items["model.variant"],
                num_classes=int(items["model.num_classes"]),
                in_channels=int(items["model.in_channels"]),
                num_skips=int(items["model.num_skips"]),
                conv_only=_bool(items["model.conv_only"]),
                decoder_widths=_ints(items["model.decoder_widths"]),
                img_size=int(items["model.img_size"]),
                encoder=encoder,
            )
        except KeyError as e:
            raise ConfigurationError(f"model config is missing key {e}") from e
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"model config has an invalid value: {e}") from e


class UpBlock(Module):
    """×2 bilinear upsample, then two 3×3 conv → BN → ReLU layers."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, name: str = "up"):
        super().__init__()
        self.conv1 = ConvBN(in_channels, out_channels, 3, rng, padding=1, activation="relu", name=f"{name}.conv1")
        self.conv2 = ConvBN(out_channels, out_channels, 3, rng, padding=1, activation="relu", name=f"{name}.conv2")

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        return self.conv2(self.conv1(F.bilinear_resize(x, 2 * h, 2 * w)))


class Decoder(Module):
    """Cascaded upsampling from 1/16 to full resolution.

    Skip levels: 1 → 1/2, 2 → adds 1/4, 3 → adds 1/8, 4 → the 1/16 input is
    the fused encoder map instead of a 1×1 projection of the stem output.
    """

    def __init__(self, config: ModelConfig, encoder_config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.num_skips = config.num_skips
        half_c, quarter_c, eighth_c, stem_c = encoder_config.stem.widths
        fused_c = encoder_config.fused_channels
        w1, w2, w3 = config.decoder_widths
        self.projection = (
            ConvBN(stem_c, fused_c, 1, rng, name="decoder.projection") if self.num_skips < 4 else None
        )
        self.up1 = UpBlock(fused_c, w1, rng, name="decoder.up1")
        self.up2 = UpBlock(w1 + (eighth_c if self.num_skips >= 3 else 0), w2, rng, name="decoder.up2")
        self.up3 = UpBlock(w2 + (quarter_c if self.num_skips >= 2 else 0), w3, rng, name="decoder.up3")
        self.head = Conv2dLayer(
            w3 + (half_c if self.num_skips >= 1 else 0),
            config.num_classes,
            3,
            rng,
            padding=1,
            bias=True,
            name="decoder.head",
        )

    def forward(self, enc: EncoderOutput) -> Tensor:
        if self.num_skips >= 4:
            if enc.fused_sixteenth is None:
                raise ConfigurationError("decoder with 4 skips needs the fused 1/16 encoder output")
            x = enc.fused_sixteenth
        else:
            x = self.projection(enc.stem_sixteenth)

        x = self.up1(x)
        if self.num_skips >= 3:
            x = self._join(x, enc.skip_eighth, "1/8")
        x = self.up2(x)
        if self.num_skips >= 2:
            x = self._join(x, enc.skip_quarter, "1/4")
        x = self.up3(x)
        if self.num_skips >= 1:
            x = self._join(x, enc.skip_half, "1/2")
        logits = self.head(x)
        _, _, h, w = logits.shape
        return F.bilinear_resize(logits, 2 * h, 2 * w)

    @staticmethod
    def _join(x: Tensor, skip: Tensor, level: str) -> Tensor:
        if x.shape[2:] != skip.shape[2:]:
            raise ConfigurationError(f"decoder stage {level}: upsampled map {x.shape} does not match skip {skip.shape}")
        return F.concat([x, skip], axis=1)


class LevitUNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        encoder_config = config.encoder_config()
        self.encoder = LeViTEncoder(encoder_config, config.img_size, rng)
        self.decoder = Decoder(config, encoder_config, rng)

    def forward(self, x: Tensor) -> Tensor:
        enc = self.encoder(x, include_transformer=self.config.num_skips >= 4)
        return self.decoder(enc)


def build_model(config: ModelConfig, seed: int = 0) -> LevitUNet:
    """Construct and initialize a model; initialization is a pure function of (config, seed)."""
    logger.debug(f"Building model config={config} seed={seed}")
    model = LevitUNet(config, seed)
    total = sum(p.size for p in model.parameters())
    logger.info(
        f"Built LeViT-UNet-{config.variant} (num_skips={config.num_skips}, conv_only={config.conv_only}) "
        f"with {total / 1e6:.2f} M parameters"
    )
    return model


def model_forward(model: LevitUNet, x: Tensor) -> Tensor:
    return model(x)


def predict_labels(model: LevitUNet, images: np.ndarray) -> np.ndarray:
    """Argmax labels for [n, h, w] or [n, c, h, w] images in [0, 1].

    Images are resized to the model's input size and the logits resized back
    before the argmax. Runs in eval mode without recording a graph.
    """
    cfg = model.config
    if images.ndim == 3:
        images = images[:, None]
    n, c, h, w = images.shape
    if c == 1 and cfg.in_channels > 1:
        images = np.repeat(images, cfg.in_channels, axis=1)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            x = F.bilinear_resize(Tensor(images.astype(np.float32)), cfg.img_size, cfg.img_size)
            logits = F.bilinear_resize(model(x), h, w)
    finally:
        model.train(was_training)
    return np.argmax(logits.data, axis=1).astype(np.uint8)
