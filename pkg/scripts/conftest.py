"""Shared fixtures: a miniature LeViT-UNet small enough for finite differences."""

import sys
from pathlib import Path

import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from src.levit_unet.encoder import EncoderConfig, StageConfig, StemConfig  # noqa: E402
from src.levit_unet.model import ModelConfig  # noqa: E402


def tiny_encoder() -> EncoderConfig:
    return EncoderConfig(
        stem=StemConfig(widths=(4, 4, 8, 8)),
        stages=(StageConfig(8, 1, 2, 4), StageConfig(8, 1, 2, 4), StageConfig(8, 1, 2, 4)),
        downsample_value_ratio=2,
        downsample_mlp_ratio=2,
    )


def tiny_model_config(**overrides) -> ModelConfig:
    fields = dict(
        variant="custom",
        num_classes=3,
        in_channels=1,
        num_skips=4,
        decoder_widths=(16, 8, 8),
        img_size=32,
        encoder=tiny_encoder(),
    )
    fields.update(overrides)
    return ModelConfig(**fields)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()
