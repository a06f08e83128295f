"""Shared fixtures: one small float/quantized model pair reused across files."""

import numpy as np
import pytest

from vimq.config import ModelConfig
from vimq.model import quantize_model, random_images, random_model


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    # 64-wide, 2 blocks, 32x32 inputs (5 tokens): big enough to exercise every
    # engine, small enough to quantize in well under a second
    return ModelConfig(variant="tiny", d_model=64, depth=2, n_classes=16, calib_samples=2)


@pytest.fixture(scope="session")
def float_model(tiny_cfg):
    return random_model(tiny_cfg, seed=7)


@pytest.fixture(scope="session")
def calib_images() -> np.ndarray:
    return random_images(2, 32, seed=11)


@pytest.fixture(scope="session")
def qmodel(float_model, calib_images):
    qm, _ = quantize_model(float_model, calib_images)
    return qm
