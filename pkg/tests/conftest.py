import numpy as np
import pytest

from avflow.codec import CodecConfig, PixelVideo
from avflow.tokens import PatchConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def codec_cfg():
    return CodecConfig()


@pytest.fixture
def patch_cfg():
    return PatchConfig()


def random_video(rng, frames=8, size=64, fps=8):
    data = rng.uniform(-1.0, 1.0, size=(frames, size, size, 3)).astype(np.float32)
    return PixelVideo(data, fps=fps)


@pytest.fixture
def video(rng):
    return random_video(rng)
