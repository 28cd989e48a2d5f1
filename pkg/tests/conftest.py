import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_slice_dir(root, names_to_pixels):
    """Create a slice directory from {filename: 2D uint8 array}."""
    root.mkdir(parents=True, exist_ok=True)
    for name, pixels in names_to_pixels.items():
        Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(root / name)
    return root


def gray(value, shape=(8, 8)):
    return np.full(shape, value, dtype=np.uint8)
