import numpy as np
import pytest
from PIL import Image

from gmdiff.pngio import png_read, png_write, quantize


def test_round_trip_identity_on_quantized_values(tmp_path):
    rng = np.random.default_rng(0)
    img = quantize(rng.uniform(0, 1, (3, 16, 16)))
    path = tmp_path / "x.png"
    png_write(path, img)
    np.testing.assert_array_equal(png_read(path), img)


def test_quantize_is_idempotent():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (3, 8, 8))
    q = quantize(img)
    np.testing.assert_array_equal(quantize(q), q)


def test_rejects_16_bit_png(tmp_path):
    path = tmp_path / "deep.png"
    Image.fromarray((np.ones((8, 8)) * 1000).astype(np.uint16)).save(path)
    with pytest.raises(ValueError, match="bit depth"):
        png_read(path)


def test_rejects_grayscale_png(tmp_path):
    path = tmp_path / "gray.png"
    Image.fromarray((np.ones((8, 8)) * 128).astype(np.uint8), mode="L").save(path)
    with pytest.raises(ValueError, match="color type"):
        png_read(path)


def test_rejects_rgba_png(tmp_path):
    path = tmp_path / "rgba.png"
    Image.fromarray(np.zeros((8, 8, 4), dtype=np.uint8), mode="RGBA").save(path)
    with pytest.raises(ValueError, match="color type"):
        png_read(path)


def test_rejects_malformed_file(tmp_path):
    path = tmp_path / "junk.png"
    path.write_bytes(b"this is not a png at all, sorry")
    with pytest.raises(ValueError, match="not a PNG"):
        png_read(path)


def test_write_validates_input():
    with pytest.raises(ValueError):
        png_write("/tmp/never.png", np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        png_write("/tmp/never.png", np.full((3, 4, 4), 1.5))
