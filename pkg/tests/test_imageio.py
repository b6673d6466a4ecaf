import numpy as np
import pytest
from PIL import Image

from smoothsparse.imageio import ImageFormatError, load_image, load_image_dir, save_image


def test_npy_round_trip_bit_exact(tmp_path, rng):
    x = rng.standard_normal((7, 9))
    save_image(tmp_path / "x.npy", x)
    y = load_image(tmp_path / "x.npy")
    assert y.dtype == np.float64 and np.array_equal(x, y)


def test_png_8bit_round_trip(tmp_path, rng):
    x = rng.uniform(0, 1, (16, 16))
    save_image(tmp_path / "x.png", x)
    assert np.max(np.abs(load_image(tmp_path / "x.png") - x)) <= 1 / 510 + 1e-12


def test_png_clamps(tmp_path):
    save_image(tmp_path / "x.png", np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(load_image(tmp_path / "x.png"), [[0.0, 1.0]])


def test_pgm(tmp_path, rng):
    x = rng.uniform(0, 1, (5, 6))
    save_image(tmp_path / "x.pgm", x)
    assert np.max(np.abs(load_image(tmp_path / "x.pgm") - x)) <= 1 / 510 + 1e-12


def test_16bit_png(tmp_path):
    arr = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "x.png")
    out = load_image(tmp_path / "x.png")
    assert out[0, 1] == 1.0 and out[0, 0] == 0.0
    assert out[1, 0] == pytest.approx(32768 / 65535)


def test_colour_to_luminance(tmp_path):
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[0, 1] = (0, 255, 0)
    rgb[1, 0] = (0, 0, 255)
    rgb[1, 1] = (255, 255, 255)
    Image.fromarray(rgb).save(tmp_path / "c.png")
    np.testing.assert_allclose(load_image(tmp_path / "c.png"), [[0.299, 0.587], [0.114, 1.0]])


def test_unsupported_format(tmp_path):
    (tmp_path / "x.xyz").write_text("nope")
    with pytest.raises(ImageFormatError, match="supported formats"):
        load_image(tmp_path / "x.xyz")
    (tmp_path / "bad.png").write_text("not a png")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "bad.png")
    with pytest.raises(ImageFormatError):
        save_image(tmp_path / "x.gif", np.zeros((2, 2)))


def test_npy_must_be_2d(tmp_path):
    np.save(tmp_path / "x.npy", np.zeros((2, 2, 2)))
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "x.npy")


def test_load_dir(tmp_path, rng):
    for i in range(3):
        save_image(tmp_path / f"{i}.png", rng.uniform(0, 1, (4, 4)))
    (tmp_path / "notes.txt").write_text("skip me")
    assert len(load_image_dir(tmp_path)) == 3
    with pytest.raises(ImageFormatError):
        load_image_dir(tmp_path / "missing")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ImageFormatError):
        load_image_dir(empty)
