import numpy as np
import png
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anchorsift.anchors import (
    MAX_GAIN,
    adaptive_gain,
    normalize_anchor,
    read_anchor,
    to_reflectance,
    to_uint8,
    write_png8,
)
from anchorsift.errors import EmptyImage


def uniform(v, shape=(3, 4, 3)):
    return np.full(shape, v)


def test_to_reflectance_examples():
    assert np.all(to_reflectance(uniform(5000)) == 0.5)
    assert np.all(to_reflectance(uniform(12000)) == 1.0)  # clipped, then divided
    assert np.all(to_reflectance(uniform(0)) == 0.0)


def test_to_reflectance_rejects_empty_and_negative():
    with pytest.raises(EmptyImage):
        to_reflectance(np.zeros((0, 4, 3)))
    with pytest.raises(ValueError):
        to_reflectance(uniform(-1))


def test_gain_boundary_is_strict():
    out = adaptive_gain(uniform(0.25))
    assert out.applied_gain == 1.0
    assert np.all(out.values == 0.25)


@pytest.mark.parametrize("level,gain,value", [(0.1, 5.0, 0.5), (0.04, 8.0, 0.32), (0.2, 2.5, 0.5)])
def test_gain_examples(level, gain, value):
    out = adaptive_gain(uniform(level))
    assert out.applied_gain == pytest.approx(gain, abs=1e-12)
    assert np.allclose(out.values, value, atol=1e-12)


def test_all_zero_image_takes_max_gain():
    out = adaptive_gain(uniform(0.0))
    assert out.applied_gain == MAX_GAIN
    assert np.all(out.values == 0.0)


def test_gain_clips_bright_pixels():
    img = np.zeros((2, 2, 3))
    img[0, 0] = 0.9  # mean 0.225 -> gain 0.5 / 0.225
    out = adaptive_gain(img)
    assert out.applied_gain == pytest.approx(0.5 / 0.225)
    assert out.values.max() == 1.0


@pytest.mark.parametrize("raw,gain,value", [(2500, 1.0, 0.25), (1000, 5.0, 0.5), (10000, 1.0, 1.0)])
def test_normalize_anchor_examples(raw, gain, value):
    out = normalize_anchor(uniform(raw))
    assert out.applied_gain == pytest.approx(gain)
    assert np.allclose(out.values, value)


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)), elements=st.floats(0, 1)))
def test_gain_properties(img):
    out = adaptive_gain(img)
    m = img.mean()
    assert 1.0 <= out.applied_gain <= MAX_GAIN
    assert out.values.min() >= 0.0 and out.values.max() <= 1.0
    if m >= 0.25:
        assert out.applied_gain == 1.0
        assert np.array_equal(out.values, img)
    else:
        assert out.applied_gain * m >= 0.5 - 1e-9 or out.applied_gain == MAX_GAIN


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_darker_never_gets_less_gain(a, b):
    lo, hi = sorted((a, b))
    assert adaptive_gain(uniform(lo)).applied_gain >= adaptive_gain(uniform(hi)).applied_gain


def test_to_uint8_rounds_half_up():
    assert to_uint8(np.array([0.0, 0.5 / 255, 1.5 / 255, 1.0])).tolist() == [0, 1, 2, 255]


def test_raw_grid_grey_and_rgb(tmp_path):
    grey = tmp_path / "g.txt"
    grey.write_text("2 2\n0 1000\n2000 3000\n")
    arr = read_anchor(grey)
    assert arr.shape == (2, 2, 3)
    assert arr[1, 1].tolist() == [3000, 3000, 3000]
    rgb = tmp_path / "c.txt"
    rgb.write_text("1 1\n10 20 30\n")
    assert read_anchor(rgb)[0, 0].tolist() == [10, 20, 30]
    bad = tmp_path / "b.txt"
    bad.write_text("2 1\n1 2 3\n")
    with pytest.raises(ValueError):
        read_anchor(bad)


def test_sixteen_bit_png_input(tmp_path):
    p = tmp_path / "s2.png"
    rows = [[1000, 1000, 1000, 1000, 1000, 1000]]
    with open(p, "wb") as fh:
        png.Writer(width=2, height=1, greyscale=False, bitdepth=16).write(fh, rows)
    arr = read_anchor(p)
    assert arr.shape == (1, 2, 3) and arr.max() == 1000
    assert normalize_anchor(arr).applied_gain == pytest.approx(5.0)


def test_write_png8(tmp_path):
    out = normalize_anchor(uniform(1000, (2, 3, 3)))
    write_png8(out.values, tmp_path / "o.png")
    w, h, rows, info = png.Reader(filename=str(tmp_path / "o.png")).asDirect()
    assert (w, h, info["bitdepth"]) == (3, 2, 8)
    assert {v for r in rows for v in r} == {128}  # 0.5 * 255 = 127.5 rounds up
