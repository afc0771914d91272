import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from ccfusion.errors import DataError, ImageDecodeError, ShapeError
from ccfusion.imagecore import (
    ColorImage,
    DegenerateMaskWarning,
    ImagePlane,
    SaliencyMask,
    SourcePair,
    crop_patches,
    load_color,
    load_grayscale,
    load_mask,
    load_ycbcr_planes,
    normalize,
    rgb_to_ycbcr,
    save_plane,
    save_ycbcr_planes,
    threshold_saliency_mask,
    ycbcr_to_rgb,
)


def plane(arr, tag="unit8"):
    return ImagePlane(np.asarray(arr, dtype=float), tag)


def test_plane_rejects_out_of_range_and_nonfinite():
    with pytest.raises(DataError):
        plane([[0, 256]])
    with pytest.raises(DataError):
        plane([[0.5, np.nan]], "unit")
    with pytest.raises(ShapeError):
        plane([1, 2, 3])


def test_plane_is_immutable():
    p = plane([[1, 2], [3, 4]])
    with pytest.raises(ValueError):
        p.pixels[0, 0] = 9


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(0, 255)))
def test_normalize_round_trip(px):
    p = ImagePlane(px, "unit8")
    back = normalize(normalize(p, "signed"), "unit8")
    np.testing.assert_allclose(back.pixels, px, atol=1e-9)


def test_mask_rejects_non_binary():
    with pytest.raises(DataError):
        SaliencyMask(np.array([[0.0, 0.5]]))
    m = SaliencyMask(np.array([[0.0, 1.0]]))
    np.testing.assert_array_equal(m.complement().m, [[1.0, 0.0]])


def test_pair_shape_mismatch():
    with pytest.raises(ShapeError):
        SourcePair("x", plane(np.zeros((4, 4))), plane(np.zeros((4, 5))))


def test_png_round_trip_and_decode_errors(tmp_path):
    px = np.arange(64, dtype=float).reshape(8, 8) * 3
    save_plane(tmp_path / "a.png", plane(px))
    np.testing.assert_array_equal(load_grayscale(tmp_path / "a.png").pixels, px)
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageDecodeError):
        load_grayscale(tmp_path / "junk.png")
    with pytest.raises(ImageDecodeError):
        load_grayscale(tmp_path / "missing.png")
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_color_loading_and_mask_loading(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (6, 6, 3), dtype=np.uint8)
    Image.fromarray(rgb, mode="RGB").save(tmp_path / "c.png")
    img = load_color(tmp_path / "c.png")
    assert isinstance(img, ColorImage)
    np.testing.assert_allclose(img.stack() * 255, rgb)
    Image.fromarray((np.eye(6) * 255).astype(np.uint8)).save(tmp_path / "m.png")
    m = load_mask(tmp_path / "m.png", plane(np.zeros((6, 6))))
    np.testing.assert_array_equal(m.m, np.eye(6))
    with pytest.raises(ShapeError):
        load_mask(tmp_path / "m.png", plane(np.zeros((5, 6))))


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (4, 5, 3)))
def test_ycbcr_round_trip_within_one_level(rgb):
    img = ColorImage.from_array(rgb / 255.0)
    back = ycbcr_to_rgb(rgb_to_ycbcr(img))
    assert np.abs(back.stack() - img.stack()).max() <= 1 / 255


def test_ycbcr_planes_file_round_trip(tmp_path):
    planes = [np.random.default_rng(k).integers(0, 256, (5, 6), dtype=np.uint8) for k in range(3)]
    save_ycbcr_planes(tmp_path / "p.tiff", planes)
    for a, b in zip(planes, load_ycbcr_planes(tmp_path / "p.tiff")):
        np.testing.assert_array_equal(a, b)


def test_threshold_mask_rules():
    px = np.arange(100, dtype=float).reshape(10, 10)
    assert threshold_saliency_mask(plane(px), 0.9).m.sum() == 10
    assert threshold_saliency_mask(plane(px), 0.0).m.all()
    with pytest.warns(DegenerateMaskWarning):
        m = threshold_saliency_mask(plane(np.full((4, 4), 7.0)), 0.5)
    assert m.m.sum() == 0
    with pytest.raises(ValueError):
        threshold_saliency_mask(plane(px), 1.5)


def test_largest_component():
    px = np.zeros((10, 10))
    px[0:2, 0:2] = 200
    px[5:9, 5:9] = 200
    m = threshold_saliency_mask(plane(px), 0.5, largest_component=True)
    assert m.m.sum() == 16 and m.m[6, 6] == 1


def test_crop_patches_aligned_and_seeded(toy_pairs):
    a = crop_patches(toy_pairs, 16, 10, seed=3)
    b = crop_patches(toy_pairs, 16, 10, seed=3)
    np.testing.assert_array_equal(a.ir, b.ir)
    for k in range(len(a)):
        pair = toy_pairs[a.pair_index[k]]
        y, x = a.offsets[k]
        np.testing.assert_array_equal(a.vis[k], pair.vis.pixels[y : y + 16, x : x + 16])
        np.testing.assert_array_equal(a.mask[k], pair.mask.m[y : y + 16, x : x + 16])
    assert set(a.pair_index[:4]) == {0, 1, 2, 3}
    with pytest.raises(ShapeError):
        crop_patches(toy_pairs, 33, 1, seed=0)
