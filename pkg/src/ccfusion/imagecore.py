"""Image and mask data model: loading, range normalization, YCbCr decoupling, patches."""

from __future__ import annotations

import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageSequence, UnidentifiedImageError
from scipy import ndimage

from ccfusion.errors import DataError, ImageDecodeError, ShapeError

RANGES = {
    "unit8": (0.0, 255.0),
    "unit": (0.0, 1.0),
    "signed": (-1.0, 1.0),
}

# BT.601 full-range (JFIF) luma/chroma matrix; chroma offset 0.5 on the [0, 1] scale.
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCC2RGB = np.linalg.inv(_RGB2YCC)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])

SUPPORTED_SUFFIXES = (".png", ".tif", ".tiff")


class DegenerateMaskWarning(UserWarning):
    pass


def _range_bounds(tag):
    try:
        return RANGES[tag]
    except KeyError:
        raise ValueError(f"unknown range tag {tag!r}; expected one of {sorted(RANGES)}") from None


@dataclass(frozen=True)
class ImagePlane:
    """Single-channel raster whose values stay inside the interval named by ``range_tag``."""

    pixels: np.ndarray
    range_tag: str = "unit8"

    def __post_init__(self):
        lo, hi = _range_bounds(self.range_tag)
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ShapeError(f"ImagePlane needs a 2-D array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError("ImagePlane must be at least 1x1")
        if not np.all(np.isfinite(px)):
            raise DataError("ImagePlane contains non-finite values")
        if px.min() < lo or px.max() > hi:
            raise DataError(
                f"pixel values [{px.min():.6g}, {px.max():.6g}] fall outside "
                f"{self.range_tag} range [{lo}, {hi}]"
            )
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def bounds(self):
        return _range_bounds(self.range_tag)


@dataclass(frozen=True)
class ColorImage:
    r: np.ndarray
    g: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        chans = [np.array(c, dtype=np.float64) for c in (self.r, self.g, self.b)]
        if len({c.shape for c in chans}) != 1 or chans[0].ndim != 2:
            raise ShapeError(f"color channels disagree: {[c.shape for c in chans]}")
        for name, c in zip("rgb", chans):
            c.setflags(write=False)
            object.__setattr__(self, name, c)

    @property
    def shape(self):
        return self.r.shape

    def stack(self):
        return np.stack([self.r, self.g, self.b], axis=-1)

    @classmethod
    def from_array(cls, rgb):
        rgb = np.asarray(rgb, dtype=np.float64)
        return cls(rgb[..., 0], rgb[..., 1], rgb[..., 2])


@dataclass(frozen=True)
class YCbCrImage:
    y: ImagePlane
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        if not (self.y.shape == np.shape(self.cb) == np.shape(self.cr)):
            raise ShapeError(
                f"YCbCr planes disagree: y {self.y.shape}, cb {np.shape(self.cb)}, cr {np.shape(self.cr)}"
            )


@dataclass(frozen=True)
class SaliencyMask:
    """Binary foreground mask; ``complement()`` is the background mask."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m)
        if m.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise DataError("mask entries must be exactly 0 or 1")
        m = m.astype(np.float64)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def shape(self):
        return self.m.shape

    def complement(self):
        return SaliencyMask(1.0 - self.m)

    def check_pairs_with(self, plane):
        if self.shape != plane.shape:
            raise ShapeError(f"mask shape {self.shape} does not match image shape {plane.shape}")


@dataclass(frozen=True)
class SourcePair:
    """One registered source pair.

    For medical data the ``ir`` slot holds the functional (PET/SPECT) luminance,
    ``vis`` holds the MRI and ``mask`` the MRI-segmented mask.
    """

    name: str
    ir: ImagePlane
    vis: ImagePlane
    mask: SaliencyMask | None = None

    def __post_init__(self):
        if self.ir.shape != self.vis.shape:
            raise ShapeError(f"pair {self.name!r}: ir {self.ir.shape} vs vis {self.vis.shape}")
        if self.mask is not None:
            self.mask.check_pairs_with(self.ir)


@dataclass
class PatchSet:
    """Aligned P x P patches stacked along axis 0, with provenance per patch."""

    ir: np.ndarray
    vis: np.ndarray
    mask: np.ndarray | None
    pair_index: np.ndarray
    offsets: np.ndarray
    range_tag: str = "unit8"
    pair_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.ir)

    @property
    def patch_size(self):
        return self.ir.shape[-1]


# --------------------------------------------------------------------------- I/O


def _decode(path):
    path = Path(path)
    if not path.is_file():
        raise ImageDecodeError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("P", "PA", "LA", "RGBA", "CMYK", "YCbCr"):
                im = im.convert("RGB" if im.mode != "LA" else "L")
            if im.mode not in ("L", "RGB", "1"):
                raise ImageDecodeError(f"{path}: unsupported raster mode {im.mode!r} (need 8-bit)")
            arr = np.asarray(im.convert("L") if im.mode == "1" else im)
    except ImageDecodeError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    if arr.size == 0 or min(arr.shape[:2]) == 0:
        raise ImageDecodeError(f"{path}: zero-sized image")
    return arr


def luma(rgb):
    """BT.601 luma of an 8-bit RGB array, rounded to integer levels."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return np.rint(rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114)


def load_grayscale(path):
    arr = _decode(path)
    if arr.ndim == 3:
        arr = luma(arr)
    return ImagePlane(np.clip(arr.astype(np.float64), 0, 255), "unit8")


def load_color(path):
    """Load a raster as ``ColorImage`` in [0, 1], or ``ImagePlane`` when it is single-channel."""
    arr = _decode(path)
    if arr.ndim == 2:
        return ImagePlane(arr.astype(np.float64), "unit8")
    return ColorImage.from_array(arr.astype(np.float64) / 255.0)


def load_mask(path, paired):
    arr = _decode(path).astype(np.float64)
    if arr.ndim == 3:
        arr = luma(arr)
    if arr.shape != paired.shape:
        raise ShapeError(f"{path}: mask shape {arr.shape} does not match image shape {paired.shape}")
    return SaliencyMask((arr / 255.0 > 0.5).astype(np.float64))


def atomic_write(path, write_fn, suffix=None):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=suffix or path.suffix)
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pil_format(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return "PNG"
    if suffix in (".tif", ".tiff"):
        return "TIFF"
    raise DataError(f"{path}: only PNG and TIFF outputs are supported")


def to_uint8(plane):
    return np.rint(normalize(plane, "unit8").pixels).astype(np.uint8)


def save_plane(path, plane):
    fmt = _pil_format(path)
    img = Image.fromarray(to_uint8(plane), mode="L")
    atomic_write(path, lambda tmp: img.save(tmp, format=fmt))


def save_mask(path, mask):
    fmt = _pil_format(path)
    img = Image.fromarray((mask.m * 255).astype(np.uint8), mode="L")
    atomic_write(path, lambda tmp: img.save(tmp, format=fmt))


def save_rgb(path, rgb_uint8):
    fmt = _pil_format(path)
    img = Image.fromarray(np.ascontiguousarray(rgb_uint8, dtype=np.uint8), mode="RGB")
    atomic_write(path, lambda tmp: img.save(tmp, format=fmt))


def save_ycbcr_planes(path, planes_uint8):
    """Three 8-bit planes (Y, Cb, Cr) as pages of one TIFF, so chroma survives without RGB rounding."""
    planes = [np.ascontiguousarray(p, dtype=np.uint8) for p in planes_uint8]
    if len(planes) != 3 or len({p.shape for p in planes}) != 1:
        raise ShapeError("need three equally shaped planes")
    pages = [Image.fromarray(p, mode="L") for p in planes]
    atomic_write(path, lambda tmp: pages[0].save(tmp, format="TIFF", save_all=True, append_images=pages[1:]))


def load_ycbcr_planes(path):
    try:
        with Image.open(path) as im:
            planes = [np.asarray(page.convert("L")).copy() for page in ImageSequence.Iterator(im)]
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode planes ({exc})") from exc
    if len(planes) != 3:
        raise ImageDecodeError(f"{path}: expected 3 planes, found {len(planes)}")
    return planes


def list_images(directory):
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)


# --------------------------------------------------------------------------- ranges


def normalize(img, target):
    """Affinely remap ``img`` from its own range onto ``target``."""
    lo, hi = img.bounds
    tlo, thi = _range_bounds(target)
    if target == img.range_tag:
        return img
    out = (img.pixels - lo) * ((thi - tlo) / (hi - lo)) + tlo
    return ImagePlane(np.clip(out, tlo, thi), target)


def denormalize(img):
    return normalize(img, "unit8")


# --------------------------------------------------------------------------- color


def rgb_to_ycbcr(img):
    ycc = img.stack() @ _RGB2YCC.T + _CHROMA_OFFSET
    return YCbCrImage(ImagePlane(np.clip(ycc[..., 0], 0.0, 1.0), "unit"), ycc[..., 1], ycc[..., 2])


def ycbcr_to_rgb(img):
    if not (img.y.shape == img.cb.shape == img.cr.shape):
        raise ShapeError("YCbCr planes disagree in shape")
    y = normalize(img.y, "unit").pixels
    ycc = np.stack([y, img.cb, img.cr], axis=-1) - _CHROMA_OFFSET
    return ColorImage.from_array(np.clip(ycc @ _YCC2RGB.T, 0.0, 1.0))


def color_to_uint8(img):
    return np.rint(np.clip(img.stack(), 0.0, 1.0) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------- masks


def threshold_saliency_mask(ir, quantile, largest_component=False):
    """Mark pixels brighter than the given intensity quantile of ``ir``.

    A constant image yields an all-zero mask and a ``DegenerateMaskWarning``.
    """
    if not 0.0 <= quantile < 1.0:
        raise ValueError(f"quantile must lie in [0, 1), got {quantile}")
    px = ir.pixels
    if px.min() == px.max():
        warnings.warn("constant image: no pixel exceeds its quantile", DegenerateMaskWarning, stacklevel=2)
        return SaliencyMask(np.zeros_like(px))
    if quantile == 0.0:
        return SaliencyMask(np.ones_like(px))
    m = px > np.quantile(px, quantile)
    if largest_component and m.any():
        labels, n = ndimage.label(m)
        sizes = ndimage.sum_labels(m, labels, index=np.arange(1, n + 1))
        m = labels == (1 + int(np.argmax(sizes)))
    return SaliencyMask(m.astype(np.float64))


# --------------------------------------------------------------------------- patches


def crop_patches(pairs, patch_size, count, seed):
    """Crop ``count`` aligned patches from one pair or a list of pairs.

    Pairs are visited round-robin over a seeded permutation; offsets are uniform
    over the valid positions of the chosen pair. The same offset is applied to
    every plane of a pair.
    """
    if isinstance(pairs, SourcePair):
        pairs = [pairs]
    pairs = list(pairs)
    if not pairs:
        raise DataError("no source pairs to crop from")
    if count < 1:
        raise ValueError("count must be positive")
    P = int(patch_size)
    for p in pairs:
        h, w = p.ir.shape
        if P > min(h, w):
            raise ShapeError(f"patch size {P} exceeds extent {h}x{w} of pair {p.name!r}")
    tags = {p.ir.range_tag for p in pairs} | {p.vis.range_tag for p in pairs}
    if len(tags) != 1:
        raise DataError(f"pairs mix range tags {sorted(tags)}")
    has_mask = all(p.mask is not None for p in pairs)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    idx = order[np.arange(count) % len(pairs)]
    offsets = np.empty((count, 2), dtype=np.int64)
    ir = np.empty((count, P, P))
    vis = np.empty((count, P, P))
    mask = np.empty((count, P, P)) if has_mask else None
    for k, pi in enumerate(idx):
        pair = pairs[pi]
        h, w = pair.ir.shape
        y = int(rng.integers(0, h - P + 1))
        x = int(rng.integers(0, w - P + 1))
        offsets[k] = (y, x)
        ir[k] = pair.ir.pixels[y : y + P, x : x + P]
        vis[k] = pair.vis.pixels[y : y + P, x : x + P]
        if has_mask:
            mask[k] = pair.mask.m[y : y + P, x : x + P]
    return PatchSet(
        ir=ir,
        vis=vis,
        mask=mask,
        pair_index=idx.astype(np.int64),
        offsets=offsets,
        range_tag=tags.pop(),
        pair_names=[p.name for p in pairs],
    )


def stack_planes(planes: Sequence[ImagePlane]):
    return np.stack([p.pixels for p in planes])
