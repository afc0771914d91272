"""Fusion-quality metrics: EN, AG, SF, SD, SCD, VIF(F) and SSIM."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from ccfusion.errors import MetricError, ShapeError, UndefinedCorrelationError
from ccfusion.imagecore import RANGES, ImagePlane

METRIC_NAMES = ("EN", "AG", "SF", "SD", "SCD", "VIF")
CSV_COLUMNS = ("pair_id", "en", "ag", "sf", "sd", "scd", "vif")


def _pixels(img):
    if isinstance(img, ImagePlane):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def _bounds(img):
    return img.bounds if isinstance(img, ImagePlane) else RANGES["unit8"]


def _same_shape(*imgs):
    shapes = {_pixels(i).shape for i in imgs}
    if len(shapes) != 1:
        raise ShapeError(f"metric operands disagree in shape: {sorted(shapes)}")


def entropy(img, levels=256):
    """Shannon entropy (bits) of the grey-level histogram.

    Planes are requantized affinely onto ``levels`` bins spanning their declared range;
    raw arrays are taken as 8-bit.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    px = _pixels(img)
    if px.size == 0:
        raise MetricError("EN", "empty image")
    lo, hi = _bounds(img)
    q = np.clip(np.rint((px - lo) / (hi - lo) * (levels - 1)), 0, levels - 1).astype(np.int64)
    p = np.bincount(q.ravel(), minlength=levels) / q.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def average_gradient(img):
    """(|grad_h|_1 + |grad_v|_1) / (H W) with interior forward differences."""
    px = _pixels(img)
    h, w = px.shape
    gh = np.abs(np.diff(px, axis=1)).sum() if w > 1 else 0.0
    gv = np.abs(np.diff(px, axis=0)).sum() if h > 1 else 0.0
    return float((gh + gv) / (h * w))


def spatial_frequency_components(img):
    """Return ``(sf, row_frequency, column_frequency)``."""
    px = _pixels(img)
    m, n = px.shape
    if m < 2 or n < 2:
        raise MetricError("SF", f"needs at least 2x2 pixels, got {m}x{n}")
    hf = math.sqrt(np.square(np.diff(px, axis=1)).sum() / (m * n))
    vf = math.sqrt(np.square(np.diff(px, axis=0)).sum() / (m * n))
    return math.sqrt(hf * hf + vf * vf), hf, vf


def spatial_frequency(img):
    return spatial_frequency_components(img)[0]


def standard_deviation(img, sqrt=False):
    """Mean squared deviation from the mean; ``sqrt=True`` gives the conventional SD."""
    px = _pixels(img)
    if px.size == 0:
        raise MetricError("SD", "empty image")
    val = float(np.square(px - px.mean()).mean())
    return math.sqrt(val) if sqrt else val


def correlation(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float((xc * xc).sum())
    syy = float((yc * yc).sum())
    tiny = np.finfo(np.float64).tiny
    if sxx <= tiny or syy <= tiny:
        raise UndefinedCorrelationError()
    return float((xc * yc).sum() / math.sqrt(sxx * syy))


def scd_components(v, r, f):
    """Return ``(scd, corr(v, f - r), corr(r, f - v))``."""
    _same_shape(v, r, f)
    v, r, f = _pixels(v), _pixels(r), _pixels(f)
    if f.min() == f.max():
        # a flat fused image transfers nothing; the difference terms collapse onto -r and -v
        raise UndefinedCorrelationError("fused image is constant")
    a = correlation(v, f - r)
    b = correlation(r, f - v)
    return a + b, a, b


def scd(v, r, f):
    return scd_components(v, r, f)[0]


# --------------------------------------------------------------------------- VIFF

VIFF_SCALE_WEIGHTS = np.array([1.0, 0.0, 0.15, 1.0]) / 2.15
VIFF_NOISE_FRACTION = 0.005
_VIFF_FLOOR = 1e-10
_VIFF_C = 1e-7
VIFF_MIN_EXTENT = 8


def gaussian_window(size, sigma):
    """Normalized 2-D Gaussian (MATLAB ``fspecial('gaussian')`` semantics)."""
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half : half + 1, -half : half + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def _viff_channel(ref, dist, noise_var):
    """Per-scale (information-with-distortion, information-without, gain) maps."""
    out = []
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = gaussian_window(n, n / 5.0)
        if scale > 1:
            ref = ndimage.correlate(ref, win, mode="reflect")[::2, ::2]
            dist = ndimage.correlate(dist, win, mode="reflect")[::2, ::2]
        mu1 = ndimage.correlate(ref, win, mode="reflect")
        mu2 = ndimage.correlate(dist, win, mode="reflect")
        s1 = ndimage.correlate(ref * ref, win, mode="reflect") - mu1 * mu1
        s2 = ndimage.correlate(dist * dist, win, mode="reflect") - mu2 * mu2
        s12 = ndimage.correlate(ref * dist, win, mode="reflect") - mu1 * mu2
        s1 = np.maximum(s1, 0.0)
        s2 = np.maximum(s2, 0.0)

        g = s12 / (s1 + _VIFF_FLOOR)
        sv = s2 - g * s12
        flat1 = s1 < _VIFF_FLOOR
        g[flat1] = 0.0
        sv[flat1] = s2[flat1]
        s1[flat1] = 0.0
        flat2 = s2 < _VIFF_FLOOR
        g[flat2] = 0.0
        sv[flat2] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, _VIFF_FLOOR)

        vid = np.log10(1.0 + g * g * s1 / (sv + noise_var))
        vind = np.log10(1.0 + s1 / noise_var)
        out.append((vid, vind, g))
    return out


def vif_fusion_scales(v, r, f):
    """Per-scale VIFF ratios (before the scale weighting)."""
    _same_shape(v, r, f)
    lo, hi = _bounds(f)
    px_v, px_r, px_f = _pixels(v), _pixels(r), _pixels(f)
    if min(px_f.shape) < VIFF_MIN_EXTENT:
        raise MetricError("VIF", f"image {px_f.shape} smaller than the coarsest scale ({VIFF_MIN_EXTENT} px)")
    noise_var = VIFF_NOISE_FRACTION * (hi - lo) ** 2
    chan_v = _viff_channel(px_v, px_f, noise_var)
    chan_r = _viff_channel(px_r, px_f, noise_var)
    ratios = []
    for (vid1, vind1, g1), (vid2, vind2, g2) in zip(chan_v, chan_r):
        pick_v = g1 < g2
        vid = np.where(pick_v, vid1, vid2)
        vind = np.where(pick_v, vind1, vind2)
        ratios.append(float((vid + _VIFF_C).sum() / (vind + _VIFF_C).sum()))
    return np.array(ratios)


def vif_fusion(v, r, f):
    """Multi-scale fusion VIF: weighted sum over four scales of block-summed VID/VIND."""
    return float(VIFF_SCALE_WEIGHTS @ vif_fusion_scales(v, r, f))


# --------------------------------------------------------------------------- SSIM


def _gauss_kernel_torch(size, sigma, dtype, device=None):
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_torch(x, y, data_range=2.0, window_size=11, sigma=1.5, reduction="mean"):
    """Differentiable SSIM over (B, 1, H, W) batches using valid Gaussian windows.

    ``reduction="none"`` returns one mean-SSIM value per batch element.
    """
    if x.shape != y.shape:
        raise ShapeError(f"SSIM operands disagree: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-1] < window_size or x.shape[-2] < window_size:
        raise ShapeError(f"image {tuple(x.shape[-2:])} smaller than the {window_size}x{window_size} SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = _gauss_kernel_torch(window_size, sigma, x.dtype, x.device)
    gh = g.view(1, 1, 1, -1)
    gv = g.view(1, 1, -1, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, gh), gv)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x**2
    syy = blur(y * y) - mu_y**2
    sxy = blur(x * y) - mu_x * mu_y
    smap = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    per_item = smap.flatten(1).mean(dim=1)
    return per_item if reduction == "none" else per_item.mean()


def ssim(x, y, data_range=None, window_size=11):
    """Mean SSIM of two planes (11x11 Gaussian window, sigma 1.5)."""
    _same_shape(x, y)
    if data_range is None:
        lo, hi = _bounds(x)
        data_range = hi - lo
    tx = torch.from_numpy(np.array(_pixels(x)))[None, None]
    ty = torch.from_numpy(np.array(_pixels(y)))[None, None]
    return float(ssim_torch(tx, ty, data_range=data_range, window_size=window_size))


# --------------------------------------------------------------------------- reports


@dataclass(frozen=True)
class MetricReport:
    en: float
    ag: float
    sf: float
    sd: float
    scd: float
    vif: float
    sf_h: float
    sf_v: float
    scd_v: float
    scd_r: float

    def headline(self):
        return {"en": self.en, "ag": self.ag, "sf": self.sf, "sd": self.sd, "scd": self.scd, "vif": self.vif}

    def csv_row(self, pair_id):
        return [str(pair_id)] + [f"{val:.6f}" for val in self.headline().values()]


def _guard(name, fn, *args):
    try:
        return fn(*args)
    except MetricError as exc:
        if exc.metric == name:
            raise
        raise MetricError(name, str(exc)) from exc
    except (ValueError, ShapeError) as exc:
        raise MetricError(name, str(exc)) from exc


def evaluate_triple(v, r, f):
    """All six metrics for one (visible, infrared, fused) triple, or a ``MetricError``."""
    _same_shape(v, r, f)
    en = _guard("EN", entropy, f)
    ag = _guard("AG", average_gradient, f)
    sf, sf_h, sf_v = _guard("SF", spatial_frequency_components, f)
    sd = _guard("SD", standard_deviation, f)
    scd_val, scd_v, scd_r = _guard("SCD", scd_components, v, r, f)
    vif = _guard("VIF", vif_fusion, v, r, f)
    return MetricReport(en, ag, sf, sd, scd_val, vif, sf_h, sf_v, scd_v, scd_r)


def evaluate_batch(triples):
    return [evaluate_triple(*t) for t in triples]


def summary_row(reports):
    """``mean±std`` per headline metric (population std)."""
    row = ["mean±std"]
    for f in fields(MetricReport)[:6]:
        vals = np.array([getattr(r, f.name) for r in reports], dtype=np.float64)
        if vals.size:
            row.append(f"{vals.mean():.6f}±{vals.std():.6f}")
        else:
            row.append("nan")
    return row


def reports_to_csv(rows):
    """Serialize ``(pair_id, MetricReport | MetricError)`` rows plus the summary row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    ok = []
    for pair_id, item in rows:
        if isinstance(item, MetricReport):
            writer.writerow(item.csv_row(pair_id))
            ok.append(item)
        else:
            marker = f"error:{getattr(item, 'metric', 'unknown')}"
            writer.writerow([str(pair_id)] + [marker] * 6)
    writer.writerow(summary_row(ok))
    return buf.getvalue()
