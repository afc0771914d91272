"""Training objectives: adaptive structure/intensity loss and coupled contrastive terms.

Image arguments are tensors of shape (B, 1, H, W) (or (H, W), promoted to a batch of one)
holding values in the signed range [-1, 1], or ``ImagePlane`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from ccfusion.adaptive_weights import AdaptiveWeights
from ccfusion.backbone import FeaturePyramid
from ccfusion.errors import ShapeError
from ccfusion.imagecore import ImagePlane, SaliencyMask, normalize
from ccfusion.metrics import ssim_torch

DEFAULT_ALPHA = 20.0
DEFAULT_LAYER_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
DENOMINATOR_FLOOR = 1e-12
SIGNED_RANGE = 2.0


def as_batch(x, dtype=None):
    if isinstance(x, ImagePlane):
        x = torch.from_numpy(np.array(normalize(x, "signed").pixels))
    elif isinstance(x, SaliencyMask):
        x = torch.from_numpy(np.array(x.m))
    elif isinstance(x, np.ndarray):
        x = torch.from_numpy(np.array(x))
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return x.to(dtype) if dtype is not None else x


def _weight_vector(w, attr, batch, like):
    if isinstance(w, AdaptiveWeights):
        vals = [getattr(w, attr)] * batch
    elif isinstance(w, dict):
        return w[attr].to(like.dtype).reshape(-1)
    else:
        vals = [getattr(item, attr) for item in w]
        if len(vals) != batch:
            raise ShapeError(f"{len(vals)} weight sets for a batch of {batch}")
    return torch.tensor(vals, dtype=like.dtype, device=like.device)


def stack_weights(weights: Sequence[AdaptiveWeights]):
    arr = torch.tensor([w.as_tuple() for w in weights], dtype=torch.float64)
    return {k: arr[:, i] for i, k in enumerate(("sigma_a", "sigma_b", "gamma_a", "gamma_b"))}


def _check(v, r, f):
    if not (v.shape == r.shape == f.shape):
        raise ShapeError(f"loss operands disagree: {tuple(v.shape)}, {tuple(r.shape)}, {tuple(f.shape)}")


def structure_loss(v, r, f, w, data_range=SIGNED_RANGE, window_size=11):
    """sigma_a (1 - SSIM(v, f)) + sigma_b (1 - SSIM(r, f)), averaged over the batch."""
    v, r, f = as_batch(v), as_batch(r), as_batch(f)
    v, r = v.to(f.dtype), r.to(f.dtype)
    _check(v, r, f)
    b = f.shape[0]
    s_a = _weight_vector(w, "sigma_a", b, f)
    s_b = _weight_vector(w, "sigma_b", b, f)
    ssim_v = ssim_torch(v, f, data_range, window_size, reduction="none")
    ssim_r = ssim_torch(r, f, data_range, window_size, reduction="none")
    return (s_a * (1 - ssim_v) + s_b * (1 - ssim_r)).mean()


def intensity_loss(v, r, f, w):
    """gamma_a MSE(v, f) + gamma_b MSE(r, f), averaged over the batch."""
    v, r, f = as_batch(v), as_batch(r), as_batch(f)
    v, r = v.to(f.dtype), r.to(f.dtype)
    _check(v, r, f)
    b = f.shape[0]
    g_a = _weight_vector(w, "gamma_a", b, f)
    g_b = _weight_vector(w, "gamma_b", b, f)
    mse_v = (v - f).pow(2).flatten(1).mean(1)
    mse_r = (r - f).pow(2).flatten(1).mean(1)
    return (g_a * mse_v + g_b * mse_r).mean()


def pixel_loss(v, r, f, w, alpha=DEFAULT_ALPHA, window_size=11):
    return alpha * structure_loss(v, r, f, w, window_size=window_size) + intensity_loss(v, r, f, w)


# --------------------------------------------------------------------------- contrastive


@dataclass
class ContrastiveBatch:
    anchor_taps: FeaturePyramid
    positive_taps: FeaturePyramid
    negative_taps: list
    layer_weights: Sequence[float] = DEFAULT_LAYER_WEIGHTS

    def __post_init__(self):
        n = len(self.anchor_taps)
        if not self.negative_taps:
            raise ValueError("at least one negative is required")
        for pyr in [self.positive_taps, *self.negative_taps]:
            if len(pyr) != n or pyr.shapes != self.anchor_taps.shapes:
                raise ShapeError("contrastive pyramids are not tap-aligned")
        if len(self.layer_weights) != n:
            raise ValueError(f"{len(self.layer_weights)} layer weights for {n} taps")
        if any(wi < 0 for wi in self.layer_weights):
            raise ValueError("layer weights must be non-negative")


@dataclass
class ContrastiveResult:
    value: torch.Tensor
    degenerate: bool = False
    per_layer: list = field(default_factory=list)


def _mean_abs(a, b):
    return (a - b).abs().flatten(1).mean(1)


def contrastive_term(batch: ContrastiveBatch, eps=DENOMINATOR_FLOOR):
    """sum_i w_i |a_i - p_i|_1 / sum_m |a_i - n_i^m|_1, with |.|_1 the mean absolute difference.

    Computed per batch element and averaged. A layer whose denominator falls below
    ``eps`` is floored and flags the result as degenerate.
    """
    total = 0.0
    degenerate = False
    per_layer = []
    for i, wi in enumerate(batch.layer_weights):
        a = batch.anchor_taps.levels[i]
        num = _mean_abs(a, batch.positive_taps.levels[i])
        den = sum(_mean_abs(a, neg.levels[i]) for neg in batch.negative_taps)
        if bool((den < eps).any()):
            degenerate = True
        ratio = num / den.clamp_min(eps)
        per_layer.append(ratio.detach())
        total = total + wi * ratio
    value = total.mean() if torch.is_tensor(total) else torch.tensor(0.0)
    return ContrastiveResult(value, degenerate, per_layer)


def _masked_taps(backbone, images, masks):
    """One backbone pass over a list of (B,1,H,W) images, each multiplied by its mask first."""
    sizes = [t.shape[0] for t in images]
    x = torch.cat([img * m for img, m in zip(images, masks)], dim=0)
    pyr = backbone.contrastive_taps(x)
    out = []
    start = 0
    for n in sizes:
        out.append(FeaturePyramid([lvl[start : start + n] for lvl in pyr.levels], pyr.tap_names))
        start += n
    return out


def _contrast_pair(backbone, f, pos_fg, neg_fg, pos_bg, neg_bg, mask, layer_weights):
    """Foreground term (anchor f*M) and background term (anchor f*(1-M))."""
    comp = 1.0 - mask
    bb_dtype = next(backbone.parameters()).dtype
    f = f.to(bb_dtype)
    mask, comp = mask.to(bb_dtype), comp.to(bb_dtype)
    with torch.no_grad():
        fixed = [pos_fg] + list(neg_fg) + [pos_bg] + list(neg_bg)
        fixed = [t.to(bb_dtype) for t in fixed]
        masks = [mask] * (1 + len(neg_fg)) + [comp] * (1 + len(neg_bg))
        taps = _masked_taps(backbone, fixed, masks)
    m = len(neg_fg)
    anchors = _masked_taps(backbone, [f, f], [mask, comp])
    fg = contrastive_term(ContrastiveBatch(anchors[0], taps[0], taps[1 : 1 + m], layer_weights))
    bg = contrastive_term(ContrastiveBatch(anchors[1], taps[1 + m], taps[2 + m :], layer_weights))
    return fg, bg


def coupled_contrastive(backbone, f, i_r, i_v, mask, vis_negatives=None, ir_negatives=None, layer_weights=DEFAULT_LAYER_WEIGHTS):
    """Return ``(l_ir, l_vis)`` ContrastiveResults.

    l_ir: anchor G(f*M), positive G(i_r*M), negatives G(vis_m*M).
    l_vis: anchor G(f*(1-M)), positive G(i_v*(1-M)), negatives G(ir_m*(1-M)).
    Negative lists default to the co-located opposite source alone; by convention their
    first entry is the co-located patch.
    """
    f = as_batch(f)
    i_r, i_v, mask = as_batch(i_r, f.dtype), as_batch(i_v, f.dtype), as_batch(mask, f.dtype)
    vis_negatives = [i_v] if vis_negatives is None else [as_batch(t, f.dtype) for t in vis_negatives]
    ir_negatives = [i_r] if ir_negatives is None else [as_batch(t, f.dtype) for t in ir_negatives]
    _check(i_r, i_v, f)
    if mask.shape != f.shape:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match images {tuple(f.shape)}")
    return _contrast_pair(backbone, f, i_r, vis_negatives, i_v, ir_negatives, mask, layer_weights)


def medical_contrastive(backbone, f, i_mri, i_fun, m_m, fun_negatives=None, mri_negatives=None, layer_weights=DEFAULT_LAYER_WEIGHTS):
    """Return ``(l_mri, l_fun)``: the coupled construction with the MRI-segmented mask M_m
    (MRI positive on M_m) and its complement M_f = 1 - M_m (functional positive on M_f)."""
    return coupled_contrastive(
        backbone,
        f,
        i_r=i_mri,
        i_v=i_fun,
        mask=m_m,
        vis_negatives=fun_negatives,
        ir_negatives=mri_negatives,
        layer_weights=layer_weights,
    )


# --------------------------------------------------------------------------- total


@dataclass
class LossBreakdown:
    l_s: torch.Tensor
    l_n: torch.Tensor
    l_p: torch.Tensor
    l_ir: torch.Tensor
    l_vis: torch.Tensor
    l_total: torch.Tensor
    alpha: float
    mode: str = "ivif"
    degenerate: bool = False

    @property
    def contrastive_names(self):
        return ("l_mri", "l_fun") if self.mode == "medical" else ("l_ir", "l_vis")

    def values(self):
        a, b = self.contrastive_names
        return {
            "l_s": float(self.l_s.detach()),
            "l_n": float(self.l_n.detach()),
            "l_p": float(self.l_p.detach()),
            a: float(self.l_ir.detach()),
            b: float(self.l_vis.detach()),
            "l_total": float(self.l_total.detach()),
        }


def total_loss(
    v,
    r,
    f,
    w,
    alpha=DEFAULT_ALPHA,
    stage=2,
    backbone=None,
    mask=None,
    vis_negatives=None,
    ir_negatives=None,
    layer_weights=DEFAULT_LAYER_WEIGHTS,
    mode="ivif",
    window_size=11,
):
    """L_total = alpha L_S + L_N + contrastive pair. Stage 1 skips the contrastive pair entirely.

    In ``mode="medical"`` ``v`` is the MRI, ``r`` the functional luminance, ``mask`` the
    MRI-segmented mask, and the contrastive pair is (l_mri, l_fun).
    """
    f = as_batch(f)
    v, r = as_batch(v, f.dtype), as_batch(r, f.dtype)
    l_s = structure_loss(v, r, f, w, window_size=window_size)
    l_n = intensity_loss(v, r, f, w)
    l_p = alpha * l_s + l_n
    zero = torch.zeros((), dtype=f.dtype)
    degenerate = False
    if stage == 1:
        l_ir = l_vis = zero
        l_total = l_p
    else:
        if backbone is None or mask is None:
            raise ValueError("stage 2 needs a backbone and a mask")
        if mode == "medical":
            fg, bg = medical_contrastive(backbone, f, v, r, mask, fun_negatives=ir_negatives, mri_negatives=vis_negatives, layer_weights=layer_weights)
        else:
            fg, bg = coupled_contrastive(backbone, f, r, v, mask, vis_negatives, ir_negatives, layer_weights)
        l_ir, l_vis = fg.value.to(f.dtype), bg.value.to(f.dtype)
        degenerate = fg.degenerate or bg.degenerate
        l_total = l_p + l_ir + l_vis
    return LossBreakdown(l_s, l_n, l_p, l_ir, l_vis, l_total, float(alpha), mode, degenerate)
