"""Inference helpers shared by the command line: model loading, pair fusion, medical recombination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ccfusion.backbone import load_backbone
from ccfusion.errors import ShapeError
from ccfusion.imagecore import (
    ColorImage,
    ImagePlane,
    YCbCrImage,
    color_to_uint8,
    normalize,
    rgb_to_ycbcr,
    to_uint8,
    ycbcr_to_rgb,
)
from ccfusion.network import forward_fuse
from ccfusion.trainer import load_checkpoint


def backbone_for(meta, weights=None):
    """Backbone named by ``weights``, else the one recorded in checkpoint ``meta``."""
    source = weights if weights is not None else meta.get("backbone") or "deterministic:0"
    source = str(source)
    if source.startswith("deterministic"):
        _, _, seed = source.partition(":")
        return load_backbone("deterministic", int(seed or 0))
    return load_backbone(source)


def load_for_inference(checkpoint, weights=None):
    ck = load_checkpoint(checkpoint)
    model = ck.model.eval()
    backbone = backbone_for(ck.meta, weights) if model.use_backbone_taps else None
    return model, backbone


def fuse_planes(model, backbone, ir: ImagePlane, vis: ImagePlane):
    """Fused 8-bit raster (uint8 array) for one grayscale pair."""
    if ir.shape != vis.shape:
        raise ShapeError(f"source shapes disagree: {ir.shape} vs {vis.shape}")
    return to_uint8(forward_fuse(model, backbone, ir, vis))


@dataclass
class MedicalFusion:
    """Fused color result plus the 8-bit Y/Cb/Cr planes it was recombined from.

    ``cb``/``cr`` are the functional image's own chroma, quantized once and never touched
    again. ``rgb`` is None for a grayscale functional input.
    """

    y: np.ndarray
    cb: np.ndarray | None
    cr: np.ndarray | None
    rgb: np.ndarray | None


def quantize_chroma(c):
    return np.rint(np.clip(np.asarray(c), 0.0, 1.0) * 255.0).astype(np.uint8)


def fuse_medical(model, backbone, mri: ImagePlane, functional):
    """Fuse the MRI with the functional luminance and reattach the functional chroma.

    The network sees the functional Y in the infrared slot and the MRI in the visible slot.
    """
    if mri.shape != functional.shape:
        raise ShapeError(f"source shapes disagree: MRI {mri.shape} vs functional {functional.shape}")
    if isinstance(functional, ImagePlane):
        y = fuse_planes(model, backbone, functional, mri)
        return MedicalFusion(y, None, None, None)
    if not isinstance(functional, ColorImage):
        raise TypeError(f"functional image must be ImagePlane or ColorImage, got {type(functional).__name__}")
    ycc = rgb_to_ycbcr(functional)
    fun_y = normalize(ycc.y, "unit8")
    y = fuse_planes(model, backbone, fun_y, mri)
    cb, cr = quantize_chroma(ycc.cb), quantize_chroma(ycc.cr)
    fused = YCbCrImage(ImagePlane(y / 255.0, "unit"), cb / 255.0, cr / 255.0)
    return MedicalFusion(y, cb, cr, color_to_uint8(ycbcr_to_rgb(fused)))
