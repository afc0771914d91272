"""Frozen 19-layer VGG feature extractor for attention-module inputs and contrastive taps."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ccfusion.errors import ShapeError, WeightsError
from ccfusion.imagecore import ImagePlane, normalize
from ccfusion.store import read_container, write_container

# Convolutional part of the standard 19-layer configuration ("M" = 2x2 max-pool).
VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512]

# relu{stage}_2 activations, indexed like torchvision's ``vgg19().features``.
CONTRASTIVE_TAPS = {"relu1_2": 3, "relu2_2": 8, "relu3_2": 13, "relu4_2": 22, "relu5_2": 31}
MAM_TAPS = ("relu1_2", "relu2_2", "relu3_2")
MAM_MIN_EXTENT = 16
CONTRASTIVE_MIN_EXTENT = 8

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class FeaturePyramid:
    """Ordered feature stacks, shallow to deep. Each level is (B, C, h, w)."""

    levels: list
    tap_names: list

    def __len__(self):
        return len(self.levels)

    @property
    def channels(self):
        return tuple(int(t.shape[1]) for t in self.levels)

    @property
    def shapes(self):
        return [tuple(t.shape[1:]) for t in self.levels]


def _build_features():
    layers = []
    in_ch = 3
    for v in VGG19_CFG:
        if v == "M":
            # ceil_mode keeps odd and sub-16 extents alive; identical to floor for multiples of 16
            layers.append(nn.MaxPool2d(2, 2, ceil_mode=True))
        else:
            layers.append(nn.Conv2d(in_ch, v, 3, padding=1))
            layers.append(nn.ReLU(inplace=False))
            in_ch = v
    return nn.Sequential(*layers)


def expected_shapes():
    """Parameter name -> shape for the convolutional layers of the 19-layer net."""
    return {k: tuple(v.shape) for k, v in _build_features().state_dict().items()}


class Backbone(nn.Module):
    """Frozen extractor. Takes (B, 1, H, W) input in [-1, 1]."""

    def __init__(self, features, source="deterministic"):
        super().__init__()
        self.features = features
        self.source = source
        self.contrastive_calls = 0
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # always inference: no dropout/normalization state to toggle, keeps the frozen contract
        return super().train(False)

    def _prepare(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"backbone expects (B, 1, H, W), got {tuple(x.shape)}")
        x = (x + 1.0) * 0.5
        x = x.expand(-1, 3, -1, -1)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def taps(self, x, names):
        wanted = {CONTRASTIVE_TAPS[n]: n for n in names}
        last = max(wanted)
        out = {}
        h = self._prepare(x)
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in wanted:
                out[wanted[i]] = h
            if i == last:
                break
        return [out[n] for n in names]

    def mam_taps(self, x):
        """64/128/256-channel taps bilinearly resampled to the input's extent."""
        h, w = x.shape[-2:]
        if min(h, w) < MAM_MIN_EXTENT:
            raise ShapeError(f"input {h}x{w} below the {MAM_MIN_EXTENT}px minimum for attention taps")
        raw = self.taps(x, MAM_TAPS)
        levels = [t if t.shape[-2:] == (h, w) else F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False) for t in raw]
        return FeaturePyramid(levels, list(MAM_TAPS))

    def contrastive_taps(self, x):
        """Five raw-resolution taps, one per convolutional stage."""
        h, w = x.shape[-2:]
        if min(h, w) < CONTRASTIVE_MIN_EXTENT:
            raise ShapeError(f"input {h}x{w} below the {CONTRASTIVE_MIN_EXTENT}px minimum for contrastive taps")
        self.contrastive_calls += 1
        names = list(CONTRASTIVE_TAPS)
        return FeaturePyramid(self.taps(x, names), names)

    def parameter_digest(self):
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def deterministic_features(seed=0):
    features = _build_features()
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in features:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                m.bias.zero_()
    return features


def load_backbone(weights="deterministic", seed=0):
    """Load a frozen backbone from a weights container, or ``"deterministic"`` random kernels."""
    if str(weights) == "deterministic":
        return Backbone(deterministic_features(seed), source=f"deterministic:{int(seed)}")
    path = Path(weights)
    if not path.is_file():
        raise WeightsError(f"backbone weights file not found: {path}")
    tensors, meta = read_container(path, kind="backbone")
    features = _build_features()
    expected = features.state_dict()
    state = {}
    for name, ref in expected.items():
        key = f"features.{name}"
        if key not in tensors:
            raise WeightsError(f"{path}: missing layer {key}")
        if tuple(tensors[key].shape) != tuple(ref.shape):
            raise WeightsError(
                f"{path}: layer {key} has shape {tuple(tensors[key].shape)}, expected {tuple(ref.shape)}"
            )
        state[name] = tensors[key].to(ref.dtype)
    features.load_state_dict(state)
    return Backbone(features, source=str(path))


def save_backbone_weights(path, backbone_or_state, meta=None):
    state = backbone_or_state.features.state_dict() if isinstance(backbone_or_state, Backbone) else backbone_or_state
    tensors = {f"features.{k}": v for k, v in state.items()}
    write_container(path, tensors, kind="backbone", meta={"config": "vgg19", **(meta or {})})


def convert_torchvision_vgg19(src, dst):
    """Repack a torchvision ``vgg19`` state dict (``.pth``) into a backbone weights container.

    Only ``features.*`` convolution kernels and biases are kept; classifier layers are dropped.
    """
    state = torch.load(src, map_location="cpu", weights_only=True)
    if isinstance(state, nn.Module):
        state = state.state_dict()
    expected = expected_shapes()
    picked = {}
    for name, shape in expected.items():
        key = f"features.{name}"
        if key not in state:
            raise WeightsError(f"{src}: missing layer {key}")
        if tuple(state[key].shape) != shape:
            raise WeightsError(f"{src}: layer {key} has shape {tuple(state[key].shape)}, expected {shape}")
        picked[name] = state[key].float()
    save_backbone_weights(dst, picked, meta={"converted_from": Path(src).name})


def _plane_tensor(img):
    px = normalize(img, "signed").pixels
    return torch.from_numpy(np.array(px, dtype=np.float32))[None, None]


def extract_mam_taps(backbone, img: ImagePlane):
    with torch.no_grad():
        return backbone.mam_taps(_plane_tensor(img))


def extract_contrastive_taps(backbone, img: ImagePlane):
    with torch.no_grad():
        return backbone.contrastive_taps(_plane_tensor(img))
