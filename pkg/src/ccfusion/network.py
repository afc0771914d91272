"""Fusion network: conv encoder, channel attention, multi-level attention module, decoder."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ccfusion.backbone import FeaturePyramid
from ccfusion.errors import ShapeError
from ccfusion.imagecore import ImagePlane, normalize

ENCODER_WIDTHS = (32, 64, 128, 256)
MAM_WIDTHS = (64, 128, 256)
MIN_EXTENT = 16
PAD_MULTIPLE = 16
LEAK = 0.2


class ConvBlock(nn.Sequential):
    """Two 3x3 conv + BN + LeakyReLU groups."""

    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.LeakyReLU(LEAK),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.LeakyReLU(LEAK),
        )


class ChannelAttention(nn.Module):
    """C x C attention over flattened channels, added back residually.

    P, Q, H are 1x1 projections. attn = softmax_rows(M_P @ M_Q^T); out = attn^T @ M_H + f.
    """

    def __init__(self, channels):
        super().__init__()
        self.p = nn.Conv2d(channels, channels, 1)
        self.q = nn.Conv2d(channels, channels, 1)
        self.h = nn.Conv2d(channels, channels, 1)

    def forward(self, f, return_internals=False):
        b, c, h, w = f.shape
        m_p = self.p(f).reshape(b, c, h * w)
        m_q = self.q(f).reshape(b, c, h * w)
        m_h = self.h(f).reshape(b, c, h * w)
        attn = torch.softmax(m_p @ m_q.transpose(1, 2), dim=-1)
        out = (attn.transpose(1, 2) @ m_h).reshape(b, c, h, w) + f
        if return_internals:
            return out, {"m_p": m_p, "m_q": m_q, "m_h": m_h, "attn": attn}
        return out


class MAMLevel(nn.Module):
    def __init__(self, width, use_ca=True):
        super().__init__()
        self.use_ca = use_ca
        if use_ca:
            self.ca_u = ChannelAttention(width)
            self.ca_r = ChannelAttention(width)
            self.ca_v = ChannelAttention(width)
        self.fuse = nn.Conv2d(3 * width, width, 3, padding=1)

    def forward(self, f_u, f_r, f_v):
        if self.use_ca:
            f_u = self.ca_u(f_u)
            f_r = self.ca_r(f_r) if f_r is not None else None
            f_v = self.ca_v(f_v) if f_v is not None else None
        f_r = torch.zeros_like(f_u) if f_r is None else f_r
        f_v = torch.zeros_like(f_u) if f_v is None else f_v
        return self.fuse(torch.cat([f_u, f_r, f_v], dim=1))


class Decoder(nn.Module):
    """256 -> 128 -> 64 -> 32 -> 1, concatenating each fused level on the way up, tanh output."""

    def __init__(self):
        super().__init__()
        w0, w1, w2, w3 = ENCODER_WIDTHS

        def block(i, o):
            return nn.Sequential(nn.Conv2d(i, o, 3, padding=1), nn.BatchNorm2d(o), nn.LeakyReLU(LEAK))

        self.up3 = block(w3, w2)
        self.up2 = block(w2 + w2, w1)
        self.up1 = block(w1 + w1, w0)
        self.out = nn.Conv2d(w0 + w0, 1, 3, padding=1)

    def forward(self, f_u0, fused):
        a1, a2, a3 = fused
        d = self.up3(a3)
        d = self.up2(torch.cat([d, a2], dim=1))
        d = self.up1(torch.cat([d, a1], dim=1))
        return torch.tanh(self.out(torch.cat([d, f_u0], dim=1)))


class FusionNet(nn.Module):
    def __init__(self, use_ca=True, use_backbone_taps=True):
        super().__init__()
        self.use_ca = use_ca
        self.use_backbone_taps = use_backbone_taps
        widths = (2,) + ENCODER_WIDTHS
        self.encoder = nn.ModuleList(ConvBlock(i, o) for i, o in zip(widths[:-1], widths[1:]))
        self.mam = nn.ModuleList(MAMLevel(w, use_ca) for w in MAM_WIDTHS)
        self.decoder = Decoder()

    @property
    def config(self):
        return {"use_ca": self.use_ca, "use_backbone_taps": self.use_backbone_taps}

    def encode(self, x):
        """(B, 2, H, W) in [-1, 1] -> FeaturePyramid f_U0..f_U3 at full resolution."""
        if x.dim() != 4 or x.shape[1] != 2:
            raise ShapeError(f"encoder expects (B, 2, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < MIN_EXTENT:
            raise ShapeError(f"input {tuple(x.shape[-2:])} below the {MIN_EXTENT}px encoder minimum")
        levels = []
        for block in self.encoder:
            x = block(x)
            levels.append(x)
        return FeaturePyramid(levels, ["f_u0", "f_u1", "f_u2", "f_u3"])

    def mam_fuse(self, f_u, f_r, f_v):
        """Per level: conv3x3(concat(CA(f_U), CA(f_R), CA(f_V))). ``f_r``/``f_v`` may be None."""
        out = []
        for n, level in enumerate(self.mam):
            u = f_u.levels[n + 1] if len(f_u) == 4 else f_u.levels[n]
            r = f_r.levels[n] if f_r is not None else None
            v = f_v.levels[n] if f_v is not None else None
            for name, t in (("f_R", r), ("f_V", v)):
                if t is not None and t.shape[-2:] != u.shape[-2:]:
                    raise ShapeError(
                        f"level {n + 1}: {name} spatial size {tuple(t.shape[-2:])} != f_U {tuple(u.shape[-2:])}"
                    )
            out.append(level(u, r, v))
        return FeaturePyramid(out, ["f_a1", "f_a2", "f_a3"])

    def decode(self, f_u0, fused):
        return self.decoder(f_u0, fused.levels)

    def forward(self, ir, vis, backbone=None):
        """(B, 1, H, W) sources in [-1, 1] -> fused (B, 1, H, W) in (-1, 1).

        Extents are reflect-padded up to a multiple of 16 and cropped back.
        """
        if ir.shape != vis.shape:
            raise ShapeError(f"source shapes disagree: {tuple(ir.shape)} vs {tuple(vis.shape)}")
        h, w = ir.shape[-2:]
        if min(h, w) < MIN_EXTENT:
            raise ShapeError(f"input {h}x{w} below the {MIN_EXTENT}px minimum")
        ph = (-h) % PAD_MULTIPLE
        pw = (-w) % PAD_MULTIPLE
        if ph or pw:
            ir = F.pad(ir, (0, pw, 0, ph), mode="reflect")
            vis = F.pad(vis, (0, pw, 0, ph), mode="reflect")
        f_u = self.encode(torch.cat([ir, vis], dim=1))
        f_r = f_v = None
        if self.use_backbone_taps:
            if backbone is None:
                raise ValueError("backbone required when backbone taps are enabled")
            with torch.set_grad_enabled(torch.is_grad_enabled() and (ir.requires_grad or vis.requires_grad)):
                f_r = backbone.mam_taps(ir)
                f_v = backbone.mam_taps(vis)
        fused = self.mam_fuse(f_u, f_r, f_v)
        out = self.decode(f_u.levels[0], fused)
        return out[..., :h, :w]


def init_parameters(model, seed):
    """Fan-in scaled (He) initialization driven by ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
                m.reset_running_stats()
    return model


def build_model(seed=0, use_ca=True, use_backbone_taps=True):
    return init_parameters(FusionNet(use_ca=use_ca, use_backbone_taps=use_backbone_taps), seed)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def forward_fuse(model, backbone, i_r: ImagePlane, i_v: ImagePlane):
    """Fuse one pair with frozen parameters; returns a signed-range ``ImagePlane``."""
    if i_r.shape != i_v.shape:
        raise ShapeError(f"source shapes disagree: {i_r.shape} vs {i_v.shape}")
    dtype = next(model.parameters()).dtype

    def t(p):
        return torch.from_numpy(np.array(normalize(p, "signed").pixels)).to(dtype)[None, None]

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(t(i_r), t(i_v), backbone)
    finally:
        model.train(was_training)
    return ImagePlane(np.clip(out[0, 0].double().numpy(), -1.0, 1.0), "signed")
