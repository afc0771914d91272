"""Synthetic infrared/visible pairs for smoke runs and demos.

Infrared: smooth dim background with bright Gaussian "targets". Visible: oriented
texture whose brightness drops over the targets. The mask marks the targets.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from ccfusion.imagecore import ImagePlane, SaliencyMask, SourcePair, save_mask, save_plane


def make_pair(size=64, seed=0, name=None):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    background = ndimage.gaussian_filter(rng.normal(size=(size, size)), size / 8)
    background = (background - background.min()) / (np.ptp(background) + 1e-12)
    ir = 30.0 + 40.0 * background
    blobs = np.zeros((size, size))
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        sy, sx = rng.uniform(0.05 * size, 0.12 * size, size=2)
        blobs = np.maximum(blobs, np.exp(-((yy - cy) ** 2 / (2 * sy**2) + (xx - cx) ** 2 / (2 * sx**2))))
    ir = ir + 170.0 * blobs + rng.normal(0, 2.0, size=(size, size))

    texture = np.zeros((size, size))
    for _ in range(4):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    texture += 0.8 * ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.0) * 3
    texture = (texture - texture.min()) / (np.ptp(texture) + 1e-12)
    vis = 40.0 + 180.0 * texture
    vis = vis * (1.0 - 0.7 * blobs)

    mask = (blobs > 0.5).astype(np.float64)
    return SourcePair(
        name or f"toy{seed:03d}",
        ImagePlane(np.clip(np.rint(ir), 0, 255), "unit8"),
        ImagePlane(np.clip(np.rint(vis), 0, 255), "unit8"),
        SaliencyMask(mask),
    )


def make_pairs(n, size=64, seed=0):
    return [make_pair(size, seed * 1000 + i, name=f"toy{i:03d}") for i in range(n)]


def write_corpus(out_dir, pairs):
    """Write ``ir/``, ``vis/`` and ``masks/`` PNG folders."""
    out_dir = Path(out_dir)
    for p in pairs:
        save_plane(out_dir / "ir" / f"{p.name}.png", p.ir)
        save_plane(out_dir / "vis" / f"{p.name}.png", p.vis)
        if p.mask is not None:
            save_mask(out_dir / "masks" / f"{p.name}.png", p.mask)
    return out_dir
