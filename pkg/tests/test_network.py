import copy

import numpy as np
import pytest
import torch

from ccfusion.errors import ShapeError
from ccfusion.imagecore import ImagePlane
from ccfusion.network import (
    ENCODER_WIDTHS,
    ChannelAttention,
    build_model,
    count_parameters,
    forward_fuse,
)


@pytest.fixture(scope="module")
def model():
    return build_model(seed=0)


def test_encoder_widths_and_full_resolution(model):
    x = torch.rand(1, 2, 16, 24) * 2 - 1
    pyr = model.encode(x)
    assert pyr.channels == ENCODER_WIDTHS == (32, 64, 128, 256)
    assert all(s[1:] == (16, 24) for s in pyr.shapes)


def test_mam_concat_widths(model):
    assert [lvl.fuse.in_channels for lvl in model.mam] == [192, 384, 768]
    assert [lvl.fuse.out_channels for lvl in model.mam] == [64, 128, 256]


def test_channel_attention_rows_and_shape():
    ca = ChannelAttention(8)
    f = torch.randn(2, 8, 5, 7)
    out, parts = ca(f, return_internals=True)
    assert out.shape == f.shape
    assert parts["attn"].shape == (2, 8, 8)
    torch.testing.assert_close(parts["attn"].sum(-1), torch.ones(2, 8))


@pytest.mark.parametrize("size", [64, 65, 100, 127])
def test_forward_fuse_keeps_extent(model, backbone, size):
    rng = np.random.default_rng(size)
    ir = ImagePlane(rng.integers(0, 256, (size, size + 3)).astype(float))
    vis = ImagePlane(rng.integers(0, 256, (size, size + 3)).astype(float))
    out = forward_fuse(model, backbone, ir, vis)
    assert out.shape == (size, size + 3)
    assert out.range_tag == "signed"


def test_shape_errors(model, backbone):
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 1, 16, 16), torch.zeros(1, 1, 16, 20), backbone)
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8), backbone)
    f_u = model.encode(torch.zeros(1, 2, 16, 16))
    f_r = backbone.mam_taps(torch.zeros(1, 1, 32, 32))
    with pytest.raises(ShapeError, match="level 1"):
        model.mam_fuse(f_u, f_r, None)


def test_seeded_build_and_ablation_flags(backbone):
    a, b = build_model(seed=3), build_model(seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    plain = build_model(seed=3, use_ca=False, use_backbone_taps=False)
    assert count_parameters(plain) < count_parameters(a)
    out = plain(torch.zeros(1, 1, 16, 16), torch.zeros(1, 1, 16, 16))
    assert out.shape == (1, 1, 16, 16)


def test_parameter_gradients_match_finite_differences(backbone):
    torch.manual_seed(0)
    model = build_model(seed=1).double().eval()
    bb = copy.deepcopy(backbone).double()
    ir = torch.rand(1, 1, 16, 16, dtype=torch.float64) * 2 - 1
    vis = torch.rand(1, 1, 16, 16, dtype=torch.float64) * 2 - 1
    target = torch.rand(1, 1, 16, 16, dtype=torch.float64) * 2 - 1

    def loss():
        return ((model(ir, vis, bb) - target) ** 2).mean()

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(20):
        p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        h = 1e-6
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss().item()
            p[idx] = orig - h
            down = loss().item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)
        checked += 1
    assert checked == 20
