import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ccfusion.errors import MetricError, ShapeError, UndefinedCorrelationError
from ccfusion.imagecore import ImagePlane
from ccfusion.metrics import (
    average_gradient,
    correlation,
    entropy,
    evaluate_triple,
    reports_to_csv,
    scd,
    spatial_frequency,
    ssim,
    ssim_torch,
    standard_deviation,
    vif_fusion,
    vif_fusion_scales,
)

pixels16 = arrays(np.float64, (16, 16), elements=st.integers(0, 255).map(float))


@settings(max_examples=25, deadline=None)
@given(pixels16)
def test_scalar_metrics_match_loops(px):
    assert entropy(px) == pytest.approx(oracles.entropy_loop(px), abs=1e-10)
    assert average_gradient(px) == pytest.approx(oracles.average_gradient_loop(px), abs=1e-10)
    assert spatial_frequency(px) == pytest.approx(oracles.spatial_frequency_loop(px), abs=1e-10)
    assert standard_deviation(px) == pytest.approx(oracles.msd_loop(px), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(pixels16)
def test_metric_invariants(px):
    assert 0.0 <= entropy(px) <= 8.0
    assert average_gradient(px) >= 0
    # shifting brightness changes none of the contrast statistics
    shifted = np.clip(px, 0, 200) + 55
    base = np.clip(px, 0, 200)
    assert average_gradient(shifted) == pytest.approx(average_gradient(base), abs=1e-9)
    assert standard_deviation(shifted) == pytest.approx(standard_deviation(base), abs=1e-7)
    assert standard_deviation(px, sqrt=True) == pytest.approx(math.sqrt(standard_deviation(px)))


def test_scd_matches_loop():
    rng = np.random.default_rng(5)
    for _ in range(5):
        v, r, f = (rng.integers(0, 256, (16, 16)).astype(float) for _ in range(3))
        assert scd(v, r, f) == pytest.approx(oracles.scd_loop(v, r, f), abs=1e-10)


def test_constant_inputs_make_correlation_undefined():
    with pytest.raises(UndefinedCorrelationError):
        correlation(np.ones((4, 4)), np.arange(16.0).reshape(4, 4))
    v = np.arange(16.0).reshape(4, 4)
    with pytest.raises(MetricError) as info:
        scd(v, v, v)
    assert info.value.metric == "SCD"


def test_ssim_identity_and_oracle():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 256, (16, 16)).astype(float)
    y = rng.integers(0, 256, (16, 16)).astype(float)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(oracles.ssim_loop(x, y, 255.0), abs=1e-8)


def test_ssim_torch_is_differentiable_and_checks_size():
    x = torch.rand(2, 1, 12, 12, dtype=torch.float64, requires_grad=True)
    y = torch.rand(2, 1, 12, 12, dtype=torch.float64)
    val = ssim_torch(x, y, data_range=1.0, reduction="none")
    assert val.shape == (2,)
    val.sum().backward()
    assert torch.isfinite(x.grad).all()
    with pytest.raises(ShapeError):
        ssim_torch(x[..., :8, :8], y[..., :8, :8])


def test_vif_matches_reference_and_self_fusion():
    rng = np.random.default_rng(2)
    v, r, f = (rng.integers(0, 256, (16, 16)).astype(float) for _ in range(3))
    assert vif_fusion(v, r, f) == pytest.approx(oracles.viff_reference(v, r, f), abs=1e-6)
    # fusing a source with itself recovers all of its information at every scale
    assert np.allclose(vif_fusion_scales(v, v, v), 1.0, atol=1e-6)
    with pytest.raises(MetricError):
        vif_fusion(v[:4, :4], r[:4, :4], f[:4, :4])


def test_planes_use_declared_range_for_entropy():
    px = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert entropy(ImagePlane(px, "unit")) == 1.0


def test_report_csv_marks_failed_rows():
    rng = np.random.default_rng(3)
    v, r, f = (rng.integers(0, 256, (16, 16)).astype(float) for _ in range(3))
    ok = evaluate_triple(v, r, f)
    with pytest.raises(MetricError) as info:
        evaluate_triple(v, v, np.full((16, 16), 9.0))
    text = reports_to_csv([("a", ok), ("b", info.value)])
    lines = text.strip().split("\n")
    assert lines[0] == "pair_id,en,ag,sf,sd,scd,vif"
    assert lines[2] == "b," + ",".join(["error:SCD"] * 6)
    assert lines[3].startswith("mean±std,") and "±0.000000" in lines[3]
    with pytest.raises(ShapeError):
        evaluate_triple(v, r, f[:8])


def test_ssim_of_two_constants_is_closed_form():
    a = ImagePlane(np.full((16, 16), 0.2), "unit")
    b = ImagePlane(np.full((16, 16), 0.4), "unit")
    assert ssim(a, b) == pytest.approx((2 * 0.08 + 1e-4) / (0.2 + 1e-4), abs=1e-12)


def test_vif_of_constant_fusion_is_small(toy_pairs):
    p = toy_pairs[0]
    assert vif_fusion(p.vis, p.ir, np.full(p.ir.shape, 128.0)) < 0.1


@settings(max_examples=15, deadline=None)
@given(pixels16, pixels16, pixels16)
def test_transpose_and_swap_symmetries(v, r, f):
    from ccfusion.metrics import scd_components, spatial_frequency_components

    sf, h, w = spatial_frequency_components(f)
    sf_t, h_t, w_t = spatial_frequency_components(f.T)
    assert sf_t == pytest.approx(sf) and h_t == pytest.approx(w) and w_t == pytest.approx(h)
    assert entropy(f.T) == entropy(f)
    assert average_gradient(f.T) == pytest.approx(average_gradient(f))
    if min(np.ptp(v), np.ptp(r), np.ptp(f)) > 0 and np.ptp(f - r) > 0 and np.ptp(f - v) > 0:
        total, a, b = scd_components(v, r, f)
        total_s, a_s, b_s = scd_components(r, v, f)
        assert (a_s, b_s) == pytest.approx((b, a))
        assert -2 - 1e-12 <= total <= 2 + 1e-12
