from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage import data as skdata
from skimage.metrics import structural_similarity

from djescc.models import FeatureExtractor
from djescc.objective import (
    feature_loss,
    mse_255,
    psnr,
    psnr_batch,
    recon_loss,
    ssim,
    ssim_batch,
    total_loss,
)


def _t(seed, shape=(2, 8, 8, 3), dtype=torch.float64):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


@pytest.fixture(scope="module")
def fx():
    return FeatureExtractor.random(1).double()


# -- reconstruction loss ---------------------------------------------------------

def test_recon_loss_examples():
    x = _t(0)
    assert float(recon_loss(x, x)) == 0.0
    assert float(recon_loss(torch.zeros(1, 4, 4, 3), torch.full((1, 4, 4, 3), 0.5))) == 0.25


def test_recon_loss_loop_oracle():
    a, b = _t(1, (1, 4, 4, 3)), _t(2, (1, 4, 4, 3))
    total, n = 0.0, 0
    for i in range(4):
        for j in range(4):
            for c in range(3):
                total += (float(a[0, i, j, c]) - float(b[0, i, j, c])) ** 2
                n += 1
    assert abs(float(recon_loss(a, b)) - total / n) < 1e-12


def test_recon_loss_symmetric_and_shape_checked():
    a, b = _t(3), _t(4)
    assert float(recon_loss(a, b)) == float(recon_loss(b, a)) > 0
    with pytest.raises(ValueError):
        recon_loss(a, b[:, :4])


# -- feature loss ------------------------------------------------------------------

def test_feature_loss_zero_and_symmetric(fx):
    a, b = _t(5), _t(6)
    assert float(feature_loss(a, a, fx)) == 0.0
    assert float(feature_loss(a, b, fx)) == pytest.approx(float(feature_loss(b, a, fx)), rel=1e-12)
    assert float(feature_loss(a, b, fx)) > 0


def test_feature_loss_elementwise_oracle(fx):
    a, b = _t(7, (2, 8, 8, 3)), _t(8, (2, 8, 8, 3))
    fa, fb = fx(a).detach().numpy(), fx(b).detach().numpy()
    per_image = []
    for i in range(2):
        m = fa[i].size
        acc = 0.0
        for u, v in zip(fa[i].ravel(), fb[i].ravel()):
            acc += (float(u) - float(v)) ** 2
        per_image.append(acc / m)
    assert abs(float(feature_loss(a, b, fx)) - np.mean(per_image)) < 1e-9


def test_feature_loss_shape_mismatch(fx):
    with pytest.raises(ValueError):
        feature_loss(_t(0), _t(0, (2, 4, 4, 3)), fx)


# -- total loss -------------------------------------------------------------------

class _ConstFeatures(torch.nn.Module):
    """Extractor whose features are the image itself (for closed-form checks)."""

    def forward(self, img):
        return img


def test_total_loss_example():
    x = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    # l_r = 0.1, l_e = 2, l_d = 1 via the identity extractor
    xhat = torch.full_like(x, math.sqrt(0.1))
    y = torch.full_like(x, math.sqrt(2.0))
    yhat = torch.ones_like(x)
    out = total_loss(x, y, yhat, xhat, 0.05, 0.05, _ConstFeatures())
    assert float(out.l_r) == pytest.approx(0.1)
    assert float(out.l_e) == pytest.approx(2.0)
    assert float(out.l_d) == pytest.approx(1.0)
    assert float(out.l_total) == pytest.approx(-0.05, abs=1e-12)
    assert float(out.l_total) == float(out.l_r - 0.05 * out.l_e - 0.05 * out.l_d)


def test_total_loss_lambda_zero(fx):
    x, y, yhat, xhat = _t(1), _t(2), _t(3), _t(4)
    out = total_loss(x, y, yhat, xhat, 0.0, 0.0, fx)
    assert float(out.l_total) == float(out.l_r)
    out = total_loss(x, y, yhat, xhat, 0.0, 0.0)
    assert float(out.l_e) == float(out.l_d) == 0.0


def test_total_loss_unbounded_below():
    x = torch.zeros(1, 2, 2, 1, dtype=torch.float64)
    vals = [float(total_loss(x, torch.full_like(x, s), x, x, 0.05, 0.05,
                             _ConstFeatures()).l_total) for s in (1, 10, 100)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < -100


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_total_loss_monotone_in_weights(le1, le2, ld1, ld2):
    x, y, yhat, xhat = _t(1), _t(2), _t(3), _t(4)
    f = _ConstFeatures()
    lo_e, hi_e = sorted((le1, le2))
    lo_d, hi_d = sorted((ld1, ld2))
    a = float(total_loss(x, y, yhat, xhat, lo_e, lo_d, f).l_total)
    b = float(total_loss(x, y, yhat, xhat, hi_e, hi_d, f).l_total)
    assert b <= a + 1e-15


def test_total_loss_negative_weights(fx):
    x = _t(0)
    with pytest.raises(ValueError):
        total_loss(x, x, x, x, -0.1, 0.0, fx)
    with pytest.raises(ValueError):
        total_loss(x, x, x, x, 0.1, 0.0, None)
    with pytest.raises(ValueError):
        total_loss(x, x, x, x, 0.1, 0.0, fx, track_features=False)


def test_gradient_identity_at_lambda_zero(fx):
    torch.manual_seed(0)
    net = torch.nn.Conv2d(3, 3, 3, padding=1).double()
    x = _t(9)

    def run(with_features):
        net.zero_grad()
        out = net(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1).sigmoid()
        losses = total_loss(x, out, out, out, 0.0, 0.0, fx if with_features else None)
        (losses.l_total if with_features else losses.l_r).backward()
        return [p.grad.clone() for p in net.parameters()]

    for g_total, g_r in zip(run(True), run(False)):
        assert torch.equal(g_total, g_r)


def test_plain_features_are_not_differentiated(fx):
    x = _t(1).requires_grad_(True)
    y = _t(2)
    total_loss(x, y, y, y, 0.05, 0.05, fx).l_total.backward()
    # x only reaches l_total through l_r and the (detached) plain features
    expected = 2 * (x.detach() - y) / x.numel()
    assert torch.allclose(x.grad, expected)


# -- PSNR --------------------------------------------------------------------------

def test_psnr_examples(rng):
    a = rng.integers(1, 255, (8, 8, 3)).astype(np.uint8)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 1) == pytest.approx(20 * math.log10(255), abs=1e-9)
    assert round(psnr(a, a + 1), 4) == 48.1308
    b = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    assert psnr(a, b) == psnr(b, a)


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (4, 4, 3)), arrays(np.uint8, (4, 4, 3)))
def test_psnr_mse_consistency(a, b):
    mse = mse_255(a, b)
    if mse == 0:
        assert psnr(a, b) == math.inf
    else:
        assert abs(psnr(a, b) - (10 * math.log10(255 ** 2) - 10 * math.log10(mse))) < 1e-9


def test_psnr_batch_matches_scalar(rng):
    a = rng.integers(0, 256, (5, 8, 8, 3))
    b = rng.integers(0, 256, (5, 8, 8, 3))
    b[2] = a[2]
    got = psnr_batch(a, b)
    assert got[2] == math.inf
    for i in (0, 1, 3, 4):
        assert got[i] == pytest.approx(psnr(a[i], b[i]), abs=1e-12)


# -- SSIM --------------------------------------------------------------------------

def _skimage_ssim(a, b):
    return structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, data_range=255,
                                 channel_axis=-1)


def test_ssim_matches_reference_implementation(rng):
    a = skdata.astronaut()[100:164, 200:264]
    noisy = np.clip(a + rng.normal(0, 20, a.shape), 0, 255).astype(np.uint8)
    assert ssim(a, noisy) == pytest.approx(_skimage_ssim(a, noisy), abs=1e-12)
    g = a[..., 0]
    assert ssim(g, noisy[..., 0]) == pytest.approx(
        structural_similarity(g, noisy[..., 0], gaussian_weights=True, sigma=1.5,
                              use_sample_covariance=False, data_range=255), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, (16, 16, 3)), arrays(np.uint8, (16, 16, 3)))
def test_ssim_reference_property(a, b):
    assert ssim(a, b) == pytest.approx(_skimage_ssim(a, b), abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) <= 1


def test_ssim_identity(rng):
    a = rng.integers(0, 256, (32, 32, 3)).astype(np.uint8)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


# regression anchors: SSIM of a 128x128 crop against its inverse
INVERSE_ANCHORS = {
    "astronaut": 0.15788200565486843,
    "chelsea": -0.18691020080803508,
    "coffee": -0.12280467177106469,
    "rocket": 0.17636880114945916,
    "immunohistochemistry": -0.6220631379944063,
}


@pytest.mark.parametrize("name", sorted(INVERSE_ANCHORS))
def test_ssim_of_inverse_image(name):
    im = getattr(skdata, name)()[:128, :128]
    value = ssim(im, 255 - im)
    assert value < 0.2
    assert value == pytest.approx(INVERSE_ANCHORS[name], abs=1e-9)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 12, 3)))


def test_ssim_batch(rng):
    a = rng.integers(0, 256, (3, 16, 16, 3))
    b = rng.integers(0, 256, (3, 16, 16, 3))
    assert np.allclose(ssim_batch(a, b), [ssim(x, y) for x, y in zip(a, b)])
