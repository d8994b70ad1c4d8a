import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from translucent_gs.losses import (
    geometric_loss,
    interior_containment_loss,
    l1,
    multiview_depth_consistency,
    normal_consistency,
    photometric_loss,
    smoothness_loss,
    ssim,
    total_loss,
)
from translucent_gs.scene import CameraView, Hyperparameters


def axis_view(size=16, fx=20.0, eye=(0.0, 0.0, 0.0)):
    K = np.array([[fx, 0, size / 2.0], [0, fx, size / 2.0], [0, 0, 1]])
    return CameraView(K, np.eye(3), np.asarray(eye, dtype=np.float64), size, size)


def windowed_ssim(a, b):
    """SSIM map from explicit Gaussian-window statistics with symmetric borders."""
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    H, W = a.shape
    pa, pb = np.pad(a, 5, mode="symmetric"), np.pad(b, 5, mode="symmetric")
    out = np.zeros_like(a)
    for i in range(H):
        for j in range(W):
            x, y = pa[i:i + 11, j:j + 11], pb[i:i + 11, j:j + 11]
            mx, my = (w * x).sum(), (w * y).sum()
            vx = (w * x * x).sum() - mx * mx
            vy = (w * y * y).sum() - my * my
            cxy = (w * x * y).sum() - mx * my
            c1, c2 = 0.01**2, 0.03**2
            out[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return out.mean()


def test_ssim_identity_and_constants():
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.uniform(size=(20, 20, 3)))
    assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-12)
    c = torch.full((12, 12, 3), 0.3)
    assert float(ssim(c, c + 0)) == pytest.approx(1.0, abs=1e-12)
    zero, one = torch.zeros(12, 12), torch.ones(12, 12)
    c1 = 0.01**2
    assert float(ssim(zero, one)) == pytest.approx(c1 / (1 + c1), rel=1e-9)
    assert float(ssim(zero, one)) == pytest.approx(windowed_ssim(zero.numpy(), one.numpy()), rel=1e-12)


def test_ssim_matches_windowed_oracle_and_skimage():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(24, 20))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ours = float(ssim(torch.tensor(a), torch.tensor(b)))
    assert ours == pytest.approx(windowed_ssim(a, b), abs=1e-12)
    _, smap = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=1.0, full=True)
    assert ours == pytest.approx(smap.mean(), abs=1e-10)


def test_photometric_examples():
    rng = np.random.default_rng(2)
    gt = torch.tensor(rng.uniform(size=(16, 16, 3)))
    assert float(photometric_loss(gt, gt, gt)) == pytest.approx(0.0, abs=1e-12)
    eps = 0.01
    assert float(photometric_loss(gt + eps, gt, gt, lambda1=1.0)) == pytest.approx(eps, abs=1e-12)
    a, b = torch.tensor(rng.uniform(size=(16, 16, 3))), torch.tensor(rng.uniform(size=(16, 16, 3)))
    lam = 0.2
    hand = (lam * (a - gt).abs().mean() + (1 - lam) * (1 - ssim(a, gt))
            + lam * (b - gt).abs().mean() + (1 - lam) * (1 - ssim(b, gt)))
    assert float(photometric_loss(a, b, gt, lam)) == pytest.approx(float(hand), abs=1e-14)
    assert float(photometric_loss(a, None, gt, lam)) == pytest.approx(
        float(lam * l1(a, gt) + (1 - lam) * (1 - ssim(a, gt))), abs=1e-14)


def test_interior_containment_examples():
    v = axis_view()
    depth = torch.full((16, 16), 2.0)
    mask = torch.ones(16, 16, dtype=torch.bool)
    assert float(interior_containment_loss(torch.tensor([[0.0, 0.0, 3.0]]), depth, mask, v)) == 0.0
    assert float(interior_containment_loss(torch.tensor([[0.0, 0.0, 1.0]]), depth, mask, v)) == pytest.approx(1.0)
    assert float(interior_containment_loss(torch.zeros(0, 3), depth, mask, v)) == 0.0
    # mean over all kernels; off-image and invalid pixels add 0
    pts = torch.tensor([[0.0, 0.0, 1.0], [0.0, 0.0, 3.0], [100.0, 0.0, 1.0]])
    assert float(interior_containment_loss(pts, depth, mask, v)) == pytest.approx(1.0 / 3.0)
    mask[8, 8] = False
    assert float(interior_containment_loss(torch.tensor([[0.0, 0.0, 1.0]]), depth, mask, v)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_interior_containment_matches_loop(seed):
    rng = np.random.default_rng(seed)
    v = axis_view()
    depth = torch.tensor(rng.uniform(1, 3, (16, 16)))
    mask = torch.tensor(rng.uniform(size=(16, 16)) > 0.2)
    pts = torch.tensor(np.c_[rng.uniform(-1, 1, (20, 2)), rng.uniform(0.5, 3.5, 20)])
    ref = 0.0
    for p in pts.numpy():
        u = v.intrinsics @ (p / p[2])
        iu, iv = int(np.floor(u[0] + 0.5)), int(np.floor(u[1] + 0.5))
        if 0 <= iu < 16 and 0 <= iv < 16 and mask[iv, iu]:
            ref += max(0.0, float(depth[iv, iu]) - p[2])
    assert float(interior_containment_loss(pts, depth, mask, v)) == pytest.approx(ref / 20, abs=1e-12)


def plane_depth(v, point, normal):
    rays = v.pixel_rays()
    rays_w = rays @ v.rotation.T
    t = ((point - v.translation) @ normal) / (rays_w @ normal)
    return torch.tensor(t * rays[..., 2])


def test_geometric_loss_zero_for_consistent_plane():
    v1 = axis_view()
    v2 = axis_view(eye=(0.3, 0.1, 0.0))
    p, m = np.array([0.0, 0.0, 3.0]), np.array([0.0, 0.0, -1.0])
    d1, d2 = plane_depth(v1, p, m), plane_depth(v2, p, m)
    mask = torch.ones(16, 16, dtype=torch.bool)
    s, c = multiview_depth_consistency(d1, mask, v1, d2, mask, v2)
    assert int(c) > 50 and float(s) < 1e-12
    normal = torch.tensor(m).expand(16, 16, 3)
    total, t1, t2 = geometric_loss(d1, mask, normal, v1, [(d2, mask, v2)], 0.5, 0.5)
    assert float(total) < 1e-10
    total, _, _ = geometric_loss(d1 + 1.0, mask, -normal, v1, [(d2, mask, v2)], 0.0, 0.0)
    assert float(total) == 0.0


def test_tilted_plane_reprojection_is_consistent():
    v1 = axis_view()
    v2 = axis_view(eye=(-0.2, 0.15, 0.1))
    m = np.array([0.3, -0.2, -1.0])
    m /= np.linalg.norm(m)
    p = np.array([0.1, 0.0, 2.5])
    d1, d2 = plane_depth(v1, p, m), plane_depth(v2, p, m)
    mask = torch.ones(16, 16, dtype=torch.bool)
    s, c = multiview_depth_consistency(d1, mask, v1, d2, mask, v2)
    # bilinear sampling of a plane's depth is exact up to the perspective curvature of z(u, v)
    assert int(c) > 50 and float(s) / int(c) < 1e-3
    s_off, _ = multiview_depth_consistency(d1 + 0.05, mask, v1, d2, mask, v2)
    assert float(s_off) > float(s)


def test_normal_consistency_of_matching_normals_is_zero():
    v = axis_view()
    m = np.array([0.2, 0.1, -1.0])
    m /= np.linalg.norm(m)
    d = plane_depth(v, np.array([0.0, 0.0, 3.0]), m)
    normal = torch.tensor(m).expand(16, 16, 3)
    assert float(normal_consistency(d, torch.ones(16, 16, dtype=torch.bool), normal, v)) < 1e-6


def naive_smoothness(m, g):
    H, W, C = m.shape
    total = 0.0
    for y in range(H - 1):
        for x in range(W - 1):
            gm = sum(abs(m[y, x + 1, c] - m[y, x, c]) + abs(m[y + 1, x, c] - m[y, x, c]) for c in range(C))
            gg = np.mean([abs(g[y, x + 1, c] - g[y, x, c]) + abs(g[y + 1, x, c] - g[y, x, c]) for c in range(3)])
            total += gm * math.exp(-gg)
    return total / ((H - 1) * (W - 1))


def test_smoothness_examples():
    rng = np.random.default_rng(4)
    gt = torch.tensor(rng.uniform(size=(10, 12, 3)))
    assert float(smoothness_loss(torch.full((10, 12, 3), 0.4), gt)) == 0.0
    m = torch.tensor(rng.uniform(size=(10, 12, 3)))
    assert float(smoothness_loss(m, gt)) == pytest.approx(naive_smoothness(m.numpy(), gt.numpy()), abs=1e-12)
    r = torch.tensor(rng.uniform(size=(10, 12)))
    assert float(smoothness_loss(r, gt)) == pytest.approx(naive_smoothness(r.numpy()[..., None], gt.numpy()),
                                                          abs=1e-12)
    # a step edge costs less where the target has an edge at the same place
    step = torch.zeros(10, 12, 1)
    step[:, 6:] = 1.0
    flat_gt = torch.zeros(10, 12, 3)
    edge_gt = torch.zeros(10, 12, 3)
    edge_gt[:, 6:] = 1.0
    assert float(smoothness_loss(step, edge_gt)) < float(smoothness_loss(step, flat_gt))


def test_total_loss_weighting():
    hp = Hyperparameters()
    r = total_loss(1.0, 2.0, 0.0, 3.0, 4.0, 5.0, hp=hp)
    assert float(r.total) == pytest.approx(3.12)
    zero = Hyperparameters(lambda4=0.0, lambda5=0.0, lambda6=0.0)
    assert float(total_loss(0.7, l_in=3.0, l_sm_rough=1.0, hp=zero).total) == pytest.approx(0.7)
