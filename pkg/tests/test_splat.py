import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import make_frame, random_cloud, unit_quaternions
from oracles import FiniteDifference, composite, conditioned_by_schur, rotation_by_quaternions
from gs4c.model import Gaussian4D, GaussianCloud
from gs4c.splat import (
    DEFAULT_SETTINGS,
    SMOOTH_SETTINGS,
    DegenerateCovarianceError,
    condition_at,
    load_png,
    load_raw,
    render,
    render_backward,
    render_with_stats,
    rotation_4d,
    save_png,
    save_raw,
)


def one(**kw):
    return GaussianCloud.from_gaussians([Gaussian4D.identity(**kw)])


# --------------------------------------------------------------------------
# conditioning
# --------------------------------------------------------------------------

def test_axis_aligned_at_its_own_time():
    g = Gaussian4D.identity(mean_xyz=(0.3, -0.2, 0.1), mean_t=0.4)
    c = condition_at(g, 0.4)
    np.testing.assert_allclose(c.mean3, [0.3, -0.2, 0.1], atol=1e-15)
    assert c.temporal_weight == 1.0


def test_one_temporal_sigma_away():
    g = Gaussian4D.identity(mean_t=0.4, scale_t=math.log(0.1))
    c = condition_at(g, 0.5)
    assert c.temporal_weight == pytest.approx(math.exp(-0.5), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(0, 1))
def test_conditioning_matches_schur_complement(seed, t):
    g = random_cloud(np.random.default_rng(seed), 1)[0]
    c = condition_at(g, t)
    mean3, cov3, weight = conditioned_by_schur(g, t)
    np.testing.assert_allclose(c.mean3, mean3, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(c.cov3, cov3, rtol=1e-9, atol=1e-12)
    assert c.temporal_weight == pytest.approx(weight, rel=1e-10)
    np.testing.assert_allclose(c.cov3, c.cov3.T, atol=1e-9)
    assert np.linalg.eigvalsh(c.cov3).min() >= -1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_rotation_is_the_quaternion_sandwich(seed):
    rng = np.random.default_rng(seed)
    ql, qr = unit_quaternions(rng, 2)
    rot = rotation_4d(torch.tensor(ql)[None], torch.tensor(qr)[None])[0].numpy()
    np.testing.assert_allclose(rot, rotation_by_quaternions(ql, qr), atol=1e-12)
    np.testing.assert_allclose(rot @ rot.T, np.eye(4), atol=1e-12)


def test_vanishing_temporal_variance_is_degenerate():
    g = Gaussian4D.identity(scale_t=-30.0)
    with pytest.raises(DegenerateCovarianceError):
        condition_at(g, 0.5)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def test_everything_behind_camera_is_black():
    cloud = one(mean_xyz=(0.0, 0.0, -5.0), opacity=5.0)
    img, stats = render_with_stats(cloud, make_frame(16))
    assert np.all(img == 0.0)
    assert stats.behind_camera == 1


def test_saturated_gaussian_on_pixel_center():
    cloud = one(opacity=20.0, color=(0.2, 0.6, 1.0), scale=-3.0)
    frame = make_frame(17)  # principal point (8, 8) sits on a pixel center
    img = render(cloud, frame)
    np.testing.assert_allclose(img[8, 8], 0.999 * np.array([0.2, 0.6, 1.0]), rtol=1e-12)


def test_three_way_overlap_matches_sequential_compositing(rng):
    depths = [0.4, -0.1, 0.2]
    gs = [Gaussian4D.identity(mean_xyz=(0.02 * k, -0.01 * k, d), opacity=0.5, scale=-2.0,
                              color=rng.uniform(0.1, 0.9, 3)) for k, d in enumerate(depths)]
    cloud = GaussianCloud.from_gaussians(gs)
    frame = make_frame(17)
    img = render(cloud, frame)
    # single-Gaussian white renders give each alpha at each pixel
    alphas = []
    for g in gs:
        white = GaussianCloud.from_gaussians([g]).replace(color_f=np.ones((1, 3)))
        alphas.append(render(white, frame)[..., 0])
    order = np.argsort(depths)  # camera at z = -3 looks down +z
    for y, x in [(8, 8), (7, 9), (10, 6)]:
        ref = composite([gs[i].color_f for i in order], [alphas[i][y, x] for i in order])
        np.testing.assert_allclose(img[y, x], ref, rtol=1e-12, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_image_in_unit_range_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 10).replace(opacity=rng.uniform(-2, 8, 10))
    frame = make_frame(16, t=float(rng.uniform()))
    a, b = render(cloud, frame), render(cloud, frame)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_temporally_distant_gaussian_is_faint():
    # weight exp(-0.5 * 4.3**2) < 1e-4
    cloud = one(mean_t=0.07, scale_t=math.log(0.1), opacity=20.0, color=(1, 1, 1), scale=-1.0)
    img = render(cloud, make_frame(16, t=0.5))
    assert img.max() < 1e-3


def test_png_and_raw_roundtrip(tmp_path, rng):
    img = rng.uniform(size=(9, 11, 3))
    save_raw(img, tmp_path / "a.raw")
    np.testing.assert_array_equal(load_raw(tmp_path / "a.raw", 9, 11), img.astype(np.float32))
    save_png(img, tmp_path / "a.png")
    assert np.abs(load_png(tmp_path / "a.png") - img).max() <= 0.5 / 255 + 1e-12


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def test_zero_residual_has_zero_gradient(rng):
    cloud = random_cloud(rng, 5)
    frame = make_frame(16)
    frame = frame.with_image(render(cloud, frame))
    loss, grads = render_backward(cloud, frame)
    assert loss == 0.0
    assert np.all(grads.d_loss_d_u == 0) and np.all(grads.d_loss_d_t == 0)


def test_offscreen_gaussian_has_exactly_zero_gradient(rng):
    far = one(mean_xyz=(40.0, 0.0, 0.0), opacity=3.0)
    cloud = GaussianCloud.concat([random_cloud(rng, 3, feature_dim=far.feature_dim), far], far.stage)
    frame = make_frame(16, image=rng.uniform(size=(16, 16, 3)))
    _, grads = render_backward(cloud, frame)
    assert np.all(grads.d_loss_d_u[3] == 0) and grads.d_loss_d_t[3] == 0
    assert all(np.all(g[3] == 0) for g in grads.d_loss_d_params.values())
    assert np.abs(grads.d_loss_d_u[:3]).sum() > 0


def _single_scene(rng):
    g = Gaussian4D.identity(mean_xyz=rng.uniform(-0.2, 0.2, 3), mean_t=0.45, scale_t=math.log(0.3),
                            opacity=1.0, scale=math.log(0.3), color=rng.uniform(0.2, 0.8, 3))
    q = unit_quaternions(rng, 2)
    cloud = GaussianCloud.from_gaussians([g]).replace(rot_l=q[:1], rot_r=q[1:])
    return cloud, make_frame(16, t=0.55, image=rng.uniform(size=(16, 16, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_single_gaussian_position_gradient(seed):
    cloud, frame = _single_scene(np.random.default_rng(seed))
    _, grads = render_backward(cloud, frame, settings=SMOOTH_SETTINGS)
    fd = FiniteDifference(cloud, frame, SMOOTH_SETTINGS)
    for axis in range(2):
        num, kinked = fd.d_u(0, axis, h=1e-3)
        assert not kinked
        np.testing.assert_allclose(grads.d_loss_d_u[0, axis], num, rtol=1e-3, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_single_gaussian_time_gradient(seed):
    cloud, frame = _single_scene(np.random.default_rng(seed))
    _, grads = render_backward(cloud, frame, settings=SMOOTH_SETTINGS)
    num, kinked = FiniteDifference(cloud, frame, SMOOTH_SETTINGS).d_param("mean_t", (0,), 1e-4)
    assert not kinked
    np.testing.assert_allclose(grads.d_loss_d_t[0], num, rtol=1e-3, atol=1e-6)


OPTIMIZED = ("mean_xyz", "mean_t", "scale_xyz", "scale_t", "rot_l", "rot_r", "opacity", "color_f")


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("loss_kind", ["l1", "l2"])
def test_every_parameter_gradient_matches_finite_differences(seed, loss_kind):
    rng = np.random.default_rng(100 + seed)
    checked = 0
    while checked < 1:
        n = int(rng.integers(1, 11))
        cloud = random_cloud(rng, n)
        frame = make_frame(16, t=float(rng.uniform(0.3, 0.7)), image=rng.uniform(size=(16, 16, 3)))
        _, grads = render_backward(cloud, frame, loss_kind, settings=DEFAULT_SETTINGS)
        fd = FiniteDifference(cloud, frame, DEFAULT_SETTINGS, loss_kind)
        probes = []
        for name in OPTIMIZED:
            shape = grads.d_loss_d_params[name].shape
            for _ in range(2):
                idx = tuple(int(rng.integers(0, s)) for s in shape)
                num, kinked = fd.d_param(name, idx, 1e-5)
                probes.append((name, idx, num, kinked))
        if any(p[3] for p in probes):
            continue
        for name, idx, num, _ in probes:
            np.testing.assert_allclose(grads.d_loss_d_params[name][idx], num, rtol=1e-3, atol=1e-6,
                                       err_msg=f"{name}{idx}")
        checked += 1
