import numpy as np
import pytest

from gs4c.model import CameraFrame, GaussianCloud, Stage
from gs4c.synth import look_at


def unit_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_cloud(rng, n, feature_dim=4, spread=0.6, stage=Stage.PRETRAINED, as_float32=False):
    """Random Gaussians in a box around the origin, sized for a 16-64 px camera at distance 3."""
    cloud = GaussianCloud(
        mean_xyz=rng.uniform(-spread, spread, (n, 3)),
        mean_t=rng.uniform(0.2, 0.8, n),
        scale_xyz=np.log(rng.uniform(0.08, 0.25, (n, 3))),
        scale_t=np.log(rng.uniform(0.2, 0.6, n)),
        rot_l=unit_quaternions(rng, n),
        rot_r=unit_quaternions(rng, n),
        opacity=rng.uniform(-1.0, 2.0, n),
        color_f=rng.uniform(0.1, 0.9, (n, 3)),
        feature=rng.normal(0, 0.3, (n, feature_dim)),
        stage=stage,
    )
    if as_float32:
        cloud = cloud.replace(**{k: v.astype(np.float32) for k, v in cloud.fields().items()})
    return cloud


def make_frame(size=16, t=0.5, eye=(0.0, 0.0, -3.0), image=None, focal=None):
    h, w = (size, size) if np.isscalar(size) else size
    focal = focal or 1.2 * w
    if image is None:
        image = np.zeros((h, w, 3))
    return CameraFrame(focal, focal, (w - 1) / 2, (h - 1) / 2, look_at(np.asarray(eye, dtype=float)), t, image)


def ring_frames(count=4, size=16, times=(0.5,), radius=3.0, images=None):
    frames = []
    for t in times:
        for c in range(count):
            a = 2 * np.pi * c / count
            frames.append(make_frame(size, t, (radius * np.sin(a), 0.3, -radius * np.cos(a))))
    return frames


def with_targets(cloud, frames, appearance=None):
    from gs4c.splat import render

    return [f.with_image(render(cloud, f, appearance)) for f in frames]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
