"""Procedural multi-view dynamic scenes for desk-scale experiments."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .model import CameraFrame, GaussianCloud, Stage
from .splat import render, rotation_4d, load_png, save_png

MOTION_PRESETS = ("static", "oscillating-blob", "two-speed")
STATIC_LOG_SCALE_T = math.log(1e4)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    gaussian_count: int = 2000
    frame_count: int = 20
    camera_count: int = 16
    height: int = 64
    width: int = 64
    ring_radius: float = 3.5
    motion: str = "two-speed"
    feature_dim: int = 8

    def __post_init__(self):
        if self.gaussian_count < 1 or self.frame_count < 1 or self.camera_count < 1:
            raise ValueError("gaussian, frame and camera counts must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ValueError("images must be at least 8x8")
        if self.motion not in MOTION_PRESETS:
            raise ValueError(f"motion must be one of {MOTION_PRESETS}, got {self.motion!r}")


# --------------------------------------------------------------------------
# 4D Gaussians from moments
# --------------------------------------------------------------------------

def _basis_rotations() -> np.ndarray:
    eye = torch.eye(4, dtype=torch.float64)
    out = np.empty((4, 4, 4, 4))
    for i in range(4):
        for j in range(4):
            out[i, j] = rotation_4d(eye[i][None], eye[j][None])[0].numpy()
    return out


_BASIS = _basis_rotations()


def quaternion_pair(rot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a 4x4 rotation in (x, y, z, t) coordinates into left and right unit quaternions.

    The rotation is bilinear in the pair, and its coefficients against the
    16 basis products form the rank-1 matrix q_l q_r^T.
    """
    coef = np.einsum("ijab,ab->ij", _BASIS, rot) / 4.0
    u, s, vt = np.linalg.svd(coef)
    ql, qr = u[:, 0] * math.sqrt(s[0]), vt[0] * math.sqrt(s[0])
    if ql[0] < 0:
        ql, qr = -ql, -qr
    return ql / np.linalg.norm(ql), qr / np.linalg.norm(qr)


def from_moments(cov4: np.ndarray) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """(log scale_xyz, log scale_t, rot_l, rot_r) reproducing a 4D covariance."""
    evals, evecs = np.linalg.eigh(cov4)
    # keep the time-dominant axis last so it lands in scale_t
    t_axis = int(np.argmax(np.abs(evecs[3])))
    order = [i for i in range(4) if i != t_axis] + [t_axis]
    evals, evecs = evals[order], evecs[:, order]
    if np.linalg.det(evecs) < 0:
        evecs[:, 0] = -evecs[:, 0]
    ql, qr = quaternion_pair(evecs)
    logs = 0.5 * np.log(np.maximum(evals, 1e-30))
    return logs[:3], float(logs[3]), ql, qr


def moving_covariance(spatial_sigma: np.ndarray, rot3: np.ndarray, sigma_t: float,
                      velocity: np.ndarray) -> np.ndarray:
    """Covariance whose time slices keep shape rot3 diag(sigma^2) rot3^T and drift at ``velocity``."""
    cov3 = rot3 @ np.diag(np.asarray(spatial_sigma) ** 2) @ rot3.T
    v = np.asarray(velocity, dtype=np.float64)
    var_t = sigma_t ** 2
    cov4 = np.empty((4, 4))
    cov4[:3, :3] = cov3 + np.outer(v, v) * var_t
    cov4[:3, 3] = cov4[3, :3] = v * var_t
    cov4[3, 3] = var_t
    return cov4


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _static_quaternions(rot3: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rot4 = np.eye(4)
    rot4[:3, :3] = rot3
    return quaternion_pair(rot4)


# --------------------------------------------------------------------------
# scene content
# --------------------------------------------------------------------------

def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def _group_sizes(spec: SyntheticSceneSpec) -> tuple[int, int, int]:
    n = spec.gaussian_count
    if spec.motion == "static":
        return n, 0, 0
    if spec.motion == "oscillating-blob":
        fast = max(1, n // 5)
        return n - fast, fast, 0
    fast = max(1, int(round(0.15 * n))) if n >= 3 else min(n, 1)
    slow = max(1, int(round(0.15 * n))) if n >= 3 else max(0, n - 1)
    return n - fast - slow, fast, slow


def ground_truth_cloud(spec: SyntheticSceneSpec) -> GaussianCloud:
    rng = np.random.default_rng(spec.seed)
    n_bg, n_fast, n_slow = _group_sizes(spec)
    rows = []

    # a fully static scene has effectively unbounded lifespans; otherwise the
    # background is made of long-lived but finite Gaussians, as a 4D fit would be
    static = spec.motion == "static"

    def floor():
        # a slab below the movers (image y points down), so nothing hides them
        return np.array([rng.uniform(-1.2, 1.2), rng.uniform(0.35, 0.6), rng.uniform(-1.2, 1.2)])

    for _ in range(n_bg):
        rot3 = _random_rotation(rng)
        ql, qr = _static_quaternions(rot3)
        mean_t = 0.5 if static else float(rng.uniform(0.3, 0.7))
        scale_t = STATIC_LOG_SCALE_T if static else math.log(rng.uniform(1.5, 3.0))
        rows.append(dict(mean_xyz=floor(), mean_t=mean_t,
                         scale_xyz=np.log(rng.uniform(0.04, 0.10, 3)), scale_t=scale_t,
                         rot_l=ql, rot_r=qr, opacity=_logit(rng.uniform(0.5, 0.95)),
                         color_f=rng.uniform(0.05, 0.95, 3)))

    def movers(count, path, sigma_t, size, color):
        for k in range(count):
            mu_t = (k + 0.5) / count if count else 0.5
            mu_t = float(np.clip(mu_t + rng.normal(0, 0.01), 0.0, 1.0))
            pos, vel = path(mu_t)
            rot3 = _random_rotation(rng)
            cov4 = moving_covariance(rng.uniform(0.6, 1.0, 3) * size, rot3, sigma_t, vel)
            sx, st, ql, qr = from_moments(cov4)
            rows.append(dict(mean_xyz=pos + rng.normal(0, size / 2, 3), mean_t=mu_t, scale_xyz=sx,
                             scale_t=st, rot_l=ql, rot_r=qr, opacity=_logit(rng.uniform(0.7, 0.95)),
                             color_f=np.clip(np.asarray(color) + rng.normal(0, 0.05, 3), 0, 1)))

    omega = 2 * math.pi

    def fast_path(t):
        pos = np.array([0.8 * math.sin(omega * t), 0.0, 0.3])
        vel = np.array([0.8 * omega * math.cos(omega * t), 0.0, 0.0])
        return pos, vel

    def slow_path(t):
        pos = np.array([-0.4, 0.3 * (t - 0.5), -0.3])
        vel = np.array([0.0, 0.3, 0.0])
        return pos, vel

    movers(n_fast, fast_path, 0.04, 0.08, (0.95, 0.2, 0.1))
    movers(n_slow, slow_path, 0.25, 0.10, (0.1, 0.4, 0.95))

    cols = {k: np.stack([np.asarray(r[k], dtype=np.float64) for r in rows]) for k in rows[0]}
    feature = np.zeros((len(rows), spec.feature_dim))
    return GaussianCloud(**cols, feature=feature, stage=Stage.PRETRAINED)


def group_labels(spec: SyntheticSceneSpec) -> np.ndarray:
    """0 for static background, 1 for the fast mover, 2 for the slow mover, per Gaussian."""
    n_bg, n_fast, n_slow = _group_sizes(spec)
    return np.repeat([0, 1, 2], [n_bg, n_fast, n_slow])


def perturbed(cloud: GaussianCloud, seed: int, feature_sigma: float = 0.1) -> GaussianCloud:
    """A slightly-off copy standing in for a pretrained reconstruction."""
    rng = np.random.default_rng(seed + 1)
    n = len(cloud)
    return cloud.replace(
        mean_xyz=cloud.mean_xyz + rng.normal(0, 0.01, (n, 3)),
        scale_xyz=cloud.scale_xyz + rng.normal(0, 0.05, (n, 3)),
        opacity=cloud.opacity + rng.normal(0, 0.2, n),
        color_f=np.clip(cloud.color_f + rng.normal(0, 0.03, (n, 3)), 0, 1),
        feature=rng.normal(0, feature_sigma, cloud.feature.shape),
    )


# --------------------------------------------------------------------------
# cameras and frames
# --------------------------------------------------------------------------

def look_at(eye: np.ndarray, target=(0.0, 0.0, 0.0), up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix, camera looking down +z with y pointing down in the image."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    return ext


def ring_cameras(spec: SyntheticSceneSpec) -> list[dict]:
    focal = 1.1 * spec.width
    cams = []
    for c in range(spec.camera_count):
        ang = 2 * math.pi * c / spec.camera_count
        eye = np.array([spec.ring_radius * math.cos(ang), -0.3 * spec.ring_radius * (0.5 + 0.5 * math.sin(3 * ang)),
                        spec.ring_radius * math.sin(ang)])
        cams.append(dict(fx=focal, fy=focal, cx=(spec.width - 1) / 2, cy=(spec.height - 1) / 2,
                         extrinsics=look_at(eye)))
    return cams


def timestamps(frame_count: int) -> np.ndarray:
    """Frame times symmetric about 0.5 in (0, 1)."""
    return (np.arange(frame_count) + 0.5) / frame_count


def frame_name(frame: int, cam: int) -> str:
    return f"f{frame:04d}_c{cam:02d}.png"


def quantize_image(image: np.ndarray) -> np.ndarray:
    """The 8-bit round trip a PNG applies."""
    return np.round(np.clip(image, 0, 1) * 255) / 255


def generate(spec: SyntheticSceneSpec) -> tuple[GaussianCloud, GaussianCloud, list[CameraFrame]]:
    """(ground truth, perturbed pretrained stand-in, frames rendered from the ground truth)."""
    gt = ground_truth_cloud(spec)
    blank = np.zeros((spec.height, spec.width, 3))
    frames = []
    for k, t in enumerate(timestamps(spec.frame_count)):
        for cam in ring_cameras(spec):
            f = CameraFrame(cam["fx"], cam["fy"], cam["cx"], cam["cy"], cam["extrinsics"], float(t), blank)
            frames.append(f.with_image(quantize_image(render(gt, f))))
    return gt, perturbed(gt, spec.seed), frames


def write_frames(frames: list[CameraFrame], out_dir: str | Path, spec: SyntheticSceneSpec | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_cams = spec.camera_count if spec else len(frames)
    records = []
    for i, f in enumerate(frames):
        name = frame_name(i // n_cams, i % n_cams)
        save_png(f.image, out / name)
        records.append({"file": name, "frame": i // n_cams, "camera": i % n_cams, "fx": f.fx, "fy": f.fy,
                        "cx": f.cx, "cy": f.cy, "timestamp": f.timestamp,
                        "extrinsics": np.asarray(f.extrinsics).tolist()})
    meta = {"frames": records}
    if spec is not None:
        meta["spec"] = asdict(spec)
    (out / "cameras.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_frames(frames_dir: str | Path) -> list[CameraFrame]:
    d = Path(frames_dir)
    meta = json.loads((d / "cameras.json").read_text())
    frames = []
    for r in meta["frames"]:
        frames.append(CameraFrame(r["fx"], r["fy"], r["cx"], r["cy"], np.asarray(r["extrinsics"]),
                                  float(r["timestamp"]), load_png(d / r["file"])))
    return frames
