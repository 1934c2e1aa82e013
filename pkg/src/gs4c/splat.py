"""Desk-scale differentiable splatting of 4D Gaussians.

Each Gaussian is conditioned on the frame timestamp, projected with the
usual EWA linearization, and composited front to back per pixel. The
forward pass is written in torch so that the backward pass is exact for
the implemented forward (including the temporal marginal and the
time-dependent conditional mean).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .model import FIELD_NAMES, CameraFrame, GaussianCloud

DTYPE = torch.float64


class DegenerateCovarianceError(ValueError):
    pass


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class RenderSettings:
    cov2d_blur: float = 0.3
    alpha_max: float = 0.999
    alpha_min: float = 1.0 / 255.0
    cull_sigma: float = 3.0
    near: float = 0.2
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


DEFAULT_SETTINGS = RenderSettings()

# Thresholds off and an unbounded footprint: the forward is smooth almost
# everywhere, which is what finite-difference checks want.
SMOOTH_SETTINGS = RenderSettings(alpha_min=0.0, cull_sigma=float("inf"))


@dataclass
class Conditioned3D:
    mean3: np.ndarray
    cov3: np.ndarray
    temporal_weight: float


@dataclass
class RenderStats:
    behind_camera: int = 0
    singular: int = 0
    low_alpha: int = 0
    offscreen: int = 0
    pairs: int = 0


@dataclass
class RenderGradients:
    d_loss_d_u: np.ndarray
    d_loss_d_t: np.ndarray
    d_loss_d_params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class RenderOutput:
    image: torch.Tensor          # (H, W, 3)
    means2d: torch.Tensor        # (N, 2), includes the offset leaf
    depth: torch.Tensor          # (N,)
    temporal_weight: torch.Tensor
    stats: RenderStats
    # pattern of discrete decisions, used to detect kinks in FD checks
    pattern: tuple = ()


# --------------------------------------------------------------------------
# 4D geometry
# --------------------------------------------------------------------------

# quaternion (w, x, y, z) index for each of the (x, y, z, t) axes
_AXIS_TO_QUAT = [1, 2, 3, 0]


def left_matrix(q: torch.Tensor) -> torch.Tensor:
    """Matrix of v -> q * v in (w, x, y, z) coordinates."""
    a, b, c, d = q.unbind(-1)
    return torch.stack([
        torch.stack([a, -b, -c, -d], -1),
        torch.stack([b, a, -d, c], -1),
        torch.stack([c, d, a, -b], -1),
        torch.stack([d, -c, b, a], -1),
    ], -2)


def right_matrix(q: torch.Tensor) -> torch.Tensor:
    """Matrix of v -> v * q in (w, x, y, z) coordinates."""
    p0, p1, p2, p3 = q.unbind(-1)
    return torch.stack([
        torch.stack([p0, -p1, -p2, -p3], -1),
        torch.stack([p1, p0, p3, -p2], -1),
        torch.stack([p2, -p3, p0, p1], -1),
        torch.stack([p3, p2, -p1, p0], -1),
    ], -2)


def rotation_4d(rot_l: torch.Tensor, rot_r: torch.Tensor) -> torch.Tensor:
    """4x4 rotation acting on (x, y, z, t) as v -> q_l * v * q_r.

    Time is the real quaternion axis, so q_r = conj(q_l) is a purely spatial
    rotation.
    """
    ql = rot_l / rot_l.norm(dim=-1, keepdim=True)
    qr = rot_r / rot_r.norm(dim=-1, keepdim=True)
    m = left_matrix(ql) @ right_matrix(qr)
    idx = torch.tensor(_AXIS_TO_QUAT)
    return m[..., idx, :][..., :, idx]


def covariance_4d(scale_xyz: torch.Tensor, scale_t: torch.Tensor, rot_l: torch.Tensor,
                  rot_r: torch.Tensor) -> torch.Tensor:
    rot = rotation_4d(rot_l, rot_r)
    s = torch.exp(torch.cat([scale_xyz, scale_t[..., None]], dim=-1))
    m = rot * s[..., None, :]
    return m @ m.transpose(-1, -2)


def condition(params: dict[str, torch.Tensor], t: float, min_var: float = 1e-12):
    """Batched conditioning of 4D Gaussians on time ``t``.

    Returns (mean3 (N,3), cov3 (N,3,3), temporal_weight (N,)).
    """
    cov4 = covariance_4d(params["scale_xyz"], params["scale_t"], params["rot_l"], params["rot_r"])
    var_t = cov4[:, 3, 3]
    if var_t.numel() and float(var_t.detach().min()) < min_var:
        bad = int(torch.argmin(var_t.detach()))
        raise DegenerateCovarianceError(f"temporal variance {float(var_t[bad].detach()):.3e} at Gaussian {bad}")
    cov_xt = cov4[:, :3, 3]
    dt = t - params["mean_t"]
    mean3 = params["mean_xyz"] + cov_xt / var_t[:, None] * dt[:, None]
    cov3 = cov4[:, :3, :3] - cov_xt[:, :, None] * cov_xt[:, None, :] / var_t[:, None, None]
    weight = torch.exp(-0.5 * dt * dt / var_t)
    return mean3, cov3, weight


def condition_at(g, t: float) -> Conditioned3D:
    """Condition a single Gaussian4D on time ``t``."""
    params = {
        "mean_xyz": torch.as_tensor(np.asarray(g.mean_xyz, dtype=np.float64))[None],
        "mean_t": torch.tensor([float(g.mean_t)], dtype=DTYPE),
        "scale_xyz": torch.as_tensor(np.asarray(g.scale_xyz, dtype=np.float64))[None],
        "scale_t": torch.tensor([float(g.scale_t)], dtype=DTYPE),
        "rot_l": torch.as_tensor(np.asarray(g.rot_l, dtype=np.float64))[None],
        "rot_r": torch.as_tensor(np.asarray(g.rot_r, dtype=np.float64))[None],
    }
    mean3, cov3, w = condition(params, float(t))
    return Conditioned3D(mean3[0].numpy(), cov3[0].numpy(), float(w[0]))


# --------------------------------------------------------------------------
# rasterization
# --------------------------------------------------------------------------

def cloud_tensors(cloud: GaussianCloud, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    return {
        k: torch.tensor(np.asarray(getattr(cloud, k)), dtype=DTYPE, requires_grad=requires_grad)
        for k in FIELD_NAMES
    }


def frame_tensors(frame: CameraFrame):
    ext = torch.tensor(frame.extrinsics, dtype=DTYPE)
    return ext[:3, :3], ext[:3, 3]


def _pixel_pairs(u: np.ndarray, v: np.ndarray, rx: np.ndarray, ry: np.ndarray, ids: np.ndarray,
                 width: int, height: int):
    """All (gaussian, pixel) pairs inside each Gaussian's screen-space box."""
    x0 = np.clip(np.ceil(u - rx), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(u + rx), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v - ry), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(v + ry), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, counts
    starts = np.cumsum(counts) - counts
    rep = np.repeat(np.arange(len(ids)), counts)
    k = np.arange(total) - starts[rep]
    px = x0[rep] + k % nx[rep]
    py = y0[rep] + k // nx[rep]
    return ids[rep], px, py, counts


def rasterize(params: dict[str, torch.Tensor], frame: CameraFrame,
              settings: RenderSettings = DEFAULT_SETTINGS, appearance=None,
              u_offset: Optional[torch.Tensor] = None) -> RenderOutput:
    """Render tensors in ``params`` (keys as GaussianCloud fields) for ``frame``.

    ``u_offset`` is an optional (N, 2) tensor added to the projected means;
    its gradient is the view-space position gradient.
    """
    H, W = frame.height, frame.width
    n = params["mean_t"].shape[0]
    stats = RenderStats()
    bg = torch.tensor(settings.background, dtype=DTYPE)
    if n == 0:
        img = bg.expand(H, W, 3).clone()
        z = torch.zeros(0, dtype=DTYPE)
        return RenderOutput(img, torch.zeros(0, 2, dtype=DTYPE), z, z, stats, ())

    t = float(frame.timestamp)
    mean3, cov3, tw = condition(params, t)
    rot, trans = frame_tensors(frame)
    pc = mean3 @ rot.T + trans
    z = pc[:, 2]
    z_np = z.detach().numpy()
    in_front = z_np > settings.near
    stats.behind_camera = int((~in_front).sum())
    zs = torch.where(torch.as_tensor(in_front), z, torch.ones_like(z))

    u = frame.fx * pc[:, 0] / zs + frame.cx
    v = frame.fy * pc[:, 1] / zs + frame.cy
    means2d = torch.stack([u, v], dim=-1)
    if u_offset is not None:
        means2d = means2d + u_offset

    # EWA projection of the conditional covariance
    zero = torch.zeros_like(zs)
    jac = torch.stack([
        torch.stack([frame.fx / zs, zero, -frame.fx * pc[:, 0] / (zs * zs)], -1),
        torch.stack([zero, frame.fy / zs, -frame.fy * pc[:, 1] / (zs * zs)], -1),
    ], -2)
    cov_cam = rot @ cov3 @ rot.T
    cov2 = jac @ cov_cam @ jac.transpose(-1, -2)
    a = cov2[:, 0, 0] + settings.cov2d_blur
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + settings.cov2d_blur
    det = a * c - b * b
    det_np = det.detach().numpy()
    nonsingular = np.isfinite(det_np) & (det_np > 1e-12)
    stats.singular = int((in_front & ~nonsingular).sum())

    if appearance is not None:
        center = torch.tensor(frame.camera_center, dtype=DTYPE)
        view = mean3 - center
        view = view / view.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        opacity_logit, color = appearance(params["mean_xyz"], params["feature"], t, view)
    else:
        opacity_logit, color = params["opacity"], params["color_f"]
    peak = torch.sigmoid(opacity_logit) * tw
    peak_np = peak.detach().numpy()
    visible = in_front & nonsingular & (peak_np >= settings.alpha_min)
    stats.low_alpha = int((in_front & nonsingular & ~visible).sum())

    ids = np.nonzero(visible)[0]
    m2 = means2d.detach().numpy()
    a_np, c_np = a.detach().numpy(), c.detach().numpy()
    rx = settings.cull_sigma * np.sqrt(a_np[ids])
    ry = settings.cull_sigma * np.sqrt(c_np[ids])
    if not np.isfinite(settings.cull_sigma):
        rx = np.full(len(ids), float(W + H))
        ry = rx
    g, px, py, counts = _pixel_pairs(m2[ids, 0], m2[ids, 1], rx, ry, ids, W, H)
    stats.offscreen = int((counts == 0).sum())

    img = torch.zeros(H * W, 3, dtype=DTYPE)
    final_log_t = torch.zeros(H * W, dtype=DTYPE)
    pattern: tuple = ()
    if len(g):
        gt = torch.as_tensor(g)
        dx = torch.as_tensor(px, dtype=DTYPE) - means2d[gt, 0]
        dy = torch.as_tensor(py, dtype=DTYPE) - means2d[gt, 1]
        power = -0.5 * (c[gt] * dx * dx - 2 * b[gt] * dx * dy + a[gt] * dy * dy) / det[gt]
        alpha = peak[gt] * torch.exp(power)
        alpha_np = alpha.detach().numpy()
        keep = alpha_np >= settings.alpha_min
        clamped = alpha_np > settings.alpha_max
        if not keep.all():
            kt = torch.as_tensor(np.nonzero(keep)[0])
            alpha, gt = alpha[kt], gt[kt]
            g, px, py, clamped = g[keep], px[keep], py[keep], clamped[keep]
        alpha = torch.clamp(alpha, max=settings.alpha_max)
        stats.pairs = len(g)

        # front-to-back order within each pixel; ties in depth go to the lower index
        rank = np.empty(n, dtype=np.int64)
        rank[np.argsort(z_np, kind="stable")] = np.arange(n)
        pid = py * W + px
        order = np.argsort(pid * n + rank[g], kind="stable")
        pid, g_sorted = pid[order], g[order]
        ot = torch.as_tensor(order)
        alpha = alpha[ot]
        clamped = clamped[order]

        seg_start = np.r_[0, np.nonzero(np.diff(pid))[0] + 1]
        seg_len = np.diff(np.r_[seg_start, len(pid)])
        pos = np.arange(len(pid)) - np.repeat(seg_start, seg_len)
        rows = np.repeat(np.arange(len(seg_start)), seg_len)
        log_q = torch.log1p(-alpha)
        dense = torch.zeros(len(seg_start), int(seg_len.max()), dtype=DTYPE)
        dense = dense.index_put((torch.as_tensor(rows), torch.as_tensor(pos)), log_q)
        incl = torch.cumsum(dense, dim=1)
        excl = incl - dense
        trans_before = torch.exp(excl[torch.as_tensor(rows), torch.as_tensor(pos)])
        weight = alpha * trans_before
        contrib = weight[:, None] * color[torch.as_tensor(g_sorted)]
        pid_t = torch.as_tensor(pid)
        img = img.index_add(0, pid_t, contrib)
        seg_pix = torch.as_tensor(pid[seg_start])
        final_log_t = final_log_t.index_put((seg_pix,), incl[:, -1])
        pattern = (tuple(order.tolist()), tuple(pid.tolist()), tuple(g_sorted.tolist()),
                   tuple(np.nonzero(clamped)[0].tolist()))

    if settings.background != (0.0, 0.0, 0.0):
        img = img + torch.exp(final_log_t)[:, None] * bg
    pattern = pattern + (tuple(np.nonzero(visible)[0].tolist()),)
    return RenderOutput(img.reshape(H, W, 3), means2d, z, tw, stats, pattern)


def image_loss(image: torch.Tensor, target, loss_kind: str = "l1") -> torch.Tensor:
    target = torch.tensor(np.asarray(target), dtype=image.dtype)
    diff = image - target
    if loss_kind == "l1":
        return diff.abs().mean()
    if loss_kind == "l2":
        return (diff * diff).mean()
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def render(cloud: GaussianCloud, frame: CameraFrame, appearance=None,
           settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Render ``cloud`` at ``frame``; returns an HxWx3 float64 array in [0, 1]."""
    with torch.no_grad():
        out = rasterize(cloud_tensors(cloud), frame, settings, appearance)
    return out.image.numpy()


def render_with_stats(cloud: GaussianCloud, frame: CameraFrame, appearance=None,
                      settings: RenderSettings = DEFAULT_SETTINGS) -> tuple[np.ndarray, RenderStats]:
    with torch.no_grad():
        out = rasterize(cloud_tensors(cloud), frame, settings, appearance)
    return out.image.numpy(), out.stats


def render_backward(cloud: GaussianCloud, frame: CameraFrame, loss_kind: str = "l1",
                    appearance=None, settings: RenderSettings = DEFAULT_SETTINGS
                    ) -> tuple[float, RenderGradients]:
    """Loss against ``frame.image`` and its gradients for every Gaussian.

    ``d_loss_d_u`` is taken with respect to the projected 2D means and
    ``d_loss_d_t`` with respect to the temporal means.
    """
    params = cloud_tensors(cloud, requires_grad=True)
    offset = torch.zeros(len(cloud), 2, dtype=DTYPE, requires_grad=True)
    out = rasterize(params, frame, settings, appearance, u_offset=offset)
    loss = image_loss(out.image, frame.image, loss_kind)
    inputs = [offset] + [params[k] for k in FIELD_NAMES]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    else:
        grads = [None] * len(inputs)
    grads = [torch.zeros_like(x) if gr is None else gr for x, gr in zip(inputs, grads)]
    by_name = {k: gr.numpy() for k, gr in zip(FIELD_NAMES, grads[1:])}
    return float(loss.detach()), RenderGradients(grads[0].numpy(), by_name["mean_t"].copy(), by_name)


def psnr(image: np.ndarray, target: np.ndarray, floor: float = 1e-10) -> float:
    mse = float(np.mean((np.asarray(image, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    return 10.0 * np.log10(1.0 / max(mse, floor))


def save_png(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_raw(image: np.ndarray, path: str | Path) -> None:
    """Planar float32 dump: three HxW planes, little-endian, no header."""
    planar = np.ascontiguousarray(np.moveaxis(np.asarray(image, dtype="<f4"), -1, 0))
    Path(path).write_bytes(planar.tobytes())


def load_raw(path: str | Path, height: int, width: int) -> np.ndarray:
    planar = np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(3, height, width)
    return np.moveaxis(planar, 0, -1).astype(np.float64)
