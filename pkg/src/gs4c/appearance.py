"""Implicit appearance: a spatial trunk MLP plus opacity / static-color / view-dependent heads."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .model import CameraFrame, GaussianCloud

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AppearanceConfig:
    feature_dim: int = 8
    n_freqs: int = 4
    trunk_width: int = 64
    trunk_layers: int = 2
    latent_dim: int = 32
    head_width: int = 32
    warmup_steps: int = 500
    lr: float = 1e-3
    feature_lr: float = 2.5e-3


class AppearanceModel(nn.Module):
    """Maps (position, feature, time, view direction) to an opacity logit and an RGB color.

    Positions are normalized by ``pos_center`` / ``pos_scale`` before the
    sinusoidal encoding so that the frequency bands are scene-size agnostic.
    """

    def __init__(self, cfg: AppearanceConfig = AppearanceConfig(), pos_center=(0.0, 0.0, 0.0),
                 pos_scale: float = 1.0, dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("pos_center", torch.as_tensor(pos_center, dtype=dtype).reshape(3))
        self.register_buffer("pos_scale", torch.as_tensor(float(pos_scale), dtype=dtype))
        in_dim = 3 + 6 * cfg.n_freqs + cfg.feature_dim + 3

        layers: list[nn.Module] = []
        width = in_dim
        for _ in range(cfg.trunk_layers):
            layers += [nn.Linear(width, cfg.trunk_width), nn.ReLU()]
            width = cfg.trunk_width
        layers.append(nn.Linear(width, cfg.latent_dim))
        self.trunk = nn.Sequential(*layers)
        self.head_opacity = _head(cfg.latent_dim, cfg.head_width, 1)
        self.head_static = _head(cfg.latent_dim, cfg.head_width, 3)
        self.head_viewdep = _head(cfg.latent_dim + 3, cfg.head_width, 3)
        self.to(dtype)

    @property
    def input_dim(self) -> int:
        return self.trunk[0].in_features

    def encode(self, mean_xyz: torch.Tensor, feature: torch.Tensor, t) -> torch.Tensor:
        x = (mean_xyz - self.pos_center) / self.pos_scale
        bands = [x]
        for k in range(self.cfg.n_freqs):
            arg = (2.0 ** k) * torch.pi * x
            bands += [torch.sin(arg), torch.cos(arg)]
        t = torch.as_tensor(t, dtype=x.dtype)
        t = t.expand(x.shape[0]) if t.ndim == 0 else t
        tt = torch.stack([t, torch.sin(2 * torch.pi * t), torch.cos(2 * torch.pi * t)], dim=-1)
        return torch.cat(bands + [feature, tt], dim=-1)

    def forward(self, mean_xyz: torch.Tensor, feature: torch.Tensor, t, view_dir: torch.Tensor):
        if feature.shape[-1] != self.cfg.feature_dim:
            raise ConfigurationError(
                f"feature width {feature.shape[-1]} != configured {self.cfg.feature_dim}")
        latent = self.trunk(self.encode(mean_xyz, feature, t))
        opacity_logit = self.head_opacity(latent).squeeze(-1)
        static = torch.sigmoid(self.head_static(latent))
        residual = self.head_viewdep(torch.cat([latent, view_dir], dim=-1))
        color = torch.clamp(static + residual, 0.0, 1.0)
        return opacity_logit, color

    def clone(self) -> "AppearanceModel":
        other = AppearanceModel(self.cfg, self.pos_center.clone(), float(self.pos_scale),
                                dtype=self.pos_center.dtype)
        other.load_state_dict(self.state_dict())
        return other

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud, cfg: AppearanceConfig | None = None, seed: int = 0,
                  dtype=torch.float64) -> "AppearanceModel":
        """Seeded initialization with position normalization fitted to ``cloud``."""
        cfg = cfg or AppearanceConfig(feature_dim=cloud.feature_dim)
        lo, hi = cloud.mean_xyz.min(axis=0), cloud.mean_xyz.max(axis=0)
        center = (lo + hi) / 2
        scale = max(float(np.max(hi - lo)) / 2, 1e-6)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(cfg, center, scale, dtype=dtype)


def _head(in_dim: int, width: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, width), nn.ReLU(), nn.Linear(width, out_dim))


def forward(model: AppearanceModel, g, t: float, view_dir) -> tuple[float, np.ndarray]:
    """Evaluate a single Gaussian; returns (opacity logit, RGB)."""
    dtype = model.pos_center.dtype
    with torch.no_grad():
        op, col = model(
            torch.as_tensor(np.asarray(g.mean_xyz), dtype=dtype)[None],
            torch.as_tensor(np.asarray(g.feature), dtype=dtype)[None],
            float(t),
            torch.as_tensor(np.asarray(view_dir), dtype=dtype)[None],
        )
    return float(op[0]), col[0].numpy()


# --------------------------------------------------------------------------
# checkpoint: u32 json length, json config, u32 tensor count,
# per tensor (u8 ndim, u32 dims...), then little-endian float32 payload
# --------------------------------------------------------------------------

def save_checkpoint(model: AppearanceModel) -> bytes:
    meta = {"config": asdict(model.cfg),
            "pos_center": [float(v) for v in model.pos_center.to(torch.float32).tolist()],
            "pos_scale": float(np.float32(float(model.pos_scale)))}
    meta_b = json.dumps(meta, sort_keys=True).encode()
    tensors = [p.detach() for name, p in model.state_dict().items() if not name.startswith("pos_")]
    out = io.BytesIO()
    out.write(struct.pack("<I", len(meta_b)))
    out.write(meta_b)
    out.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        out.write(struct.pack("<B", t.ndim))
        out.write(struct.pack(f"<{t.ndim}I", *t.shape))
    for t in tensors:
        out.write(t.cpu().numpy().astype("<f4").tobytes())
    return out.getvalue()


def load_checkpoint(data: bytes, dtype=torch.float64) -> AppearanceModel:
    buf = memoryview(data)
    (n_meta,) = struct.unpack_from("<I", buf, 0)
    meta = json.loads(bytes(buf[4:4 + n_meta]))
    off = 4 + n_meta
    (n_tensors,) = struct.unpack_from("<I", buf, off)
    off += 4
    shapes = []
    for _ in range(n_tensors):
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shapes.append(struct.unpack_from(f"<{ndim}I", buf, off))
        off += 4 * ndim
    model = AppearanceModel(AppearanceConfig(**meta["config"]), meta["pos_center"], meta["pos_scale"], dtype=dtype)
    names = [n for n in model.state_dict() if not n.startswith("pos_")]
    if len(names) != n_tensors:
        raise ConfigurationError(f"checkpoint holds {n_tensors} tensors, model expects {len(names)}")
    state = {}
    for name, shape in zip(names, shapes):
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        state[name] = torch.as_tensor(arr.astype(np.float64), dtype=dtype)
    state["pos_center"] = model.pos_center
    state["pos_scale"] = model.pos_scale
    model.load_state_dict(state)
    return model


def round_to_float32(model: AppearanceModel) -> AppearanceModel:
    """Copy of ``model`` with every weight rounded to float32 (what a container stores)."""
    return load_checkpoint(save_checkpoint(model), dtype=model.pos_center.dtype)


# --------------------------------------------------------------------------
# distillation
# --------------------------------------------------------------------------

def distill(model: AppearanceModel, cloud: GaussianCloud, frames: Sequence[CameraFrame], steps: int,
            seed: int = 0, settings=None, loss_kind: str = "l1", divergence_factor: float = 10.0,
            train_geometry: bool = False, lrs=None, history: list | None = None
            ) -> tuple[AppearanceModel, GaussianCloud]:
    """Fit ``model`` and per-Gaussian features so renders match ``frames``.

    The first ``cfg.warmup_steps`` steps (capped at ``steps``) regress the heads
    onto the cloud's stored opacity and color; the rest minimize the rendering
    loss end to end. Gaussian geometry is held fixed unless ``train_geometry``.
    Returns the new model and the cloud with updated features.
    """
    from .optim import Trainer

    if steps <= 0:
        return model, cloud
    trainer = Trainer(cloud, frames, appearance=model.clone(), seed=seed, settings=settings,
                      loss_kind=loss_kind, train_geometry=train_geometry, lrs=lrs,
                      divergence_factor=divergence_factor)
    losses = trainer.run(steps)
    if history is not None:
        history.extend(losses[trainer.warmup_steps:])
    return trainer.appearance, trainer.cloud()
