"""Adam fine-tuning of a Gaussian cloud (and optionally an appearance model) against training frames."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .model import FIELD_NAMES, CameraFrame, GaussianCloud
from .splat import DEFAULT_SETTINGS, DTYPE, RenderSettings, cloud_tensors, image_loss, rasterize

log = logging.getLogger(__name__)

LEARNING_RATES = {
    "mean_xyz": 1.6e-4,
    "mean_t": 1.6e-4,
    "scale_xyz": 5e-3,
    "scale_t": 5e-3,
    "rot_l": 1e-3,
    "rot_r": 1e-3,
    "opacity": 5e-2,
    "color_f": 2.5e-3,
    "feature": 2.5e-3,
    "mlp": 1e-3,
}

GEOMETRY_FIELDS = ("mean_xyz", "mean_t", "scale_xyz", "scale_t", "rot_l", "rot_r")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: int, loss: float, reference: float):
        super().__init__(message)
        self.step = step
        self.loss = loss
        self.reference = reference


class DivergenceGuard:
    """Aborts when the running loss exceeds ``factor`` times the initial running loss.

    Losses come from one random frame per step, so both sides are windowed
    means rather than single values.
    """

    def __init__(self, factor: float = 10.0, window: int = 10):
        self.factor = factor
        self.window = window
        self.history: list[float] = []
        self.reference: float | None = None

    def update(self, step: int, loss: float) -> None:
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step, loss, self.reference or 0.0)
        self.history.append(loss)
        if self.reference is None:
            if len(self.history) >= self.window:
                self.reference = float(np.mean(self.history[:self.window]))
            return
        recent = float(np.mean(self.history[-self.window:]))
        if self.factor > 0 and recent > self.factor * max(self.reference, 1e-12):
            raise DivergenceError(
                f"loss diverged at step {step}: running mean {recent:.4g} > "
                f"{self.factor:g} x initial {self.reference:.4g}", step, recent, self.reference)


class FrameSampler:
    """One frame per step, drawn from seeded shuffles of the frame list."""

    def __init__(self, n_frames: int, seed: int):
        if n_frames < 1:
            raise ValueError("need at least one frame")
        self.n = n_frames
        self.rng = np.random.default_rng(seed)
        self._order: list[int] = []

    def next(self) -> int:
        if not self._order:
            self._order = self.rng.permutation(self.n).tolist()
        return self._order.pop()


@dataclass
class OptimizerState:
    step: int
    learning_rates: dict[str, float]
    moments: dict[str, dict[str, list]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "learning_rates": self.learning_rates,
                           "moments": self.moments}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OptimizerState":
        d = json.loads(text)
        return cls(d["step"], d["learning_rates"], d.get("moments", {}))


class Trainer:
    """Per-group Adam on the unfrozen cloud parameters.

    With an appearance model, opacity and color come from the network and
    the stored per-Gaussian opacity/color are left alone. With a quantizer,
    the forward pass sees codewords (straight-through) for every quantized
    attribute.
    """

    def __init__(self, cloud: GaussianCloud, frames: Sequence[CameraFrame], appearance=None,
                 seed: int = 0, settings: RenderSettings | None = None, loss_kind: str = "l1",
                 lrs: Mapping[str, float] | None = None, train_geometry: bool = True,
                 frozen: Sequence[str] = (), quantizer=None, divergence_factor: float = 10.0,
                 warmup_steps: int | None = None):
        if not frames:
            raise ValueError("need at least one frame")
        self.frames = list(frames)
        self.stage = cloud.stage
        self.settings = settings or DEFAULT_SETTINGS
        self.loss_kind = loss_kind
        self.appearance = appearance
        self.quantizer = quantizer
        self.lrs = dict(LEARNING_RATES)
        self.lrs.update(lrs or {})
        self.params = cloud_tensors(cloud)
        self.sampler = FrameSampler(len(self.frames), seed)
        self.guard = DivergenceGuard(divergence_factor)
        self.step_count = 0
        self.losses: list[float] = []

        trainable = set(GEOMETRY_FIELDS) if train_geometry else set()
        if appearance is None:
            trainable |= {"opacity", "color_f"}
        else:
            trainable.add("feature")
        trainable -= set(frozen)
        self.trainable = sorted(trainable, key=FIELD_NAMES.index)

        groups = []
        for name in self.trainable:
            self.params[name].requires_grad_(True)
            groups.append({"params": [self.params[name]], "lr": self.lrs[name], "name": name})
        if appearance is not None and "mlp" not in frozen:
            groups.append({"params": list(appearance.parameters()), "lr": self.lrs["mlp"], "name": "mlp"})
        self.optimizer = torch.optim.Adam(groups, betas=(0.9, 0.999)) if groups else None

        if warmup_steps is None:
            warmup_steps = appearance.cfg.warmup_steps if appearance is not None else 0
        self.warmup_steps = warmup_steps if appearance is not None else 0
        if self.warmup_steps:
            self._targets = (torch.tensor(np.asarray(cloud.opacity), dtype=DTYPE),
                             torch.tensor(np.asarray(cloud.color_f), dtype=DTYPE))

    def render_params(self) -> dict[str, torch.Tensor]:
        return self.quantizer.apply(self.params) if self.quantizer is not None else self.params

    def _warmup_loss(self, frame: CameraFrame) -> torch.Tensor:
        p = self.params
        center = torch.tensor(frame.camera_center, dtype=DTYPE)
        view = p["mean_xyz"].detach() - center
        view = view / view.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        op, col = self.appearance(p["mean_xyz"].detach(), p["feature"], p["mean_t"].detach(), view)
        op_target, col_target = self._targets
        return (torch.mean((torch.sigmoid(op) - torch.sigmoid(op_target)) ** 2)
                + torch.mean((col - col_target) ** 2))

    def step(self) -> float:
        frame = self.frames[self.sampler.next()]
        if self.optimizer is None:
            self.step_count += 1
            return float("nan")
        warm = self.step_count < self.warmup_steps
        self.optimizer.zero_grad(set_to_none=True)
        if warm:
            loss = self._warmup_loss(frame)
        else:
            out = rasterize(self.render_params(), frame, self.settings, self.appearance)
            loss = image_loss(out.image, frame.image, self.loss_kind)
        value = float(loss.detach())
        if not warm:
            self.guard.update(self.step_count, value)
        if loss.requires_grad:
            loss.backward()
            self.optimizer.step()
        self.step_count += 1
        self.losses.append(value)
        if self.quantizer is not None:
            self.quantizer.maybe_refresh(self.step_count, self.params)
        return value

    def run(self, steps: int) -> list[float]:
        return [self.step() for _ in range(steps)]

    def cloud(self) -> GaussianCloud:
        fields = {k: v.detach().numpy().copy() for k, v in self.params.items()}
        return GaussianCloud(stage=self.stage, **fields)

    def state(self) -> OptimizerState:
        moments = {}
        if self.optimizer is not None:
            for group in self.optimizer.param_groups:
                st = self.optimizer.state.get(group["params"][0], {})
                if "exp_avg" in st and group["name"] != "mlp":
                    moments[group["name"]] = {"exp_avg": st["exp_avg"].flatten().tolist(),
                                              "exp_avg_sq": st["exp_avg_sq"].flatten().tolist()}
        lrs = {g["name"]: g["lr"] for g in self.optimizer.param_groups} if self.optimizer else {}
        return OptimizerState(self.step_count, lrs, moments)


def finetune(cloud: GaussianCloud, frames: Sequence[CameraFrame], steps: int, appearance=None,
             quantizer=None, seed: int = 0, **kwargs):
    """Fine-tune ``cloud`` for ``steps`` Adam steps; returns (cloud, appearance, trainer or None)."""
    if steps <= 0:
        return cloud, appearance, None
    if appearance is not None:
        appearance = appearance.clone()
    trainer = Trainer(cloud, frames, appearance=appearance, quantizer=quantizer, seed=seed,
                      warmup_steps=0, **kwargs)
    trainer.run(steps)
    return trainer.cloud(), trainer.appearance, trainer
