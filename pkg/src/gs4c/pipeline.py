"""End-to-end schedule: sample, prune, merge, distill appearance, quantize, pack."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import codec
from .appearance import AppearanceConfig, AppearanceModel, distill, load_checkpoint, save_checkpoint
from .merge import MergeConfig, merge_round
from .model import CameraFrame, GaussianCloud, Stage, save_ply
from .optim import LEARNING_RATES, finetune
from .select import SelectionConfig, accumulate_scores, prune, sample
from .splat import DEFAULT_SETTINGS, RenderSettings, psnr, render
from .svq import (Attribute, Codebook, SvqLayout, check_layouts, default_layouts, dequantize,
                  finetune_quantized, staged_schedule, train_codebooks)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, message: str, stage: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.stage = stage
        self.checkpoint = checkpoint


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineSchedule:
    t_gs: int = 1000
    t_gp: int = 1000
    t_gm: int = 1000
    merge_rounds: int = 2
    mlp_start: int = 4000
    svq3d_start: int = 9000
    svq4d_start: int = 10000
    total_iters: int = 11000

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"{f.name} must be >= 0")
        expected = self.t_gs + self.t_gp + self.merge_rounds * self.t_gm
        if self.mlp_start != expected:
            raise ConfigurationError(
                f"mlp_start {self.mlp_start} != t_gs + t_gp + merge_rounds * t_gm = {expected}")
        if not self.mlp_start <= self.svq3d_start <= self.svq4d_start <= self.total_iters:
            raise ConfigurationError(
                "milestones out of order: need mlp_start <= svq3d_start <= svq4d_start <= total_iters")

    def milestones(self) -> list[tuple[str, int]]:
        self.validate()
        out = [("sample", 0), ("prune", self.t_gs)]
        for m in range(1, self.merge_rounds + 1):
            out.append((f"merge_{m}", self.t_gs + self.t_gp + (m - 1) * self.t_gm))
        out += [("mlp", self.mlp_start), ("svq3d", self.svq3d_start), ("svq4d", self.svq4d_start)]
        return out

    def scaled(self, factor: float) -> "PipelineSchedule":
        """Every stage length multiplied by ``factor`` (rounded), keeping the milestone order."""
        t_gs, t_gp, t_gm = (int(round(v * factor)) for v in (self.t_gs, self.t_gp, self.t_gm))
        mlp = t_gs + t_gp + self.merge_rounds * t_gm
        d_mlp = int(round((self.svq3d_start - self.mlp_start) * factor))
        d_3d = int(round((self.svq4d_start - self.svq3d_start) * factor))
        d_4d = int(round((self.total_iters - self.svq4d_start) * factor))
        return PipelineSchedule(t_gs, t_gp, t_gm, self.merge_rounds, mlp, mlp + d_mlp,
                                mlp + d_mlp + d_3d, mlp + d_mlp + d_3d + d_4d)


@dataclass(frozen=True)
class SvqConfig:
    scale_bits: int = 9
    rot_bits: int = 13
    feature_bits: int = 10
    scale_t_bits: int = 9
    rot_l_bits: int = 13
    feature_split: tuple[int, ...] | None = None
    kmeans_iters: int = 10
    refresh_every: int = 100

    def layouts(self, feature_dim: int) -> list[SvqLayout]:
        lays = default_layouts(feature_dim, self.scale_bits, self.rot_bits, self.feature_bits,
                               self.scale_t_bits, self.rot_l_bits)
        if self.feature_split is not None:
            lays = [dataclasses.replace(l, sub_dims=tuple(self.feature_split))
                    if l.attribute == Attribute.FEATURE else l for l in lays]
        return lays


@dataclass(frozen=True)
class PipelineConfig:
    schedule: PipelineSchedule = PipelineSchedule()
    selection: SelectionConfig = SelectionConfig()
    merge: MergeConfig = MergeConfig()
    appearance: AppearanceConfig = AppearanceConfig()
    svq: SvqConfig = SvqConfig()
    learning_rates: dict = field(default_factory=lambda: dict(LEARNING_RATES))
    frozen: tuple[str, ...] = ()
    seed: int = 0
    loss_kind: str = "l1"
    divergence_factor: float = 10.0
    eval_frames: int = 16

    def __post_init__(self):
        if self.schedule.merge_rounds != self.merge.rounds:
            object.__setattr__(self, "merge", dataclasses.replace(self.merge, rounds=self.schedule.merge_rounds))
        self.schedule.validate()
        if self.loss_kind not in ("l1", "l2"):
            raise ConfigurationError(f"loss_kind must be l1 or l2, got {self.loss_kind!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d

    def scaled(self, factor: float) -> "PipelineConfig":
        """Shorter (or longer) run: schedule, appearance warm-up and codebook refresh all scaled."""
        return dataclasses.replace(
            self, schedule=self.schedule.scaled(factor),
            appearance=dataclasses.replace(self.appearance,
                                           warmup_steps=int(round(self.appearance.warmup_steps * factor))),
            svq=dataclasses.replace(self.svq, refresh_every=max(1, int(round(self.svq.refresh_every * factor)))))


def preset(name: str) -> PipelineConfig:
    """Model-size presets L, M, S, T on the default schedule."""
    name = name.upper()
    if name == "L":
        return PipelineConfig(selection=SelectionConfig(0.4, 0.8))
    if name == "M":
        return PipelineConfig(selection=SelectionConfig(0.2, 0.8))
    if name == "S":
        return PipelineConfig(selection=SelectionConfig(0.3, 0.9), svq=SvqConfig(scale_bits=8))
    if name == "T":
        sched = PipelineSchedule(merge_rounds=4, mlp_start=6000)
        return PipelineConfig(schedule=sched, selection=SelectionConfig(0.3, 0.9), svq=SvqConfig(scale_bits=8))
    raise ConfigurationError(f"unknown preset {name!r}; choose L, M, S or T")


_SECTIONS = {"schedule": PipelineSchedule, "selection": SelectionConfig, "merge": MergeConfig,
             "appearance": AppearanceConfig, "svq": SvqConfig}


def config_from_dict(d: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay ``d`` (keys mirror the dataclass fields) on ``base``."""
    base = base or PipelineConfig()
    updates = {}
    for key, value in d.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"[{key}] must be a table")
            current = getattr(base, key)
            known = {f.name for f in dataclasses.fields(current)}
            unknown = set(value) - known
            if unknown:
                raise ConfigurationError(f"unknown keys in [{key}]: {', '.join(sorted(unknown))}")
            if "feature_split" in value and value["feature_split"] is not None:
                value = dict(value, feature_split=tuple(value["feature_split"]))
            try:
                updates[key] = dataclasses.replace(current, **value)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"[{key}]: {exc}") from exc
        elif key == "learning_rates":
            unknown = set(value) - set(LEARNING_RATES)
            if unknown:
                raise ConfigurationError(f"unknown learning-rate groups: {', '.join(sorted(unknown))}")
            updates[key] = dict(base.learning_rates, **value)
        elif key == "frozen":
            updates[key] = tuple(value)
        elif key in {f.name for f in dataclasses.fields(PipelineConfig)}:
            updates[key] = value
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    if "schedule" in updates and "merge" not in d:
        updates["merge"] = dataclasses.replace(base.merge, rounds=updates["schedule"].merge_rounds)
    try:
        return dataclasses.replace(base, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path: str | Path, base: PipelineConfig | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data, base)


# --------------------------------------------------------------------------
# container <-> model
# --------------------------------------------------------------------------

def encode_model(cloud: GaussianCloud, layouts: Sequence[SvqLayout], codebooks, appearance: AppearanceModel,
                 metadata: dict | None = None) -> codec.ModelParts:
    means = np.concatenate([cloud.mean_xyz, cloud.mean_t[:, None]], axis=1).astype(np.float32)
    books, indices = {}, {}
    for lay in layouts:
        for j in range(len(lay.sub_dims)):
            key = (lay.attribute, j)
            books[key] = codebooks[key].entries.astype(np.float32)
            indices[key] = codebooks[key].assignments.astype(np.int64)
    meta = dict(metadata or {})
    meta["feature_dim"] = cloud.feature_dim
    return codec.ModelParts(means.astype(np.float64), list(layouts), books, indices,
                            save_checkpoint(appearance), meta)


def decode_model(parts: codec.ModelParts, bake_view=(0.0, 0.0, 1.0)) -> tuple[GaussianCloud, AppearanceModel]:
    """Cloud with dequantized attributes and the appearance model from a container.

    Opacity and color are the model's outputs at each Gaussian's own time seen
    along ``bake_view``; rendering should still pass the model itself.
    """
    n = parts.count
    books = {k: Codebook(np.asarray(v, dtype=np.float64), np.zeros(0, dtype=np.int64))
             for k, v in parts.codebooks.items()}
    attrs = {}
    for lay in parts.layouts:
        attrs[lay.attribute] = dequantize(lay, books, parts.indices)
    feature_dim = int(parts.metadata.get("feature_dim", attrs[Attribute.FEATURE].shape[1]))
    appearance = load_checkpoint(parts.mlp) if parts.mlp else None
    cloud = GaussianCloud(
        mean_xyz=parts.means[:, :3], mean_t=parts.means[:, 3],
        scale_xyz=attrs[Attribute.SCALE_XYZ], scale_t=attrs[Attribute.SCALE_T][:, 0],
        rot_l=attrs[Attribute.ROT_L], rot_r=attrs[Attribute.ROT_R],
        opacity=np.zeros(n), color_f=np.zeros((n, 3)),
        feature=attrs[Attribute.FEATURE].reshape(n, feature_dim), stage=Stage.COMPRESSED)
    if appearance is not None and n:
        with torch.no_grad():
            view = torch.tensor(bake_view, dtype=torch.float64).expand(n, 3)
            op, col = appearance(torch.tensor(cloud.mean_xyz), torch.tensor(cloud.feature),
                                 torch.tensor(cloud.mean_t), view)
        cloud = cloud.replace(opacity=op.numpy(), color_f=col.numpy())
    return cloud, appearance


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

@dataclass
class StageReport:
    milestone: str
    iteration: int
    count: int
    loss: float
    psnr: float
    seconds: float

    def to_json(self) -> str:
        d = asdict(self)
        d = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}
        return json.dumps(d, sort_keys=True)


@dataclass
class PipelineResult:
    container: bytes
    parts: codec.ModelParts
    cloud: GaussianCloud
    appearance: AppearanceModel
    reports: list[StageReport]
    breakdown: codec.SizeBreakdown

    @property
    def final(self) -> StageReport:
        return self.reports[-1]


def eval_subset(frames: Sequence[CameraFrame], k: int) -> list[CameraFrame]:
    if k <= 0 or k >= len(frames):
        return list(frames)
    idx = np.unique(np.linspace(0, len(frames) - 1, k).round().astype(int))
    return [frames[i] for i in idx]


def mean_psnr(cloud: GaussianCloud, frames: Sequence[CameraFrame], appearance=None,
              settings: RenderSettings = DEFAULT_SETTINGS) -> float:
    return float(np.mean([psnr(render(cloud, f, appearance, settings), f.image) for f in frames]))


def _tail_loss(losses) -> float:
    vals = [v for v in (losses or []) if math.isfinite(v)]
    return float(np.mean(vals[-50:])) if vals else float("nan")


def run(pretrained: GaussianCloud, frames: Sequence[CameraFrame], config: PipelineConfig = PipelineConfig(),
        checkpoint_dir: str | Path | None = None, on_report: Callable[[StageReport], None] | None = None,
        settings: RenderSettings = DEFAULT_SETTINGS) -> PipelineResult:
    """Compress ``pretrained`` against ``frames``; the input cloud is never modified."""
    if not frames:
        raise ValueError("need at least one frame")
    sched = config.schedule
    sched.validate()
    seed = config.seed
    layouts = config.svq.layouts(pretrained.feature_dim)
    check_layouts(layouts, pretrained)
    eval_frames = eval_subset(frames, config.eval_frames)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    common = dict(settings=settings, loss_kind=config.loss_kind, divergence_factor=config.divergence_factor)
    lrs = config.learning_rates

    reports: list[StageReport] = []
    state = {"cloud": pretrained, "appearance": None, "stage": "start", "trainer": None}
    t0 = time.perf_counter()

    def report(name: str, iteration: int, losses) -> None:
        cloud, app = state["cloud"], state["appearance"]
        r = StageReport(name, iteration, len(cloud), _tail_loss(losses),
                        mean_psnr(cloud, eval_frames, app, settings), round(time.perf_counter() - t0, 3))
        reports.append(r)
        log.info("%s @%d: %d Gaussians, psnr %.2f", name, iteration, r.count, r.psnr)
        if on_report:
            on_report(r)
        if ckpt is not None:
            _save_checkpoint(ckpt, name, cloud, app, state["trainer"])

    def stage(name: str):
        state["stage"] = name
        return name

    try:
        # sampling
        stage("sample")
        scores = accumulate_scores(pretrained, frames, settings=settings, loss_kind=config.loss_kind)
        cloud, _, _ = sample(pretrained, scores, config.selection)
        state["cloud"] = cloud
        report("sample", 0, None)
        cloud, _, tr = finetune(cloud, frames, sched.t_gs, seed=seed + 1, lrs=lrs, frozen=config.frozen, **common)
        state.update(cloud=cloud, trainer=tr)

        # pruning on fresh scores
        stage("prune")
        scores = accumulate_scores(cloud, frames, settings=settings, loss_kind=config.loss_kind)
        cloud, _ = prune(cloud, scores, config.selection)
        state["cloud"] = cloud
        report("prune", sched.t_gs, tr.losses if tr else None)
        cloud, _, tr = finetune(cloud, frames, sched.t_gp, seed=seed + 2, lrs=lrs, frozen=config.frozen, **common)
        state.update(cloud=cloud, trainer=tr)
        losses = tr.losses if tr else []

        # merging rounds; each report carries the losses of the steps that led up to it
        for m in range(1, sched.merge_rounds + 1):
            stage(f"merge_{m}")
            history: list[float] = []
            cloud, _ = merge_round(cloud, config.merge, frames, m, sched.t_gm, seed=seed + 10 + m,
                                   history=history, **common)
            state.update(cloud=cloud, trainer=None)
            report(f"merge_{m}", sched.t_gs + sched.t_gp + (m - 1) * sched.t_gm, losses)
            losses = history

        # appearance network
        stage("mlp")
        app = AppearanceModel.for_cloud(cloud, dataclasses.replace(config.appearance, feature_dim=cloud.feature_dim),
                                        seed=seed + 20)
        steps = sched.svq3d_start - sched.mlp_start
        report("mlp", sched.mlp_start, losses)
        losses = []
        app, cloud = distill(app, cloud, frames, steps, seed=seed + 21, train_geometry=True, lrs=lrs,
                             history=losses, **common)
        state.update(cloud=cloud, appearance=app, trainer=None)

        # quantization: 3D attributes first, then 4D
        stage("svq3d")
        active = staged_schedule(sched.svq3d_start, sched.svq3d_start, sched.svq4d_start)
        books = train_codebooks(cloud, layouts, active, seed=seed + 30, iters=config.svq.kmeans_iters)
        report("svq3d", sched.svq3d_start, losses)
        losses = []
        cloud, books, app = finetune_quantized(
            cloud, layouts, books, frames, sched.svq4d_start - sched.svq3d_start, appearance=app,
            seed=seed + 31, refresh_every=config.svq.refresh_every, lrs=lrs, history=losses, **common)
        state.update(cloud=cloud, appearance=app)

        stage("svq4d")
        pending = staged_schedule(sched.svq4d_start, sched.svq3d_start, sched.svq4d_start) - active
        books.update(train_codebooks(cloud, layouts, pending, seed=seed + 40, iters=config.svq.kmeans_iters))
        report("svq4d", sched.svq4d_start, losses)
        losses = []
        cloud, books, app = finetune_quantized(
            cloud, layouts, books, frames, sched.total_iters - sched.svq4d_start, appearance=app,
            seed=seed + 41, refresh_every=config.svq.refresh_every, lrs=lrs, history=losses, **common)
        state.update(cloud=cloud, appearance=app)

        # pack
        stage("pack")
        meta = {"schedule": asdict(sched), "selection": asdict(config.selection), "seed": seed,
                "source_count": len(pretrained)}
        parts = encode_model(cloud, layouts, books, app, meta)
        blob = codec.pack(parts)
        parts = codec.unpack(blob)
        final_cloud, final_app = decode_model(parts)
        state.update(cloud=final_cloud, appearance=final_app)
        report("pack", sched.total_iters, losses)
    except Exception as exc:
        where = state["stage"]
        saved = None
        if ckpt is not None:
            saved = _save_checkpoint(ckpt, f"failed_{where}", state["cloud"], state["appearance"], None)
        if isinstance(exc, (ConfigurationError,)):
            raise
        raise PipelineError(f"stage {where} failed: {exc}", where, saved) from exc

    return PipelineResult(blob, parts, final_cloud, final_app, reports, codec.measure(blob))


def _save_checkpoint(directory: Path, name: str, cloud: GaussianCloud, appearance, trainer) -> Path:
    path = directory / f"{name}.ply"
    save_ply(cloud, path)
    if appearance is not None:
        (directory / f"{name}.appearance.bin").write_bytes(save_checkpoint(appearance))
    if trainer is not None:
        (directory / f"{name}.optimizer.json").write_text(trainer.state().to_json())
    return path


def write_reports(reports: Sequence[StageReport], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
