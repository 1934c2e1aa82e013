"""Sub-vector quantization of per-Gaussian attributes with staged activation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .model import CameraFrame, GaussianCloud


class ConfigurationError(ValueError):
    pass


class StagingError(RuntimeError):
    """An attribute was quantized before its stage was activated."""


class SvqStage(enum.Enum):
    ATTR3D = "3d"
    ATTR4D = "4d"


class Attribute(enum.Enum):
    SCALE_XYZ = "scale_xyz"
    ROT_R = "rot_r"
    FEATURE = "feature"
    SCALE_T = "scale_t"
    ROT_L = "rot_l"

    @property
    def stage(self) -> SvqStage:
        return SvqStage.ATTR4D if self in (Attribute.SCALE_T, Attribute.ROT_L) else SvqStage.ATTR3D

    @property
    def is_quaternion(self) -> bool:
        return self in (Attribute.ROT_L, Attribute.ROT_R)


@dataclass(frozen=True)
class SvqLayout:
    attribute: Attribute
    sub_dims: tuple[int, ...]
    codebook_bits: int

    def __post_init__(self):
        object.__setattr__(self, "sub_dims", tuple(int(d) for d in self.sub_dims))
        if any(d <= 0 for d in self.sub_dims):
            raise ConfigurationError(f"{self.attribute.value}: sub-vector widths must be positive")
        if self.codebook_bits < 0:
            raise ConfigurationError("codebook_bits must be >= 0")

    @property
    def stage(self) -> SvqStage:
        return self.attribute.stage

    @property
    def dim(self) -> int:
        return sum(self.sub_dims)

    def slices(self) -> list[slice]:
        out, start = [], 0
        for d in self.sub_dims:
            out.append(slice(start, start + d))
            start += d
        return out

    def to_json(self) -> dict:
        return {"attribute": self.attribute.value, "sub_dims": list(self.sub_dims),
                "codebook_bits": self.codebook_bits}

    @classmethod
    def from_json(cls, d: Mapping) -> "SvqLayout":
        return cls(Attribute(d["attribute"]), tuple(d["sub_dims"]), int(d["codebook_bits"]))


def default_layouts(feature_dim: int = 8, scale_bits: int = 9, rot_bits: int = 13, feature_bits: int = 10,
                    scale_t_bits: int = 9, rot_l_bits: int = 13) -> list[SvqLayout]:
    if feature_dim % 4:
        feat_split = (feature_dim,)
    else:
        feat_split = (4,) * (feature_dim // 4)
    return [
        SvqLayout(Attribute.SCALE_XYZ, (3,), scale_bits),
        SvqLayout(Attribute.ROT_R, (4,), rot_bits),
        SvqLayout(Attribute.FEATURE, feat_split, feature_bits),
        SvqLayout(Attribute.SCALE_T, (1,), scale_t_bits),
        SvqLayout(Attribute.ROT_L, (4,), rot_l_bits),
    ]


def check_layouts(layouts: Sequence[SvqLayout], cloud: GaussianCloud) -> None:
    for lay in layouts:
        width = np.asarray(getattr(cloud, lay.attribute.value)).reshape(len(cloud), -1).shape[1]
        if lay.dim != width:
            raise ConfigurationError(
                f"{lay.attribute.value}: sub_dims sum {lay.dim} != attribute width {width}")


# --------------------------------------------------------------------------
# k-means codebooks
# --------------------------------------------------------------------------

@dataclass
class Codebook:
    entries: np.ndarray                 # (K, d)
    assignments: np.ndarray             # (N,) int64
    history: list[float] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def index_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.size))) if self.size > 1 else 1


def nearest(x: np.ndarray, entries: np.ndarray, chunk_elems: int = 1 << 22) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest codeword per row (ties to the lowest index) and the squared distance."""
    n, k = x.shape[0], entries.shape[0]
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    step = max(1, chunk_elems // max(1, k * x.shape[1]))
    for s in range(0, n, step):
        diff = x[s:s + step, None, :] - entries[None, :, :]
        dist = np.sum(diff * diff, axis=-1)
        idx[s:s + step] = np.argmin(dist, axis=1)
        d2[s:s + step] = dist[np.arange(dist.shape[0]), idx[s:s + step]]
    return idx, d2


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        pick = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[j] = x[pick]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def _cluster_means(x: np.ndarray, assign: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(assign, minlength=k)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, assign, x)
    return sums, counts


def train_codebook(vectors: np.ndarray, bits: int, seed: int = 0, iters: int = 10,
                   max_samples: int = 1 << 16, unit_norm: bool = False) -> Codebook:
    """k-means codebook of size min(2**bits, N): k-means++ seeding, Lloyd iterations.

    Empty clusters are reseeded to the points farthest from their codeword.
    ``history`` records the objective after every accepted assignment step; an
    update that rounding would make worse ends the iterations early. Entries
    are rounded to float32 (the stored width) before the final assignment.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ConfigurationError(f"need an (N, d) matrix with d >= 1, got shape {x.shape}")
    n = x.shape[0]
    if n < 1:
        raise ConfigurationError("need at least one vector")
    if unit_norm:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    k = min(1 << bits, n)
    rng = np.random.default_rng(seed)

    if n <= k:
        entries = _round_entries(x.copy(), unit_norm)
        assign, d2 = nearest(x, entries)
        return Codebook(entries, assign, [float(d2.sum())])

    train = x if n <= max_samples else x[np.sort(rng.choice(n, max_samples, replace=False))]
    centers = _kmeans_pp(train, k, rng)
    assign, d2 = nearest(train, centers)
    history = [float(d2.sum())]
    for _ in range(iters):
        proposal = centers.copy()
        sums, counts = _cluster_means(train, assign, k)
        filled = counts > 0
        proposal[filled] = sums[filled] / counts[filled, None]
        empty = np.nonzero(~filled)[0]
        if len(empty):
            far = np.argsort(-d2, kind="stable")[:len(empty)]
            proposal[empty] = train[far]
        p_assign, p_d2 = nearest(train, proposal)
        objective = float(p_d2.sum())
        if objective > history[-1]:
            # only rounding can raise the objective, so the previous codebook has converged
            break
        centers, assign, d2 = proposal, p_assign, p_d2
        history.append(objective)

    entries = _round_entries(centers, unit_norm)
    assign, _ = nearest(x, entries)
    return Codebook(entries, assign, history)


def _round_entries(entries: np.ndarray, unit_norm: bool) -> np.ndarray:
    if unit_norm:
        entries = entries / np.maximum(np.linalg.norm(entries, axis=1, keepdims=True), 1e-12)
    return entries.astype(np.float32).astype(np.float64)


# --------------------------------------------------------------------------
# quantization
# --------------------------------------------------------------------------

CodebookKey = tuple[Attribute, int]


def attribute_matrix(cloud: GaussianCloud, attribute: Attribute) -> np.ndarray:
    return np.asarray(getattr(cloud, attribute.value), dtype=np.float64).reshape(len(cloud), -1)


def train_codebooks(cloud: GaussianCloud, layouts: Sequence[SvqLayout], stages: Iterable[SvqStage],
                    seed: int = 0, iters: int = 10) -> dict[CodebookKey, Codebook]:
    stages = set(stages)
    books = {}
    for li, lay in enumerate(layouts):
        if lay.stage not in stages:
            continue
        mat = attribute_matrix(cloud, lay.attribute)
        for j, sl in enumerate(lay.slices()):
            books[(lay.attribute, j)] = train_codebook(
                mat[:, sl], lay.codebook_bits, seed=seed + 7919 * li + j, iters=iters,
                unit_norm=lay.attribute.is_quaternion and len(lay.sub_dims) == 1)
    return books


def dequantize(layout: SvqLayout, codebooks: Mapping[CodebookKey, Codebook],
               indices: Mapping[CodebookKey, np.ndarray]) -> np.ndarray:
    parts = [codebooks[(layout.attribute, j)].entries[indices[(layout.attribute, j)]]
             for j in range(len(layout.sub_dims))]
    out = np.concatenate(parts, axis=1)
    if layout.attribute.is_quaternion:
        out = out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
    return out


def quantize(attributes: Mapping[Attribute, np.ndarray], layouts: Sequence[SvqLayout],
             codebooks: Mapping[CodebookKey, Codebook],
             active: Iterable[SvqStage] = (SvqStage.ATTR3D, SvqStage.ATTR4D)
             ) -> tuple[dict[CodebookKey, np.ndarray], dict[Attribute, np.ndarray]]:
    """Nearest-codeword indices per sub-vector and the dequantized attributes.

    ``attributes`` maps each attribute to an (N, dim) matrix. Means are not
    part of any layout and are never touched here.
    """
    active = set(active)
    by_attr = {lay.attribute: lay for lay in layouts}
    indices: dict[CodebookKey, np.ndarray] = {}
    deq: dict[Attribute, np.ndarray] = {}
    for attr, mat in attributes.items():
        lay = by_attr.get(attr)
        if lay is None:
            raise ConfigurationError(f"no layout for {attr.value}")
        if lay.stage not in active:
            raise StagingError(f"{attr.value} belongs to stage {lay.stage.value}, which is not active")
        mat = np.asarray(mat, dtype=np.float64).reshape(mat.shape[0], -1)
        for j, sl in enumerate(lay.slices()):
            key = (attr, j)
            if key not in codebooks:
                raise StagingError(f"no codebook trained for {attr.value}[{j}]")
            indices[key], _ = nearest(mat[:, sl], codebooks[key].entries)
        deq[attr] = dequantize(lay, codebooks, indices)
    return indices, deq


def apply_to_cloud(cloud: GaussianCloud, layouts: Sequence[SvqLayout],
                   codebooks: Mapping[CodebookKey, Codebook]) -> GaussianCloud:
    """Cloud with every attribute that has codebooks replaced by its stored assignment's codeword."""
    updates = {}
    for lay in layouts:
        if all((lay.attribute, j) in codebooks for j in range(len(lay.sub_dims))):
            idx = {(lay.attribute, j): codebooks[(lay.attribute, j)].assignments
                   for j in range(len(lay.sub_dims))}
            deq = dequantize(lay, codebooks, idx)
            shape = np.asarray(getattr(cloud, lay.attribute.value)).shape
            updates[lay.attribute.value] = deq.reshape(shape)
    return cloud.replace(**updates)


def index_payload_bits(layouts: Sequence[SvqLayout], codebooks: Mapping[CodebookKey, Codebook],
                       n_gaussians: int) -> int:
    """Fixed-width index payload before entropy coding."""
    total = 0
    for lay in layouts:
        for j in range(len(lay.sub_dims)):
            key = (lay.attribute, j)
            if key in codebooks:
                total += codebooks[key].index_bits * n_gaussians
    return total


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------

def staged_schedule(iteration: int, svq3d_start: int, svq4d_start: int) -> frozenset[SvqStage]:
    """Stages active at ``iteration``.

    Equal boundaries are allowed and collapse the 3D-only window.
    """
    if svq3d_start > svq4d_start:
        raise ConfigurationError(f"svq3d_start {svq3d_start} > svq4d_start {svq4d_start}")
    if iteration < svq3d_start:
        return frozenset()
    if iteration < svq4d_start:
        return frozenset({SvqStage.ATTR3D})
    return frozenset({SvqStage.ATTR3D, SvqStage.ATTR4D})


# --------------------------------------------------------------------------
# straight-through fine-tuning
# --------------------------------------------------------------------------

class Quantizer:
    """Straight-through substitution of quantized attributes during training.

    The forward pass sees codewords of the current assignments; gradients
    land on the continuous attributes. Every ``refresh_every`` steps the
    assignments are recomputed and each codeword is moved to the mean of its
    members.
    """

    def __init__(self, layouts: Sequence[SvqLayout], codebooks: Mapping[CodebookKey, Codebook],
                 refresh_every: int = 100):
        self.layouts = [lay for lay in layouts
                        if all((lay.attribute, j) in codebooks for j in range(len(lay.sub_dims)))]
        self.codebooks = {k: Codebook(v.entries.copy(), v.assignments.copy(), list(v.history))
                          for k, v in codebooks.items()}
        self.refresh_every = refresh_every

    def _dequantized(self, lay: SvqLayout, dtype) -> torch.Tensor:
        idx = {(lay.attribute, j): self.codebooks[(lay.attribute, j)].assignments
               for j in range(len(lay.sub_dims))}
        return torch.as_tensor(dequantize(lay, self.codebooks, idx), dtype=dtype)

    def apply(self, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        out = dict(params)
        for lay in self.layouts:
            name = lay.attribute.value
            x = params[name]
            deq = self._dequantized(lay, x.dtype).reshape(x.shape)
            out[name] = x + (deq - x).detach()
        return out

    def refresh(self, params: dict[str, torch.Tensor]) -> None:
        for lay in self.layouts:
            mat = params[lay.attribute.value].detach().numpy().reshape(params["mean_t"].shape[0], -1)
            for j, sl in enumerate(lay.slices()):
                cb = self.codebooks[(lay.attribute, j)]
                sub = mat[:, sl]
                if lay.attribute.is_quaternion and len(lay.sub_dims) == 1:
                    sub = sub / np.maximum(np.linalg.norm(sub, axis=1, keepdims=True), 1e-12)
                assign, _ = nearest(sub, cb.entries)
                sums, counts = _cluster_means(sub, assign, cb.size)
                filled = counts > 0
                entries = cb.entries.copy()
                entries[filled] = sums[filled] / counts[filled, None]
                entries = _round_entries(entries, lay.attribute.is_quaternion and len(lay.sub_dims) == 1)
                cb.entries = entries
                cb.assignments, _ = nearest(sub, entries)

    def maybe_refresh(self, step: int, params: dict[str, torch.Tensor]) -> None:
        if self.refresh_every > 0 and step > 0 and step % self.refresh_every == 0:
            self.refresh(params)


def finetune_quantized(cloud: GaussianCloud, layouts: Sequence[SvqLayout],
                       codebooks: Mapping[CodebookKey, Codebook], frames: Sequence[CameraFrame],
                       steps: int, appearance=None, seed: int = 0, refresh_every: int = 100,
                       settings=None, loss_kind: str = "l1", lrs=None, divergence_factor: float = 10.0,
                       history: list | None = None):
    """Fine-tune a cloud under quantization with the straight-through estimator.

    Returns (cloud with continuous attributes, codebooks, appearance).
    """
    from .optim import Trainer

    if steps <= 0:
        return cloud, dict(codebooks), appearance
    quantizer = Quantizer(layouts, codebooks, refresh_every)
    trainer = Trainer(cloud, frames, appearance=appearance, seed=seed, settings=settings,
                      loss_kind=loss_kind, lrs=lrs, quantizer=quantizer,
                      divergence_factor=divergence_factor, warmup_steps=0)
    losses = trainer.run(steps)
    if history is not None:
        history.extend(losses)
    quantizer.refresh(trainer.params)
    return trainer.cloud(), quantizer.codebooks, trainer.appearance
