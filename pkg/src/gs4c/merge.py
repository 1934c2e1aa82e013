"""Grid clustering by spatial/color similarity and weighted proxy merging."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .model import FIELD_NAMES, CameraFrame, GaussianCloud, Stage
from .optim import DivergenceGuard, FrameSampler
from .splat import DEFAULT_SETTINGS, DTYPE, RenderSettings, cloud_tensors, image_loss, rasterize

log = logging.getLogger(__name__)


class ClusterInvariantError(RuntimeError):
    pass


@dataclass(frozen=True)
class MergeConfig:
    lambda_app: float = 1.0
    tau_sim: float = -1e-4
    grid_xyz: float = 0.25
    grid_t: float = 2.0
    growth: float = 1.2
    rounds: int = 2
    lr: float = 1e-2

    def __post_init__(self):
        if self.lambda_app < 0:
            raise ValueError("lambda_app must be >= 0")
        if self.grid_xyz <= 0 or self.grid_t <= 0:
            raise ValueError("grid sizes must be positive")
        if self.growth <= 1:
            raise ValueError("growth must be > 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")

    def for_round(self, m: int) -> "MergeConfig":
        """Config for 1-based round ``m``: spatial cell grown by growth**(m-1)."""
        return replace(self, grid_xyz=self.grid_xyz * self.growth ** (m - 1))


@dataclass
class ClusterSet:
    """Clustering of a cloud.

    ``maximal`` holds every surviving candidate cluster (they may overlap).
    ``clusters`` is the disjoint version used for merging: each Gaussian
    goes to the first maximal cluster containing it, largest first, and
    anything left alone joins ``singletons``.
    """

    maximal: list[tuple[int, ...]]
    clusters: list[np.ndarray]
    singletons: np.ndarray
    logits_x: list[np.ndarray] = field(default_factory=list)
    logits_f: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.logits_x:
            self.logits_x = [np.zeros(len(c)) for c in self.clusters]
        if not self.logits_f:
            self.logits_f = [np.zeros(len(c)) for c in self.clusters]

    @property
    def output_size(self) -> int:
        return len(self.clusters) + len(self.singletons)

    def with_logits(self, logits_x, logits_f) -> "ClusterSet":
        return ClusterSet(self.maximal, self.clusters, self.singletons,
                          [np.asarray(v, dtype=np.float64).copy() for v in logits_x],
                          [np.asarray(v, dtype=np.float64).copy() for v in logits_f])

    def weights(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return [_normalized(l) for l in self.logits_x], [_normalized(l) for l in self.logits_f]

    def dump_jsonl(self, path: str | Path) -> None:
        wx, wf = self.weights()
        with open(path, "w") as fh:
            for q, members in enumerate(self.clusters):
                fh.write(json.dumps({"cluster": q, "members": members.tolist(),
                                     "weights_x": wx[q].tolist(), "weights_f": wf[q].tolist()}) + "\n")


def _normalized(logits: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return s / s.sum()


def similarity(gi, gj, cfg: MergeConfig = MergeConfig()) -> float:
    """Higher is more similar; 0 for identical position and color."""
    dx = np.asarray(gi.mean_xyz, dtype=np.float64) - np.asarray(gj.mean_xyz, dtype=np.float64)
    df = np.asarray(gi.color_f, dtype=np.float64) - np.asarray(gj.color_f, dtype=np.float64)
    return float(-np.sum(dx * dx) - cfg.lambda_app * np.sum(df * df))


def similarity_matrix(xyz: np.ndarray, color: np.ndarray, lambda_app: float) -> np.ndarray:
    dx = xyz[:, None, :] - xyz[None, :, :]
    df = color[:, None, :] - color[None, :, :]
    return -np.sum(dx * dx, axis=-1) - lambda_app * np.sum(df * df, axis=-1)


def grid_cells(cloud: GaussianCloud, grid_xyz: float, grid_t: float) -> dict[tuple, list[int]]:
    """Member indices (ascending) per occupied 4D cell."""
    keys = np.concatenate([np.floor(cloud.mean_xyz / grid_xyz),
                           np.floor(cloud.mean_t / grid_t)[:, None]], axis=1).astype(np.int64)
    cells: dict[tuple, list[int]] = defaultdict(list)
    for i, key in enumerate(map(tuple, keys.tolist())):
        cells[key].append(i)
    return dict(sorted(cells.items()))


def maximal_sets(adjacent: np.ndarray) -> list[int]:
    """Bitmasks of the candidate sets {i} + neighbors(i), deduplicated, subsets removed.

    Sorted by size descending, then by member order.
    """
    n = adjacent.shape[0]
    masks = set()
    for i in range(n):
        row = adjacent[i].copy()
        row[i] = True
        masks.add(sum(1 << j for j in np.nonzero(row)[0].tolist()))

    def members(m: int) -> list[int]:
        return [j for j in range(n) if m >> j & 1]

    ordered = sorted(masks, key=lambda m: (-bin(m).count("1"), members(m)))
    kept: list[int] = []
    for m in ordered:
        if not any(m & k == m for k in kept):
            kept.append(m)
    return kept


def build_clusters(cloud: GaussianCloud, cfg: MergeConfig = MergeConfig()) -> ClusterSet:
    if len(cloud) == 0:
        raise ValueError("cannot cluster an empty cloud")
    maximal: list[tuple[int, ...]] = []
    for members in grid_cells(cloud, cfg.grid_xyz, cfg.grid_t).values():
        if len(members) == 1:
            continue
        idx = np.asarray(members)
        sim = similarity_matrix(cloud.mean_xyz[idx], cloud.color_f[idx], cfg.lambda_app)
        for mask in maximal_sets(sim >= cfg.tau_sim):
            local = [j for j in range(len(idx)) if mask >> j & 1]
            if len(local) >= 2:
                maximal.append(tuple(int(idx[j]) for j in local))
    return partition(maximal, len(cloud))


def partition(maximal: Sequence[tuple[int, ...]], n: int) -> ClusterSet:
    taken = np.zeros(n, dtype=bool)
    clusters = []
    for members in sorted(maximal, key=lambda c: (-len(c), c)):
        free = [i for i in members if not taken[i]]
        taken[free] = True
        if len(free) >= 2:
            clusters.append(np.asarray(free, dtype=np.int64))
        else:
            taken[free] = False
    singletons = np.nonzero(~taken)[0]
    return ClusterSet(list(maximal), clusters, singletons)


# --------------------------------------------------------------------------
# proxies
# --------------------------------------------------------------------------

def _check_nonempty(cs: ClusterSet) -> None:
    for q, c in enumerate(cs.clusters):
        if len(c) == 0:
            raise ClusterInvariantError(f"cluster {q} is empty")


def _flat(cs: ClusterSet) -> tuple[np.ndarray, np.ndarray]:
    if not cs.clusters:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    _check_nonempty(cs)
    members = np.concatenate(cs.clusters)
    owner = np.repeat(np.arange(len(cs.clusters)), [len(c) for c in cs.clusters])
    return members, owner


def representatives(cs: ClusterSet) -> np.ndarray:
    """Member with the largest position weight per cluster; ties go to the lowest index."""
    wx, _ = cs.weights()
    reps = []
    for c, w in zip(cs.clusters, wx):
        best = np.flatnonzero(w == w.max())
        reps.append(int(c[best[np.argmin(c[best])]]))
    return np.asarray(reps, dtype=np.int64)


def proxy_tensors(params: dict[str, torch.Tensor], cs: ClusterSet, logits_x: torch.Tensor,
                  logits_f: torch.Tensor, reps: np.ndarray) -> dict[str, torch.Tensor]:
    """Proxy cloud tensors: weighted position and color, the rest from ``reps``; then singletons."""
    members, owner = _flat(cs)
    nc = len(cs.clusters)
    m_t, o_t = torch.as_tensor(members), torch.as_tensor(owner)

    def weights(logits):
        s = torch.sigmoid(logits)
        total = torch.zeros(nc, dtype=s.dtype).index_add(0, o_t, s)
        return s / total[o_t]

    wx, wf = weights(logits_x), weights(logits_f)
    xyz = torch.zeros(nc, 3, dtype=DTYPE).index_add(0, o_t, wx[:, None] * params["mean_xyz"][m_t])
    col = torch.zeros(nc, 3, dtype=DTYPE).index_add(0, o_t, wf[:, None] * params["color_f"][m_t])
    rep_t, single_t = torch.as_tensor(reps, dtype=torch.int64), torch.as_tensor(cs.singletons, dtype=torch.int64)
    out = {}
    for k in FIELD_NAMES:
        head = {"mean_xyz": xyz, "color_f": col}.get(k, params[k][rep_t])
        out[k] = torch.cat([head, params[k][single_t]], dim=0)
    return out


def merge_proxy(cloud: GaussianCloud, cs: ClusterSet) -> GaussianCloud:
    if len(cs.logits_x) != len(cs.clusters) or len(cs.logits_f) != len(cs.clusters):
        raise ClusterInvariantError("logits missing for some clusters")
    _check_nonempty(cs)
    with torch.no_grad():
        lx = torch.as_tensor(np.concatenate(cs.logits_x) if cs.clusters else np.zeros(0), dtype=DTYPE)
        lf = torch.as_tensor(np.concatenate(cs.logits_f) if cs.clusters else np.zeros(0), dtype=DTYPE)
        out = proxy_tensors(cloud_tensors(cloud), cs, lx, lf, representatives(cs))
    return GaussianCloud(**{k: v.numpy() for k, v in out.items()}, stage=Stage.MERGED)


def _split(flat: np.ndarray, cs: ClusterSet) -> list[np.ndarray]:
    bounds = np.cumsum([len(c) for c in cs.clusters])[:-1]
    return [a.copy() for a in np.split(flat, bounds)] if cs.clusters else []


def merge_loss(cloud: GaussianCloud, cs: ClusterSet, frame: CameraFrame, logits_x: torch.Tensor,
               logits_f: torch.Tensor, settings: RenderSettings = DEFAULT_SETTINGS,
               loss_kind: str = "l1", params=None, reps=None) -> torch.Tensor:
    params = cloud_tensors(cloud) if params is None else params
    reps = representatives(cs) if reps is None else reps
    proxy = proxy_tensors(params, cs, logits_x, logits_f, reps)
    return image_loss(rasterize(proxy, frame, settings).image, frame.image, loss_kind)


def optimize_merge(cloud: GaussianCloud, cs: ClusterSet, frames: Sequence[CameraFrame], steps: int,
                   lr: float = 1e-2, seed: int = 0, settings: RenderSettings = DEFAULT_SETTINGS,
                   loss_kind: str = "l1", divergence_factor: float = 10.0,
                   history: list | None = None) -> ClusterSet:
    """Adam on the per-member logits against the rendering loss of the proxy cloud.

    Per-step losses are appended to ``history`` when given.
    """
    if steps <= 0 or not cs.clusters:
        return cs.with_logits(cs.logits_x, cs.logits_f)
    lx = torch.tensor(np.concatenate(cs.logits_x), dtype=DTYPE, requires_grad=True)
    lf = torch.tensor(np.concatenate(cs.logits_f), dtype=DTYPE, requires_grad=True)
    opt = torch.optim.Adam([lx, lf], lr=lr, betas=(0.9, 0.999))
    params = cloud_tensors(cloud)
    sampler = FrameSampler(len(frames), seed)
    guard = DivergenceGuard(divergence_factor)
    for step in range(steps):
        frame = frames[sampler.next()]
        current = cs.with_logits(_split(lx.detach().numpy(), cs), _split(lf.detach().numpy(), cs))
        opt.zero_grad(set_to_none=True)
        loss = merge_loss(cloud, cs, frame, lx, lf, settings, loss_kind, params, representatives(current))
        guard.update(step, float(loss.detach()))
        if history is not None:
            history.append(float(loss.detach()))
        if loss.requires_grad:
            loss.backward()
            opt.step()
    return cs.with_logits(_split(lx.detach().numpy(), cs), _split(lf.detach().numpy(), cs))


def merge_round(cloud: GaussianCloud, cfg: MergeConfig, frames: Sequence[CameraFrame], round_index: int,
                steps: int, seed: int = 0, settings: RenderSettings = DEFAULT_SETTINGS,
                loss_kind: str = "l1", divergence_factor: float = 10.0,
                history: list | None = None) -> tuple[GaussianCloud, ClusterSet]:
    cs = build_clusters(cloud, cfg.for_round(round_index))
    cs = optimize_merge(cloud, cs, frames, steps, cfg.lr, seed, settings, loss_kind, divergence_factor, history)
    merged = merge_proxy(cloud, cs)
    log.info("merge round %d: %d -> %d Gaussians (%d clusters)", round_index, len(cloud), len(merged),
             len(cs.clusters))
    return merged, cs


def run_merging_rounds(cloud: GaussianCloud, cfg: MergeConfig, frames: Sequence[CameraFrame],
                       steps: int = 1000, seed: int = 0, settings: RenderSettings = DEFAULT_SETTINGS,
                       loss_kind: str = "l1", divergence_factor: float = 10.0) -> GaussianCloud:
    for m in range(1, cfg.rounds + 1):
        cloud, _ = merge_round(cloud, cfg, frames, m, steps, seed + m, settings, loss_kind, divergence_factor)
    return cloud
