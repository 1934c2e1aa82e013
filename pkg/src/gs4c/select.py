"""Gradient-based importance scores, top-k sampling and quantile pruning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import CameraFrame, GaussianCloud, Stage
from .splat import DEFAULT_SETTINGS, RenderError, RenderSettings, render_backward


class EmptySelectionError(ValueError):
    pass


class StageOrderError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreTable:
    s_grad: np.ndarray
    t_grad: np.ndarray
    sd: np.ndarray
    sd_cutoff: float = float("nan")
    n_frames: int = 0

    def __post_init__(self):
        for name in ("s_grad", "t_grad", "sd"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        if not (len(self.s_grad) == len(self.t_grad) == len(self.sd)):
            raise ValueError("score columns differ in length")

    def __len__(self) -> int:
        return len(self.s_grad)

    @classmethod
    def from_grads(cls, s_grad, t_grad, n_frames: int = 0) -> "ScoreTable":
        s, t = np.asarray(s_grad, dtype=np.float64), np.asarray(t_grad, dtype=np.float64)
        return cls(s, t, sd_key(s, t), n_frames=n_frames)

    def subset(self, indices: np.ndarray) -> "ScoreTable":
        return ScoreTable(self.s_grad[indices], self.t_grad[indices], self.sd[indices],
                          self.sd_cutoff, self.n_frames)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "s_grad", "t_grad", "sd"])
            for i in range(len(self)):
                w.writerow([i] + [repr(float(col[i])) for col in (self.s_grad, self.t_grad, self.sd)])


@dataclass(frozen=True)
class SelectionConfig:
    tau_gs: float = 0.2
    quantile_p: float = 0.8

    def __post_init__(self):
        if not 0 < self.tau_gs <= 1:
            raise ValueError(f"tau_gs must be in (0, 1], got {self.tau_gs}")
        if not 0 < self.quantile_p < 1:
            raise ValueError(f"quantile_p must be in (0, 1), got {self.quantile_p}")


def sd_key(s_grad: np.ndarray, t_grad: np.ndarray) -> np.ndarray:
    """Ranking key: static score times the magnitude of the signed dynamic sum."""
    return np.asarray(s_grad) * np.abs(np.asarray(t_grad))


def accumulate_scores(cloud: GaussianCloud, frames: Sequence[CameraFrame], appearance=None,
                      settings: RenderSettings = DEFAULT_SETTINGS, loss_kind: str = "l1") -> ScoreTable:
    """Sum per-frame view-space gradient norms and signed time gradients.

    Frames are reduced in index order so the result does not depend on how
    the per-frame work is scheduled.
    """
    if not frames:
        raise ValueError("need at least one frame to score")
    s = np.zeros(len(cloud))
    t = np.zeros(len(cloud))
    for j, frame in enumerate(frames):
        try:
            _, grads = render_backward(cloud, frame, loss_kind, appearance, settings)
        except Exception as exc:
            raise RenderError(f"scoring failed on frame {j}: {exc}") from exc
        s += np.linalg.norm(grads.d_loss_d_u, axis=1)
        t += grads.d_loss_d_t
    return ScoreTable.from_grads(s, t, n_frames=len(frames))


def ceil_share(ratio: float, n: int) -> int:
    """ceil(ratio * n) for the decimal ``ratio`` as written, so 0.3 * 10 gives 3 and not 4."""
    return math.ceil(Fraction(repr(float(ratio))) * n)


def quantile(values: np.ndarray, p: float) -> float:
    """Nearest-rank quantile: the ceil(p * n)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise EmptySelectionError("quantile of an empty set")
    rank = max(1, ceil_share(p, len(v)))
    return float(v[rank - 1])


def top_k(keys: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest keys, ties to the lower index, returned ascending."""
    order = np.lexsort((np.arange(len(keys)), -np.asarray(keys)))
    return np.sort(order[:k])


def sample(cloud: GaussianCloud, scores: ScoreTable, cfg: SelectionConfig
           ) -> tuple[GaussianCloud, np.ndarray, ScoreTable]:
    """Keep the ceil(tau_gs * N) Gaussians with the largest SD key.

    Returns the sampled cloud, the kept indices into ``cloud`` and the scores
    of the kept Gaussians with the SD cutoff recorded.
    """
    if len(scores) != len(cloud):
        raise ValueError(f"score table has {len(scores)} rows, cloud has {len(cloud)}")
    if Fraction(repr(float(cfg.tau_gs))) * len(cloud) < 1:
        raise EmptySelectionError(f"tau_gs={cfg.tau_gs} keeps nothing of {len(cloud)} Gaussians")
    k = ceil_share(cfg.tau_gs, len(cloud))
    kept = top_k(scores.sd, k)
    sub = scores.subset(kept)
    sub = ScoreTable(sub.s_grad, sub.t_grad, sub.sd, float(sub.sd.min()), sub.n_frames)
    return cloud.subset(kept, Stage.SAMPLED), kept, sub


def prune_mask(scores: ScoreTable, p: float) -> tuple[np.ndarray, float, float]:
    tau_s = quantile(scores.s_grad, p)
    tau_t = quantile(scores.t_grad, p)
    return (scores.s_grad >= tau_s) | (scores.t_grad >= tau_t), tau_s, tau_t


def prune(cloud: GaussianCloud, scores: ScoreTable, cfg: SelectionConfig) -> tuple[GaussianCloud, np.ndarray]:
    """Keep Gaussians whose static or signed dynamic score reaches its p-quantile.

    Needs a sampled cloud with scores computed on it, not the scores that
    drove sampling.
    """
    if cloud.stage != Stage.SAMPLED:
        raise StageOrderError(f"prune expects a sampled cloud, got stage {cloud.stage.value}")
    if len(scores) != len(cloud):
        raise ValueError(f"score table has {len(scores)} rows, cloud has {len(cloud)}")
    mask, _, _ = prune_mask(scores, cfg.quantile_p)
    kept = np.nonzero(mask)[0]
    if len(kept) == 0:
        raise EmptySelectionError("pruning removed every Gaussian")
    return cloud.subset(kept, Stage.PRUNED), kept
