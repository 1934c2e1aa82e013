"""4D Gaussian domain types, validation, and the PLY interchange profile."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PLY_VERSION_COMMENT = "gs4c_version 1"
DEFAULT_FEATURE_DIM = 8

# (name, width) in on-disk order; feature width is appended at runtime.
_FIXED_FIELDS = (
    ("mean_xyz", 3),
    ("mean_t", 1),
    ("scale_xyz", 3),
    ("scale_t", 1),
    ("rot_l", 4),
    ("rot_r", 4),
    ("opacity", 1),
    ("color_f", 3),
)
FIELD_NAMES = tuple(name for name, _ in _FIXED_FIELDS) + ("feature",)


class FormatError(ValueError):
    """Malformed or incomplete PLY file."""


class EmptyCloudError(ValueError):
    pass


class Stage(enum.Enum):
    PRETRAINED = "pretrained"
    SAMPLED = "sampled"
    PRUNED = "pruned"
    MERGED = "merged"
    COMPRESSED = "compressed"


@dataclass(frozen=True)
class Gaussian4D:
    """One primitive. Scales are logs, opacity is a logit, quaternions are (w, x, y, z)."""

    mean_xyz: np.ndarray
    mean_t: float
    scale_xyz: np.ndarray
    scale_t: float
    rot_l: np.ndarray
    rot_r: np.ndarray
    opacity: float
    color_f: np.ndarray
    feature: np.ndarray = field(default_factory=lambda: np.zeros(DEFAULT_FEATURE_DIM))

    @classmethod
    def identity(cls, mean_xyz=(0.0, 0.0, 0.0), mean_t=0.5, scale=-2.0, scale_t=0.0,
                 opacity=0.0, color=(0.5, 0.5, 0.5), feature_dim=DEFAULT_FEATURE_DIM) -> "Gaussian4D":
        """An axis-aligned Gaussian with identity rotations; handy for tests and synthesis."""
        ident = np.array([1.0, 0.0, 0.0, 0.0])
        return cls(
            mean_xyz=np.asarray(mean_xyz, dtype=np.float64),
            mean_t=float(mean_t),
            scale_xyz=np.full(3, float(scale)) if np.isscalar(scale) else np.asarray(scale, dtype=np.float64),
            scale_t=float(scale_t),
            rot_l=ident.copy(),
            rot_r=ident.copy(),
            opacity=float(opacity),
            color_f=np.asarray(color, dtype=np.float64),
            feature=np.zeros(feature_dim),
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Struct-of-arrays collection of 4D Gaussians.

    Arrays are float64 and read-only; every reduction builds a new cloud.
    """

    mean_xyz: np.ndarray
    mean_t: np.ndarray
    scale_xyz: np.ndarray
    scale_t: np.ndarray
    rot_l: np.ndarray
    rot_r: np.ndarray
    opacity: np.ndarray
    color_f: np.ndarray
    feature: np.ndarray
    stage: Stage = Stage.PRETRAINED

    def __post_init__(self):
        n = np.asarray(self.mean_t).reshape(-1).shape[0]
        shapes = {
            "mean_xyz": (n, 3), "mean_t": (n,), "scale_xyz": (n, 3), "scale_t": (n,),
            "rot_l": (n, 4), "rot_r": (n, 4), "opacity": (n,), "color_f": (n, 3),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            object.__setattr__(self, name, _frozen(arr))
        feat = np.asarray(self.feature, dtype=np.float64)
        if feat.ndim != 2:
            feat = feat.reshape(n, -1) if n else feat.reshape(0, 0)
        if feat.shape[0] != n:
            raise ValueError(f"feature rows {feat.shape[0]} != cloud length {n}")
        object.__setattr__(self, "feature", _frozen(feat))

    def __len__(self) -> int:
        return self.mean_t.shape[0]

    def __getitem__(self, i: int) -> Gaussian4D:
        return Gaussian4D(
            mean_xyz=self.mean_xyz[i].copy(),
            mean_t=float(self.mean_t[i]),
            scale_xyz=self.scale_xyz[i].copy(),
            scale_t=float(self.scale_t[i]),
            rot_l=self.rot_l[i].copy(),
            rot_r=self.rot_r[i].copy(),
            opacity=float(self.opacity[i]),
            color_f=self.color_f[i].copy(),
            feature=self.feature[i].copy(),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, GaussianCloud):
            return NotImplemented
        return self.stage == other.stage and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in FIELD_NAMES
        )

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[1]

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian4D], stage: Stage = Stage.PRETRAINED) -> "GaussianCloud":
        if not gaussians:
            raise EmptyCloudError("cannot build a cloud from zero Gaussians")
        cols = {k: np.stack([np.asarray(getattr(g, k), dtype=np.float64) for g in gaussians]) for k in FIELD_NAMES}
        return cls(**cols, stage=stage)

    @classmethod
    def empty(cls, feature_dim: int = DEFAULT_FEATURE_DIM, stage: Stage = Stage.PRETRAINED) -> "GaussianCloud":
        return cls(
            mean_xyz=np.zeros((0, 3)), mean_t=np.zeros(0), scale_xyz=np.zeros((0, 3)),
            scale_t=np.zeros(0), rot_l=np.zeros((0, 4)), rot_r=np.zeros((0, 4)),
            opacity=np.zeros(0), color_f=np.zeros((0, 3)), feature=np.zeros((0, feature_dim)),
            stage=stage,
        )

    def fields(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in FIELD_NAMES}

    def replace(self, stage: Stage | None = None, **updates) -> "GaussianCloud":
        cols = self.fields()
        cols.update(updates)
        return GaussianCloud(**cols, stage=self.stage if stage is None else stage)

    def subset(self, indices: Iterable[int], stage: Stage | None = None) -> "GaussianCloud":
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
        return GaussianCloud(**{k: v[idx] for k, v in self.fields().items()},
                             stage=self.stage if stage is None else stage)

    @staticmethod
    def concat(clouds: Sequence["GaussianCloud"], stage: Stage) -> "GaussianCloud":
        return GaussianCloud(
            **{k: np.concatenate([getattr(c, k) for c in clouds], axis=0) for k in FIELD_NAMES},
            stage=stage,
        )


@dataclass(frozen=True)
class CameraFrame:
    """Pinhole camera with a world-to-camera transform and its target image.

    ``extrinsics`` is 4x4 with camera axes x right, y down, z forward.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: np.ndarray
    timestamp: float
    image: np.ndarray

    def __post_init__(self):
        ext = np.asarray(self.extrinsics, dtype=np.float64)
        img = np.asarray(self.image, dtype=np.float64)
        if ext.shape != (4, 4):
            raise ValueError(f"extrinsics must be 4x4, got {ext.shape}")
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {img.shape}")
        if img.shape[0] < 8 or img.shape[1] < 8:
            raise ValueError(f"image must be at least 8x8, got {img.shape[:2]}")
        if not 0.0 <= self.timestamp <= 1.0:
            raise ValueError(f"timestamp {self.timestamp} outside [0, 1]")
        object.__setattr__(self, "extrinsics", _frozen(ext))
        object.__setattr__(self, "image", _frozen(img))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def camera_center(self) -> np.ndarray:
        rot, trans = self.extrinsics[:3, :3], self.extrinsics[:3, 3]
        return -rot.T @ trans

    def with_image(self, image: np.ndarray) -> "CameraFrame":
        return CameraFrame(self.fx, self.fy, self.cx, self.cy, self.extrinsics, self.timestamp, image)


@dataclass
class Violation:
    index: int
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"[{v.index}] {v.message}" for v in self.violations)


def validate(cloud: GaussianCloud, quat_tol: float = 1e-6) -> ValidationReport:
    """Check every Gaussian against the domain invariants.

    Quaternions only need a non-zero norm; the renderer normalizes them, and
    ``quat_tol`` guards against norms that are numerically zero.
    """
    report = ValidationReport()
    for i in range(len(cloud)):
        bad = [k for k in FIELD_NAMES if not np.all(np.isfinite(getattr(cloud, k)[i]))]
        if bad:
            report.violations.append(Violation(i, f"non-finite field: {', '.join(bad)}"))
            continue
        for name in ("rot_l", "rot_r"):
            if np.linalg.norm(getattr(cloud, name)[i]) <= quat_tol:
                report.violations.append(Violation(i, f"zero quaternion: {name}"))
        with np.errstate(over="ignore"):
            scales = np.exp(np.append(cloud.scale_xyz[i], cloud.scale_t[i]))
        if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
            report.violations.append(Violation(i, "scale out of range after exp"))
    return report


# --------------------------------------------------------------------------
# PLY profile
# --------------------------------------------------------------------------

def ply_property_names(feature_dim: int) -> list[str]:
    names = ["x", "y", "z", "t", "scale_x", "scale_y", "scale_z", "scale_t"]
    names += [f"rot_l_{k}" for k in range(4)] + [f"rot_r_{k}" for k in range(4)]
    names += ["opacity"] + [f"f_dc_{k}" for k in range(3)]
    names += [f"feat_{k}" for k in range(feature_dim)]
    return names


def _ply_matrix(cloud: GaussianCloud) -> np.ndarray:
    return np.concatenate(
        [cloud.mean_xyz, cloud.mean_t[:, None], cloud.scale_xyz, cloud.scale_t[:, None],
         cloud.rot_l, cloud.rot_r, cloud.opacity[:, None], cloud.color_f, cloud.feature],
        axis=1,
    ).astype("<f4")


def save_ply(cloud: GaussianCloud, path: str | Path) -> None:
    """Write ``cloud`` as binary little-endian PLY (float32 properties)."""
    path = Path(path)
    names = ply_property_names(cloud.feature_dim)
    header = ["ply", "format binary_little_endian 1.0", f"comment {PLY_VERSION_COMMENT}",
              f"element vertex {len(cloud)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    payload = _ply_matrix(cloud)
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(payload.tobytes())
    except OSError as exc:
        raise OSError(f"failed to write PLY {path}: {exc}") from exc


_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
    "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4",
}


def load_ply(path: str | Path, stage: Stage = Stage.PRETRAINED) -> GaussianCloud:
    """Read a binary little-endian PLY written in the gs4c profile.

    Extra vertex properties are ignored; properties may appear in any order.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len("end_header\n"):]

    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "binary_little_endian":
                raise FormatError(f"{path}: unsupported format {tok[1]}")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
            elif count is not None:
                # trailing elements after vertex are ignored
                in_vertex = False
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise FormatError(f"{path}: list properties unsupported")
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unknown property type {tok[1]}")
            props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
    if count is None:
        raise FormatError(f"{path}: no vertex element")
    if count == 0:
        raise EmptyCloudError(f"{path}: vertex element count is 0")

    names = [n for n, _ in props]
    n_feat = 0
    while f"feat_{n_feat}" in names:
        n_feat += 1
    for required in ply_property_names(n_feat):
        if required not in names:
            raise FormatError(f"missing required property {required}")

    dtype = np.dtype(props)
    if len(body) < dtype.itemsize * count:
        raise FormatError(f"{path}: truncated vertex data")
    rec = np.frombuffer(body, dtype=dtype, count=count)

    def cols(*keys):
        return np.stack([rec[k].astype(np.float64) for k in keys], axis=1)

    return GaussianCloud(
        mean_xyz=cols("x", "y", "z"),
        mean_t=rec["t"].astype(np.float64),
        scale_xyz=cols("scale_x", "scale_y", "scale_z"),
        scale_t=rec["scale_t"].astype(np.float64),
        rot_l=cols(*[f"rot_l_{k}" for k in range(4)]),
        rot_r=cols(*[f"rot_r_{k}" for k in range(4)]),
        opacity=rec["opacity"].astype(np.float64),
        color_f=cols("f_dc_0", "f_dc_1", "f_dc_2"),
        feature=cols(*[f"feat_{k}" for k in range(n_feat)]) if n_feat else np.zeros((count, 0)),
        stage=stage,
    )
