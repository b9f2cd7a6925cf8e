"""Gaussian primitives: raw channel activation, lifting onto pixel rays, merging, PLY I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as te
from .camera import RayGrid
from .errors import ContractError, DegenerateRotationError, EmptyInputError, InvalidInputError
from .tensor import Tensor

__all__ = [
    "ChannelLayout",
    "RangeProfile",
    "OBJECT_PROFILE",
    "SCENE_PROFILE",
    "profile_for",
    "GaussianPrimitive",
    "GaussianParamMap",
    "GaussianCloud",
    "lift_tensors",
    "activate_and_lift",
    "quat_to_rotmat",
    "covariance",
    "merge_views",
    "export_ply",
    "import_ply",
]

SCALE_MIN = 1e-4


@dataclass(frozen=True)
class ChannelLayout:
    """Channel offsets inside a raw Gaussian parameter map.

    ``extra`` trailing channels are carried but ignored, so a wider layout
    (e.g. 14 channels) can be used without changing the activation code.
    """

    extra: int = 0

    depth = slice(0, 1)
    quat = slice(1, 5)
    scale = slice(5, 8)
    opacity = slice(8, 9)
    color = slice(9, 12)

    @property
    def channels(self) -> int:
        return 12 + self.extra


@dataclass(frozen=True)
class RangeProfile:
    u_near: float
    u_far: float
    clip_box: float | None = None  # half-size of an origin-centered cube bounding the means
    name: str = ""

    def __post_init__(self):
        if not 0.0 <= self.u_near < self.u_far:
            raise ContractError(f"invalid depth range [{self.u_near}, {self.u_far}]")


OBJECT_PROFILE = RangeProfile(0.1, 4.2, clip_box=1.0, name="object")
SCENE_PROFILE = RangeProfile(0.0, 500.0, clip_box=None, name="scene")


def profile_for(tag: str) -> RangeProfile:
    try:
        return {"object": OBJECT_PROFILE, "scene": SCENE_PROFILE}[tag]
    except KeyError:
        raise ContractError(f"unknown profile tag {tag!r}") from None


@dataclass(frozen=True)
class GaussianPrimitive:
    mu: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray


@dataclass(frozen=True)
class GaussianParamMap:
    values: np.ndarray  # (H, W, C) pre-activation
    layout: ChannelLayout = field(default_factory=ChannelLayout)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[-1] != self.layout.channels:
            raise ContractError(f"param map must be H x W x {self.layout.channels}, got {v.shape}")


@dataclass(frozen=True)
class GaussianCloud:
    """Struct-of-arrays set of activated Gaussians; indexing yields primitives."""

    means: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4) unit, (w, x, y, z)
    scales: np.ndarray  # (N, 3) standard deviations
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)

    def __post_init__(self):
        n = len(self.means)
        for name in ("quats", "scales", "opacities", "colors"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"cloud field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[i], self.quats[i], self.scales[i], float(self.opacities[i]), self.colors[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive]) -> "GaussianCloud":
        if not prims:
            return cls.empty()
        return cls(
            np.array([p.mu for p in prims], dtype=np.float64),
            np.array([p.quat for p in prims], dtype=np.float64),
            np.array([p.scale for p in prims], dtype=np.float64),
            np.array([p.opacity for p in prims], dtype=np.float64),
            np.array([p.color for p in prims], dtype=np.float64),
        )

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(*(np.asarray(a, dtype=dtype) for a in self.arrays()))

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self.means, self.quats, self.scales, self.opacities, self.colors

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(*(a[idx] for a in self.arrays()))

    def covariances(self) -> np.ndarray:
        return covariance(self.quats, self.scales)


def lift_tensors(raw: Tensor, origins: np.ndarray, dirs: np.ndarray, profile: RangeProfile,
                 layout: ChannelLayout = ChannelLayout()) -> dict[str, Tensor]:
    """Differentiable activation of raw channels (..., C) into Gaussians on their rays.

    Returns means, quats, scales, opacities, colors and the ray distance ``depth``.
    """
    w = te.sigmoid(raw[..., layout.depth])
    depth = w * profile.u_near + (1.0 - w) * profile.u_far
    means = depth * dirs.astype(raw.dtype) + origins.astype(raw.dtype)
    if profile.clip_box is not None:
        means = te.clip(means, -profile.clip_box, profile.clip_box)
    q = raw[..., layout.quat]
    norm = te.sqrt((q * q).sum(axis=-1, keepdims=True) + 1e-12)
    quats = q / norm
    scales = te.clip(te.exp(raw[..., layout.scale]), SCALE_MIN, profile.u_far)
    opacities = te.sigmoid(raw[..., layout.opacity])[..., 0]
    colors = te.sigmoid(raw[..., layout.color])
    return {"means": means, "quats": quats, "scales": scales, "opacities": opacities, "colors": colors,
            "depth": depth[..., 0]}


def activate_and_lift(pmap: GaussianParamMap, grid: RayGrid, profile: RangeProfile) -> GaussianCloud:
    values = np.asarray(pmap.values, dtype=np.float64)
    if values.shape[:2] != grid.shape:
        raise ContractError(f"param map {values.shape[:2]} does not match ray grid {grid.shape}")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("non-finite raw Gaussian parameters")
    out = lift_tensors(Tensor(values), grid.origins, grid.directions, profile, pmap.layout)
    flat = {k: v.data.reshape(-1, *v.shape[2:]) for k, v in out.items()}
    return GaussianCloud(flat["means"], flat["quats"], flat["scales"], flat["opacities"], flat["colors"])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from (w, x, y, z) quaternions, normalizing first."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateRotationError("zero quaternion")
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def covariance(quat, scale) -> np.ndarray:
    """Sigma = R S S^T R^T, vectorized over leading axes."""
    rot = quat_to_rotmat(quat)
    m = rot * np.asarray(scale, dtype=np.float64)[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def merge_views(maps: Sequence[GaussianParamMap], grids: Sequence[RayGrid], profile: RangeProfile) -> GaussianCloud:
    if not maps:
        raise EmptyInputError("merge_views needs at least one view")
    if len(maps) != len(grids):
        raise ContractError(f"{len(maps)} param maps but {len(grids)} ray grids")
    clouds = [activate_and_lift(m, g, profile) for m, g in zip(maps, grids)]
    return concat_clouds(clouds)


def concat_clouds(clouds: Sequence[GaussianCloud]) -> GaussianCloud:
    if not clouds:
        return GaussianCloud.empty()
    return GaussianCloud(*(np.concatenate(parts, axis=0) for parts in zip(*(c.arrays() for c in clouds))))


_PLY_FIELDS = ("x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2",
               "opacity", "red", "green", "blue")


def export_ply(cloud: GaussianCloud, path) -> None:
    """Binary little-endian PLY with activated float32 values."""
    if len(cloud) == 0:
        raise EmptyInputError("cannot export an empty cloud")
    data = np.concatenate(
        [cloud.means, cloud.quats, cloud.scales, cloud.opacities[:, None], cloud.colors], axis=1
    ).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(np.ascontiguousarray(data).tobytes())
    except OSError as exc:
        raise OSError(f"failed to write PLY {path}: {exc}") from exc


def import_ply(path) -> GaussianCloud:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read PLY {path}: {exc}") from exc
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise ContractError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ContractError(f"{path}: only binary little-endian PLY is supported")
    count = None
    names = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:2] == ["property", "float"]:
            names.append(parts[2])
    if count is None or tuple(names) != _PLY_FIELDS:
        raise ContractError(f"{path}: unexpected PLY layout {names}")
    body = np.frombuffer(raw, dtype="<f4", count=count * len(names), offset=end + len(b"end_header\n"))
    body = body.reshape(count, len(names)).astype(np.float64)
    return GaussianCloud(body[:, 0:3], body[:, 3:7], body[:, 7:10], body[:, 10], body[:, 11:14])
