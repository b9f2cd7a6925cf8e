"""Pinhole cameras, per-pixel rays, ray embeddings and view-selection angle checks.

Conventions: camera-to-world rotation whose columns are the camera's
(right, down, forward) axes; pixel centers at half-integer coordinates;
images indexed (row, col).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DegeneratePoseError, InvalidCameraError

__all__ = [
    "CameraPose",
    "RayGrid",
    "RayEmbedding",
    "ViewConstraints",
    "ConstraintReport",
    "generate_rays",
    "plucker_embed",
    "rppc_embed",
    "check_view_constraints",
    "look_at",
    "intrinsics_from_fov",
    "angle_between",
]

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 8 or self.height < 8:
            raise InvalidCameraError(f"image must be at least 8x8, got {self.width}x{self.height}")
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            raise InvalidCameraError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise InvalidCameraError("rotation has determinant != +1")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """(R_w2c, t_w2c) such that x_cam = R_w2c @ x_world + t_w2c."""
        rt = self.rotation.T
        return rt, -rt @ self.translation

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (x=col, y=row) and view depth of world points."""
        cam = (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation
        z = cam[..., 2]
        uv = np.stack([self.fx * cam[..., 0] / z + self.cx, self.fy * cam[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def to_json(self) -> dict:
        return {
            "r": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "w": int(self.width),
            "h": int(self.height),
        }

    @classmethod
    def from_json(cls, record: dict) -> "CameraPose":
        try:
            pose = cls(
                rotation=np.asarray(record["r"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(record["t"], dtype=np.float64).reshape(3),
                fx=float(record["fx"]),
                fy=float(record["fy"]),
                cx=float(record["cx"]),
                cy=float(record["cy"]),
                width=int(record["w"]),
                height=int(record["h"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ContractError(f"malformed pose record: {exc}") from exc
        pose.validate()
        return pose

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "CameraPose":
        return cls.from_json(json.loads(Path(path).read_text()))


def intrinsics_from_fov(fov_deg: float, width: int, height: int) -> tuple[float, float, float, float]:
    """Square-pixel intrinsics from a horizontal field of view.

    The FOV spans the outermost pixel centers, so the leftmost column's ray
    sits exactly at half the FOV from the optical axis.
    """
    f = (0.5 * width - 0.5) / math.tan(math.radians(fov_deg) / 2.0)
    return f, f, width / 2.0, height / 2.0


def look_at(eye, target, up=(0.0, 0.0, 1.0), *, fov_deg: float = 50.0, width: int = 32, height: int = 32) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise DegeneratePoseError("look_at: eye coincides with target")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        # looking along the up axis
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    fx, fy, cx, cy = intrinsics_from_fov(fov_deg, width, height)
    return CameraPose(rot, eye, fx, fy, cx, cy, width, height)


@dataclass(frozen=True)
class RayGrid:
    origins: np.ndarray  # (H, W, 3)
    directions: np.ndarray  # (H, W, 3), unit

    @property
    def shape(self) -> tuple[int, int]:
        return self.origins.shape[:2]


@dataclass(frozen=True)
class RayEmbedding:
    values: np.ndarray  # (H, W, 6)
    mode: str = "rppc"


def generate_rays(pose: CameraPose) -> RayGrid:
    if not (pose.fx > 0 and pose.fy > 0):
        raise InvalidCameraError(f"degenerate intrinsics fx={pose.fx}, fy={pose.fy}")
    pose.validate()
    cols = np.arange(pose.width, dtype=np.float64) + 0.5
    rows = np.arange(pose.height, dtype=np.float64) + 0.5
    u, v = np.meshgrid(cols, rows)
    cam = np.stack([(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, np.ones_like(u)], axis=-1)
    dirs = cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return RayGrid(origins, dirs)


def plucker_embed(grid: RayGrid) -> RayEmbedding:
    moment = np.cross(grid.origins, grid.directions)
    return RayEmbedding(np.concatenate([moment, grid.directions], axis=-1), mode="plucker")


def rppc_embed(grid: RayGrid) -> RayEmbedding:
    o, d = grid.origins, grid.directions
    ref = o - np.sum(o * d, axis=-1, keepdims=True) * d
    return RayEmbedding(np.concatenate([ref, d], axis=-1), mode="rppc")


def angle_between(a, b) -> float:
    """Angle in degrees via clamped arccos of the normalized dot product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegeneratePoseError("angle undefined for a zero-norm vector")
    c = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return math.degrees(math.acos(c))


@dataclass(frozen=True)
class ViewConstraints:
    """Angle thresholds in degrees for noisy/novel view selection."""

    theta1: float = 60.0  # condition vs noisy positions
    theta2: float = 60.0  # noisy vs novel positions
    phi1: float = 75.0  # condition vs noisy forward axes
    phi2: float = 75.0  # condition vs novel forward axes

    def __post_init__(self):
        for name in ("theta1", "theta2", "phi1", "phi2"):
            v = getattr(self, name)
            if not 0.0 < v <= 180.0:
                raise ContractError(f"{name} must lie in (0, 180], got {v}")


@dataclass
class ConstraintReport:
    theta_cd: list[float] = field(default_factory=list)
    theta_dn: list[list[float]] = field(default_factory=list)
    phi_noisy_cos: list[float] = field(default_factory=list)
    phi_novel_cos: list[float] = field(default_factory=list)
    noisy_ok: list[bool] = field(default_factory=list)
    novel_ok: list[bool] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegeneratePoseError("zero-norm forward vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def check_view_constraints(
    condition: CameraPose,
    noisy: list[CameraPose],
    novel: list[CameraPose],
    constraints: ViewConstraints | None = None,
) -> ConstraintReport:
    c = constraints or ViewConstraints()
    rep = ConstraintReport()
    cos_phi1 = math.cos(math.radians(c.phi1))
    cos_phi2 = math.cos(math.radians(c.phi2))
    z_con = condition.forward
    for i, pose in enumerate(noisy):
        ang = angle_between(condition.center, pose.center)
        cs = _cos(z_con, pose.forward)
        rep.theta_cd.append(ang)
        rep.phi_noisy_cos.append(cs)
        row = [angle_between(pose.center, nv.center) for nv in novel]
        rep.theta_dn.append(row)
        ok = True
        if ang > c.theta1:
            rep.failures.append(f"theta1: noisy {i} position angle {ang:.3f} > {c.theta1}")
            ok = False
        if cs < cos_phi1:
            rep.failures.append(f"phi1: noisy {i} forward angle {math.degrees(math.acos(cs)):.3f} > {c.phi1}")
            ok = False
        for j, a in enumerate(row):
            if a > c.theta2:
                rep.failures.append(f"theta2: noisy {i} / novel {j} position angle {a:.3f} > {c.theta2}")
                ok = False
        rep.noisy_ok.append(ok)
    for j, pose in enumerate(novel):
        cs = _cos(z_con, pose.forward)
        rep.phi_novel_cos.append(cs)
        ok = cs >= cos_phi2 and all(rep.theta_dn[i][j] <= c.theta2 for i in range(len(noisy)))
        if cs < cos_phi2:
            rep.failures.append(f"phi2: novel {j} forward angle {math.degrees(math.acos(cs)):.3f} > {c.phi2}")
        rep.novel_ok.append(ok)
    return rep
