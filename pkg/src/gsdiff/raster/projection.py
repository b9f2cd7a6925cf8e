"""Perspective projection of 3D Gaussians (EWA local affine approximation) and its adjoint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import CameraPose
from ..gaussians import GaussianCloud, quat_to_rotmat

__all__ = ["ProjectedGaussian", "Projection", "project", "ewa_covariance", "projection_jacobian",
           "project_backward"]


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    source_index: int


@dataclass
class Projection:
    """Projected splats in source order plus what the backward pass needs."""

    mean2d: np.ndarray  # (P, 2) pixels, x = column, y = row
    cov2d: np.ndarray  # (P, 2, 2) regularized
    conic: np.ndarray  # (P, 3) entries (a, b, c) of the inverse 2D covariance
    depth: np.ndarray  # (P,)
    source_index: np.ndarray  # (P,) into the cloud
    num_culled: int
    num_singular: int
    # saved for the backward pass
    cam: np.ndarray  # (P, 3) camera-space means
    jac: np.ndarray  # (P, 2, 3)
    cov_cam: np.ndarray  # (P, 3, 3)
    rot: np.ndarray  # (P, 3, 3) from the normalized quaternion
    view: np.ndarray  # (3, 3) world-to-camera rotation

    def __len__(self) -> int:
        return len(self.depth)

    def __getitem__(self, i: int) -> ProjectedGaussian:
        return ProjectedGaussian(self.mean2d[i], self.cov2d[i], float(self.depth[i]), int(self.source_index[i]))


GUARD_BAND = 1.3


def _ratio_limits(pose: CameraPose) -> tuple[float, float]:
    """Largest |x/z|, |y/z| used in the Jacobian: 1.3 times the half-FOV tangents."""
    return (GUARD_BAND * max(pose.cx, pose.width - pose.cx) / pose.fx,
            GUARD_BAND * max(pose.cy, pose.height - pose.cy) / pose.fy)


def projection_jacobian(cam: np.ndarray, fx: float, fy: float, limits: tuple[float, float] | None = None) -> np.ndarray:
    """Jacobian of (x, y, z) -> (fx x/z, fy y/z), shape (..., 2, 3).

    With ``limits`` the off-axis ratios x/z, y/z are clamped first; far
    off-screen splats near the camera otherwise get unbounded footprints.
    """
    x, y, z = cam[..., 0], cam[..., 1], cam[..., 2]
    rx, ry = x / z, y / z
    if limits is not None:
        rx = np.clip(rx, -limits[0], limits[0])
        ry = np.clip(ry, -limits[1], limits[1])
    jac = np.zeros(cam.shape[:-1] + (2, 3))
    jac[..., 0, 0] = fx / z
    jac[..., 0, 2] = -fx * rx / z
    jac[..., 1, 1] = fy / z
    jac[..., 1, 2] = -fy * ry / z
    return jac


def ewa_covariance(cov3d: np.ndarray, view: np.ndarray, jac: np.ndarray) -> np.ndarray:
    """J W Sigma W^T J^T for batched Sigma; ``jac`` may be (.., 2, 3) or (.., 3, 3)."""
    cov_cam = view @ cov3d @ view.T
    return jac @ cov_cam @ np.swapaxes(jac, -1, -2)


def project(cloud: GaussianCloud, pose: CameraPose, near: float = 0.01, far: float = 1000.0,
            cov_reg: float = 0.3) -> Projection:
    view, t_w2c = pose.world_to_camera
    cam_all = cloud.means @ view.T + t_w2c
    keep = (cam_all[:, 2] > near) & (cam_all[:, 2] < far)
    idx = np.nonzero(keep)[0]
    cam = cam_all[idx]
    rot = quat_to_rotmat(cloud.quats[idx])
    m = rot * cloud.scales[idx][:, None, :]
    cov3d = m @ np.swapaxes(m, -1, -2)
    cov_cam = view @ cov3d @ view.T
    jac = projection_jacobian(cam, pose.fx, pose.fy, _ratio_limits(pose))
    cov2d = jac @ cov_cam @ np.swapaxes(jac, -1, -2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2))
    cov2d[:, 0, 0] += cov_reg
    cov2d[:, 1, 1] += cov_reg
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    ok = np.isfinite(det) & (det > 0)
    num_singular = int((~ok).sum())
    if num_singular:
        idx, cam, rot, cov_cam, jac, cov2d, det = (a[ok] for a in (idx, cam, rot, cov_cam, jac, cov2d, det))
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    z = cam[:, 2]
    mean2d = np.stack([pose.fx * cam[:, 0] / z + pose.cx, pose.fy * cam[:, 1] / z + pose.cy], axis=1)
    return Projection(mean2d, cov2d, conic, z.copy(), idx, int((~keep).sum()), num_singular,
                      cam, jac, cov_cam, rot, view)


def _quat_rotmat_vjp(q: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. an unnormalized quaternion given dL/dR of R(q/|q|)."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    G = g_rot
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=1)
    return (gu - u * np.sum(u * gu, axis=1, keepdims=True)) / n


def project_backward(proj: Projection, cloud: GaussianCloud, pose: CameraPose,
                     g_mean2d: np.ndarray, g_conic: np.ndarray) -> dict[str, np.ndarray]:
    """Chain splat-space gradients back to means, quats and scales (source order, culled = 0)."""
    n = len(cloud)
    out = {"means": np.zeros((n, 3)), "quats": np.zeros((n, 4)), "scales": np.zeros((n, 3))}
    if len(proj) == 0:
        return out
    idx = proj.source_index
    conic = proj.conic
    cmat = np.empty((len(proj), 2, 2))
    cmat[:, 0, 0] = conic[:, 0]
    cmat[:, 0, 1] = cmat[:, 1, 0] = conic[:, 1]
    cmat[:, 1, 1] = conic[:, 2]
    gc = np.empty_like(cmat)
    gc[:, 0, 0] = g_conic[:, 0]
    gc[:, 0, 1] = gc[:, 1, 0] = 0.5 * g_conic[:, 1]
    gc[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -cmat @ gc @ cmat
    jac, cov_cam = proj.jac, proj.cov_cam
    g_cov_cam = np.swapaxes(jac, -1, -2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ cov_cam
    x, y, z = proj.cam[:, 0], proj.cam[:, 1], proj.cam[:, 2]
    fx, fy = pose.fx, pose.fy
    lim_x, lim_y = _ratio_limits(pose)
    rx, ry = x / z, y / z
    free_x = np.abs(rx) <= lim_x
    free_y = np.abs(ry) <= lim_y
    rx, ry = np.clip(rx, -lim_x, lim_x), np.clip(ry, -lim_y, lim_y)
    # J[0, 2] = -fx rx / z and J[1, 2] = -fy ry / z; a clamped ratio is constant
    g_rx = -g_jac[:, 0, 2] * fx / z * free_x
    g_ry = -g_jac[:, 1, 2] * fy / z * free_y
    g_cam = np.zeros((len(proj), 3))
    g_cam[:, 0] = g_mean2d[:, 0] * fx / z + g_rx / z
    g_cam[:, 1] = g_mean2d[:, 1] * fy / z + g_ry / z
    g_cam[:, 2] = (
        -g_mean2d[:, 0] * fx * x / (z * z)
        - g_mean2d[:, 1] * fy * y / (z * z)
        - g_jac[:, 0, 0] * fx / (z * z)
        + g_jac[:, 0, 2] * fx * rx / (z * z)
        - g_jac[:, 1, 1] * fy / (z * z)
        + g_jac[:, 1, 2] * fy * ry / (z * z)
        - g_rx * x / (z * z)
        - g_ry * y / (z * z)
    )
    view = proj.view
    out["means"][idx] = g_cam @ view
    g_cov3d = view.T @ g_cov_cam @ view
    g_cov3d = 0.5 * (g_cov3d + np.swapaxes(g_cov3d, -1, -2))
    scales = cloud.scales[idx]
    m = proj.rot * scales[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    out["scales"][idx] = np.sum(g_m * proj.rot, axis=1)
    out["quats"][idx] = _quat_rotmat_vjp(cloud.quats[idx], g_m * scales[:, None, :])
    return out
