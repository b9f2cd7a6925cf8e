"""Reference computations that share no code with the package.

Run as a script to regenerate ``tests/data/oracle_values.json``.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

FROZEN = Path(__file__).parent / "data" / "oracle_values.json"


def rotmat_from_quat(q):
    """Rodrigues' formula from the axis-angle form of a (w, x, y, z) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, v = q[0], q[1:]
    s = np.linalg.norm(v)
    if s == 0:
        return np.eye(3)
    angle = 2.0 * math.atan2(s, w)
    k = v / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx


def extrinsic(rotation, translation):
    """4x4 world-to-camera matrix by inverting the camera-to-world matrix."""
    c2w = np.eye(4)
    c2w[:3, :3] = rotation
    c2w[:3, 3] = translation
    return np.linalg.inv(c2w)


def project_dense(mean, quat, scale, rotation, translation, fx, fy, cx, cy, reg=0.3, limits=None):
    """Splat mean and covariance with a numerically differentiated projection Jacobian."""
    m_ext = extrinsic(rotation, translation)
    p = m_ext @ np.append(mean, 1.0)
    cam = p[:3]

    def pix(c):
        return np.array([fx * c[0] / c[2] + cx, fy * c[1] / c[2] + cy])

    at = cam.copy()
    if limits is not None:
        at[0] = np.clip(cam[0] / cam[2], -limits[0], limits[0]) * cam[2]
        at[1] = np.clip(cam[1] / cam[2], -limits[1], limits[1]) * cam[2]
    jac = np.zeros((2, 3))
    h = 1e-6 * max(1.0, abs(at[2]))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        jac[:, k] = (pix(at + e) - pix(at - e)) / (2 * h)
    r = rotmat_from_quat(quat)
    sigma = r @ np.diag(np.asarray(scale) ** 2) @ r.T
    w = m_ext[:3, :3]
    cov = jac @ w @ sigma @ w.T @ jac.T + reg * np.eye(2)
    return pix(cam), cov, cam[2]


def blend_pixel(px, py, means2d, covs, depths, opac, colors, bg, thresh=0.0):
    """Front-to-back compositing at one pixel by a plain loop over depth order."""
    order = sorted(range(len(depths)), key=lambda i: (depths[i], i))
    out = np.zeros(3)
    trans = 1.0
    for i in order:
        d = np.array([px, py]) - means2d[i]
        s = opac[i] * math.exp(-0.5 * d @ np.linalg.solve(covs[i], d))
        if s < thresh:
            continue
        out += trans * s * np.asarray(colors[i])
        trans *= 1.0 - s
    return out + trans * np.asarray(bg), trans


def rppc_triple(o, d):
    """d x (o x d) for unit d."""
    return np.cross(d, np.cross(o, d))


def view_angles(cond_pos, cond_fwd, noisy, novel):
    """Independent recomputation of the four constraint families, in degrees."""

    def ang(a, b):
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        c = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        return math.degrees(math.acos(max(-1.0, min(1.0, c))))

    return {
        "theta1": [ang(cond_pos, p) for p, _ in noisy],
        "theta2": [ang(p, q) for p, _ in noisy for q, _ in novel],
        "phi1": [ang(cond_fwd, f) for _, f in noisy],
        "phi2": [ang(cond_fwd, f) for _, f in novel],
    }


def point_distribution_direct(l, o_norm, sigma0=0.5, eps=1e-8):
    """Direct evaluation: mean over primitives of l minus its standardized target."""
    l = np.asarray(l, float)
    mu = l.mean()
    sd = math.sqrt(((l - mu) ** 2).mean() + eps)
    target = (l - mu) / sd * sigma0 + np.mean(o_norm)
    return float(np.mean(l - target))


def cosine_lr(it, peak=4e-4, warmup=2000, total=5000):
    if it <= warmup:
        return peak * it / warmup
    return peak * 0.5 * (1 + math.cos(math.pi * (it - warmup) / (total - warmup)))


def frozen_values() -> dict:
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(1234)
    # dense projection of one seeded splat from a tilted camera
    q = rng.standard_normal(4)
    scale = rng.uniform(0.05, 0.3, 3)
    mean = rng.uniform(-0.5, 0.5, 3)
    ang = 0.3
    rot = np.array([[math.cos(ang), 0, math.sin(ang)], [0, 1, 0], [-math.sin(ang), 0, math.cos(ang)]])
    trans = np.array([-1.0, 0.2, -3.0])
    m2d, cov, depth = project_dense(mean, q, scale, rot, trans, 40.0, 42.0, 16.0, 15.5)
    zeros = np.zeros((32, 32, 3))
    ones = np.ones((32, 32, 3))
    ramp = np.linspace(0, 1, 32 * 32 * 3).reshape(32, 32, 3)
    noisy = np.clip(ramp + np.random.default_rng(7).normal(0, 0.1, ramp.shape), 0, 1)
    kw = dict(channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    return {
        "projection": {"quat": q.tolist(), "scale": scale.tolist(), "mean": mean.tolist(),
                       "rotation": rot.tolist(), "translation": trans.tolist(),
                       "intrinsics": [40.0, 42.0, 16.0, 15.5],
                       "mean2d": m2d.tolist(), "cov2d": cov.tolist(), "depth": depth},
        "two_splat_pixel": blend_pixel(0.0, 0.0, [np.zeros(2), np.zeros(2)], [np.eye(2), np.eye(2)],
                                       [1.0, 2.0], [0.5, 1.0], [[1, 1, 1], [0, 0, 0]], [0, 0, 0])[0].tolist(),
        "rppc_triple": rppc_triple(np.array([0.3, -1.2, 2.0]), np.array([0.6, 0.0, 0.8])).tolist(),
        "ssim_zero_one": structural_similarity(zeros, ones, **kw),
        "ssim_ramp_noisy": structural_similarity(ramp, noisy, **kw),
        "lr": {str(i): cosine_lr(i) for i in (0, 1, 1000, 2000, 3500, 5000)},
    }


if __name__ == "__main__":
    FROZEN.parent.mkdir(exist_ok=True)
    FROZEN.write_text(json.dumps(frozen_values(), indent=1, sort_keys=True) + "\n")
    print(f"wrote {FROZEN}")
