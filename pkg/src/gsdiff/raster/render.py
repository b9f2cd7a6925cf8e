"""Tile-based differentiable splatting and an exhaustive per-pixel reference renderer."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..camera import CameraPose
from ..errors import ContractError, InvalidInputError
from ..gaussians import GaussianCloud
from . import _blend_py
from .projection import Projection, project, project_backward

try:
    if os.environ.get("GSDIFF_PURE_PYTHON"):
        raise ImportError("compiled kernels disabled by GSDIFF_PURE_PYTHON")
    from . import _blend as _blend_c
except ImportError:
    _blend_c = None

BACKEND = "cython" if _blend_c is not None else "python"

__all__ = ["BACKEND", "RenderConfig", "RenderOutput", "RenderGradients", "render", "render_naive",
           "render_backward", "available_backends"]


def available_backends() -> list[str]:
    return ["cython", "python"] if _blend_c is not None else ["python"]


def _kernel(backend: str | None):
    name = backend or BACKEND
    if name == "cython":
        if _blend_c is None:
            raise ContractError("compiled rasterizer kernel is not available")
        return _blend_c
    if name == "python":
        return _blend_py
    raise ContractError(f"unknown rasterizer backend {name!r}")


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    near_cull: float = 0.01
    far_cull: float = 1000.0
    alpha_threshold: float = 1.0 / 255.0
    # remaining colour after an early stop is bounded by this value
    transmittance_floor: float = 1e-6
    cov_reg: float = 0.3
    num_threads: int = 0  # 0: all cores

    def __post_init__(self):
        if self.tile_size not in (8, 16, 32):
            raise ContractError(f"tile_size must be 8, 16 or 32, got {self.tile_size}")
        if not 0.0 < self.near_cull < self.far_cull:
            raise ContractError("need 0 < near_cull < far_cull")
        if self.alpha_threshold < 0 or self.transmittance_floor < 0:
            raise ContractError("thresholds must be non-negative")

    @property
    def threads(self) -> int:
        return self.num_threads or (os.cpu_count() or 1)


@dataclass
class _Records:
    cloud: GaussianCloud
    pose: CameraPose
    cfg: RenderConfig
    proj: Projection
    offsets: np.ndarray
    entries: np.ndarray
    backend: str


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    num_culled: int = 0
    num_singular: int = 0
    records: _Records | None = field(default=None, repr=False)


@dataclass
class RenderGradients:
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


def _check_finite(cloud: GaussianCloud) -> None:
    for name, arr in zip(("mu", "quat", "scale", "opacity", "color"), cloud.arrays()):
        bad = ~np.isfinite(arr.reshape(len(arr), -1 if len(arr) else 1)).all(axis=1)
        if bad.any():
            raise InvalidInputError(f"non-finite {name} at primitive index {int(np.argmax(bad))}")


def _bin_tiles(proj: Projection, opacity: np.ndarray, pose: CameraPose, cfg: RenderConfig):
    """Assign splats to tiles and sort each tile's list by (depth, source index)."""
    ts = cfg.tile_size
    tiles_x = (pose.width + ts - 1) // ts
    tiles_y = (pose.height + ts - 1) // ts
    n_tiles = tiles_x * tiles_y
    tau = cfg.alpha_threshold
    if tau > 0:
        live = opacity >= tau
        radius2 = np.where(live, 2.0 * np.log(np.maximum(opacity, tau) / tau), 0.0)
    else:
        live = opacity > 0
        radius2 = np.full(len(opacity), np.inf)
    # Every pixel with sigma >= tau lies inside the bounding box of the ellipse
    # q <= radius2, so the per-tile lists lose nothing the reference renderer keeps.
    with np.errstate(invalid="ignore"):
        ex = np.sqrt(radius2 * proj.cov2d[:, 0, 0]) * (1 + 1e-6) + 1e-9
        ey = np.sqrt(radius2 * proj.cov2d[:, 1, 1]) * (1 + 1e-6) + 1e-9
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    with np.errstate(invalid="ignore"):
        c_lo = np.clip(np.ceil(mx - ex - 0.5), 0, pose.width - 1)
        c_hi = np.clip(np.floor(mx + ex - 0.5), 0, pose.width - 1)
        r_lo = np.clip(np.ceil(my - ey - 0.5), 0, pose.height - 1)
        r_hi = np.clip(np.floor(my + ey - 0.5), 0, pose.height - 1)
        live &= (np.ceil(mx - ex - 0.5) <= pose.width - 1) & (np.floor(mx + ex - 0.5) >= 0)
        live &= (np.ceil(my - ey - 0.5) <= pose.height - 1) & (np.floor(my + ey - 0.5) >= 0)
    ids = np.nonzero(live)[0]
    tx0 = (c_lo[ids] // ts).astype(np.intp)
    tx1 = (c_hi[ids] // ts).astype(np.intp)
    ty0 = (r_lo[ids] // ts).astype(np.intp)
    ty1 = (r_hi[ids] // ts).astype(np.intp)
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(ids)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_id = (ty0[owner] + local // nx[owner]) * tiles_x + tx0[owner] + local % nx[owner]
    splat = ids[owner]
    order = np.lexsort((splat, proj.depth[splat], tile_id))
    entries = np.ascontiguousarray(splat[order], dtype=np.intp)
    offsets = np.searchsorted(tile_id[order], np.arange(n_tiles + 1)).astype(np.intp)
    return offsets, entries


def render(cloud: GaussianCloud, pose: CameraPose, cfg: RenderConfig | None = None,
           backend: str | None = None) -> RenderOutput:
    cfg = cfg or RenderConfig()
    kernel = _kernel(backend)
    cloud = cloud.astype(np.float64)
    _check_finite(cloud)
    proj = project(cloud, pose, cfg.near_cull, cfg.far_cull, cfg.cov_reg)
    opacity = np.ascontiguousarray(cloud.opacities[proj.source_index])
    color = np.ascontiguousarray(cloud.colors[proj.source_index])
    offsets, entries = _bin_tiles(proj, opacity, pose, cfg)
    h, w = pose.height, pose.width
    image = np.empty((h, w, 3))
    trans = np.empty((h, w))
    bg = np.asarray(cfg.background, dtype=np.float64)
    kernel.forward(np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic), opacity, color,
                   offsets, entries, h, w, cfg.tile_size, bg, cfg.alpha_threshold,
                   cfg.transmittance_floor, image, trans, cfg.threads)
    records = _Records(cloud, pose, cfg, proj, offsets, entries, backend or BACKEND)
    return RenderOutput(image, 1.0 - trans, proj.num_culled, proj.num_singular, records)


def render_backward(output: RenderOutput, grad_image: np.ndarray) -> RenderGradients:
    rec = output.records
    if rec is None:
        raise ContractError("render output carries no blend records; use render(), not render_naive()")
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != output.image.shape:
        raise ContractError(f"grad_image shape {grad_image.shape} != image shape {output.image.shape}")
    proj, cfg, pose = rec.proj, rec.cfg, rec.pose
    n_entries = len(rec.entries)
    g_mean = np.zeros((n_entries, 2))
    g_conic = np.zeros((n_entries, 3))
    g_opac = np.zeros(n_entries)
    g_color = np.zeros((n_entries, 3))
    opacity = np.ascontiguousarray(rec.cloud.opacities[proj.source_index])
    color = np.ascontiguousarray(rec.cloud.colors[proj.source_index])
    _kernel(rec.backend).backward(
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic), opacity, color,
        rec.offsets, rec.entries, pose.height, pose.width, cfg.tile_size,
        np.asarray(cfg.background, dtype=np.float64), cfg.alpha_threshold, cfg.transmittance_floor,
        grad_image, g_mean, g_conic, g_opac, g_color, cfg.threads)
    p = len(proj)

    def reduce(vals: np.ndarray) -> np.ndarray:
        # bincount sums in entry order, which keeps the reduction deterministic
        if vals.ndim == 1:
            return np.bincount(rec.entries, weights=vals, minlength=p)
        return np.stack([np.bincount(rec.entries, weights=vals[:, i], minlength=p)
                         for i in range(vals.shape[1])], axis=1)

    n = len(rec.cloud)
    geo = project_backward(proj, rec.cloud, pose, reduce(g_mean), reduce(g_conic))
    opac = np.zeros(n)
    col = np.zeros((n, 3))
    opac[proj.source_index] = reduce(g_opac)
    col[proj.source_index] = reduce(g_color)
    return RenderGradients(geo["means"], geo["quats"], geo["scales"], opac, col)


def render_naive(cloud: GaussianCloud, pose: CameraPose, cfg: RenderConfig | None = None,
                 chunk: int = 2048) -> RenderOutput:
    """Reference renderer: every splat at every pixel, one global depth sort, no early stop."""
    cfg = cfg or RenderConfig()
    cloud = cloud.astype(np.float64)
    _check_finite(cloud)
    proj = project(cloud, pose, cfg.near_cull, cfg.far_cull, cfg.cov_reg)
    h, w = pose.height, pose.width
    bg = np.asarray(cfg.background, dtype=np.float64)
    order = np.lexsort((proj.source_index, proj.depth))
    mean2d = proj.mean2d[order]
    conic = proj.conic[order]
    opacity = cloud.opacities[proj.source_index[order]]
    color = cloud.colors[proj.source_index[order]]
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    px, py = cols.reshape(-1), rows.reshape(-1)
    image = np.empty((h * w, 3))
    trans = np.empty(h * w)
    for lo in range(0, h * w, chunk):
        hi = min(lo + chunk, h * w)
        dx = px[lo:hi, None] - mean2d[None, :, 0]
        dy = py[lo:hi, None] - mean2d[None, :, 1]
        q = conic[:, 0] * dx * dx + 2.0 * conic[:, 1] * dx * dy + conic[:, 2] * dy * dy
        sigma = opacity * np.exp(-0.5 * q)
        sigma[sigma < cfg.alpha_threshold] = 0.0
        before = np.ones_like(sigma)
        if sigma.shape[1] > 1:
            before[:, 1:] = np.cumprod(1.0 - sigma[:, :-1], axis=1)
        final = before[:, -1] * (1.0 - sigma[:, -1]) if sigma.shape[1] else np.ones(hi - lo)
        image[lo:hi] = (sigma * before) @ color + final[:, None] * bg
        trans[lo:hi] = final
    return RenderOutput(image.reshape(h, w, 3), 1.0 - trans.reshape(h, w), proj.num_culled, proj.num_singular)


def footprint_radius(opacity: float, alpha_threshold: float) -> float:
    """Mahalanobis radius beyond which a splat's contribution drops below the threshold."""
    if alpha_threshold <= 0:
        return math.inf
    if opacity < alpha_threshold:
        return 0.0
    return math.sqrt(2.0 * math.log(opacity / alpha_threshold))
