"""Procedural object/scene assets, constrained view selection, mixed batches and manifests."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .camera import CameraPose, ViewConstraints, check_view_constraints, look_at
from .errors import ConstraintsUnsatisfiableError, ContractError, DegeneratePoseError
from .gaussians import GaussianCloud, export_ply, import_ply
from .imageio import read_png, write_png
from .raster import RenderConfig, render_naive

log = logging.getLogger(__name__)

__all__ = [
    "DataConfig",
    "SyntheticAsset",
    "View",
    "ViewSet",
    "gen_object",
    "gen_scene",
    "select_views",
    "viewset_stream",
    "mixed_batch",
    "save_viewset",
    "load_viewset",
    "DatasetManifest",
    "write_dataset",
    "load_dataset",
    "MAX_DRAWS",
]

MAX_DRAWS = 10_000
OBJECT_POSES = 32
SCENE_POSES = 24


@dataclass(frozen=True)
class DataConfig:
    fov_deg: float = 50.0
    width: int = 32
    height: int = 32
    constraints: ViewConstraints = ViewConstraints()
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def render_config(self) -> RenderConfig:
        return RenderConfig(background=self.background)

    def to_json(self) -> dict:
        c = self.constraints
        return {"fov_deg": self.fov_deg, "width": self.width, "height": self.height,
                "background": list(self.background),
                "constraints": {"theta1": c.theta1, "theta2": c.theta2, "phi1": c.phi1, "phi2": c.phi2}}

    @classmethod
    def from_json(cls, d: dict) -> "DataConfig":
        return cls(d["fov_deg"], d["width"], d["height"], ViewConstraints(**d["constraints"]),
                   tuple(d["background"]))


@dataclass
class SyntheticAsset:
    asset_id: str
    tag: str  # "object" | "scene"
    cloud: GaussianCloud
    poses: list[CameraPose]
    images: list[np.ndarray]
    bounds: tuple[list[float], list[float]]
    normalization: dict = field(default_factory=dict)
    seed: int | None = None


@dataclass(frozen=True)
class View:
    index: int
    pose: CameraPose
    image: np.ndarray


@dataclass(frozen=True)
class ViewSet:
    condition: View
    noisy: tuple[View, ...]
    novel: tuple[View, ...]
    tag: str = "object"
    asset_id: str = ""

    @property
    def indices(self) -> list[int]:
        return [self.condition.index] + [v.index for v in self.noisy] + [v.index for v in self.novel]


def _f32(cloud: GaussianCloud) -> GaussianCloud:
    # assets are stored as float32 PLY; keep the in-memory copy on the same grid
    return GaussianCloud(*(np.asarray(a, dtype=np.float32).astype(np.float64) for a in cloud.arrays()))


def _random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _render_all(cloud: GaussianCloud, poses: Sequence[CameraPose], cfg: DataConfig) -> list[np.ndarray]:
    rc = cfg.render_config
    return [render_naive(cloud, p, rc).image for p in poses]


def gen_object(seed: int, cfg: DataConfig = DataConfig()) -> SyntheticAsset:
    """A blob composition inside the unit ball, seen from an orbit of 32 cameras."""
    rng = np.random.default_rng([seed, 0])
    n = int(rng.integers(20, 61))
    n_parts = int(rng.integers(2, 5))
    centers = rng.standard_normal((n_parts, 3))
    centers *= (rng.uniform(0.0, 0.45, n_parts) / np.linalg.norm(centers, axis=1))[:, None]
    base = rng.uniform(0.05, 0.95, (n_parts, 3))
    part = rng.integers(0, n_parts, n)
    means = centers[part] + rng.normal(0.0, 0.22, (n, 3))
    r = np.linalg.norm(means, axis=1, keepdims=True)
    means = np.where(r > 0.75, means * 0.75 / np.maximum(r, 1e-12), means)
    scales = rng.uniform(0.06, 0.22, (n, 3))
    colors = np.clip(base[part] + rng.normal(0.0, 0.06, (n, 3)), 0.02, 0.98)
    opac = rng.uniform(0.7, 0.98, n)
    cloud = _f32(GaussianCloud(means, _random_quats(rng, n), scales, opac, colors))

    # the near face of the unit cube exactly fills the frame at this distance
    dist = 1.0 + 1.0 / math.tan(math.radians(cfg.fov_deg / 2.0))
    az = 2 * math.pi * np.arange(OBJECT_POSES) / OBJECT_POSES + rng.uniform(-0.08, 0.08, OBJECT_POSES)
    el = np.radians(rng.uniform(-15.0, 35.0, OBJECT_POSES))
    poses = []
    for a, e in zip(az, el):
        eye = dist * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
        poses.append(look_at(eye, [0.0, 0.0, 0.0], fov_deg=cfg.fov_deg, width=cfg.width, height=cfg.height))
    norm = {"kind": "object-center", "center": [0.0, 0.0, 0.0], "scale": 1.0,
            "note": "object centered at the origin and scaled into [-1, 1]^3"}
    return SyntheticAsset(f"obj_{seed:04d}", "object", cloud, poses, _render_all(cloud, poses, cfg),
                          ([-1.0] * 3, [1.0] * 3), norm, seed)


def _sheet(rng, origin, u_axis, v_axis, nu, nv, thick_axis, color, jitter=0.05):
    """A flattened grid of Gaussians spanning origin + [0,1]u + [0,1]v."""
    uu, vv = np.meshgrid((np.arange(nu) + 0.5) / nu, (np.arange(nv) + 0.5) / nv, indexing="ij")
    pts = origin + uu.reshape(-1, 1) * u_axis + vv.reshape(-1, 1) * v_axis
    n = len(pts)
    su = np.linalg.norm(u_axis) / nu * 0.7
    sv = np.linalg.norm(v_axis) / nv * 0.7
    scales = np.empty((n, 3))
    axes = [0, 1, 2]
    axes.remove(thick_axis)
    scales[:, axes[0]] = su if abs(u_axis[axes[0]]) > 0 else sv
    scales[:, axes[1]] = sv if abs(v_axis[axes[1]]) > 0 else su
    scales[:, thick_axis] = 0.03
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    cols = np.clip(np.asarray(color) + rng.normal(0.0, jitter, (n, 3)), 0.02, 0.98)
    return pts, quats, scales, np.full(n, 0.97), cols


def gen_scene(seed: int, cfg: DataConfig = DataConfig()) -> SyntheticAsset:
    """A box-shaped room (floor and three walls) with interior blobs and a dolly or pan trajectory."""
    rng = np.random.default_rng([seed, 1])
    half_w, half_d, half_h = 4.0, 4.0, 1.5
    parts = [
        _sheet(rng, np.array([-half_w, -half_d, -half_h]), np.array([2 * half_w, 0, 0]),
               np.array([0, 2 * half_d, 0]), 8, 8, 2, rng.uniform(0.3, 0.7, 3)),
        _sheet(rng, np.array([-half_w, half_d, -half_h]), np.array([2 * half_w, 0, 0]),
               np.array([0, 0, 2 * half_h]), 8, 4, 1, rng.uniform(0.3, 0.9, 3)),
        _sheet(rng, np.array([-half_w, -half_d, -half_h]), np.array([0, 2 * half_d, 0]),
               np.array([0, 0, 2 * half_h]), 8, 4, 0, rng.uniform(0.3, 0.9, 3)),
        _sheet(rng, np.array([half_w, -half_d, -half_h]), np.array([0, 2 * half_d, 0]),
               np.array([0, 0, 2 * half_h]), 8, 4, 0, rng.uniform(0.3, 0.9, 3)),
    ]
    nb = int(rng.integers(20, 41))
    blob_means = np.column_stack([rng.uniform(-3.0, 3.0, nb), rng.uniform(-0.5, 3.5, nb),
                                  rng.uniform(-1.3, 0.8, nb)])
    parts.append((blob_means, _random_quats(rng, nb), rng.uniform(0.15, 0.5, (nb, 3)),
                  rng.uniform(0.7, 0.98, nb), rng.uniform(0.05, 0.95, (nb, 3))))
    cloud = _f32(GaussianCloud(*(np.concatenate(p, axis=0) for p in zip(*parts))))

    motion = "dolly" if rng.random() < 0.5 else "pan"
    s = np.linspace(0.0, 1.0, SCENE_POSES)
    height = rng.uniform(-0.2, 0.4)
    if motion == "dolly":
        eyes = np.column_stack([np.full(SCENE_POSES, rng.uniform(-0.5, 0.5)), -3.6 + 1.8 * s,
                                np.full(SCENE_POSES, height)])
    else:
        eyes = np.column_stack([-1.6 + 3.2 * s, np.full(SCENE_POSES, -3.2), np.full(SCENE_POSES, height)])
    look = rng.uniform(-0.3, 0.3, 2)
    poses = [look_at(e, e + np.array([look[0], 4.0, look[1]]), fov_deg=cfg.fov_deg, width=cfg.width,
                     height=cfg.height) for e in eyes]
    norm = {"kind": "scene-center", "center": [0.0, 0.0, 0.0], "scale": 1.0, "motion": motion,
            "note": "world origin at the room center; camera positions are measured from it"}
    lo = cloud.means.min(axis=0).tolist()
    hi = cloud.means.max(axis=0).tolist()
    return SyntheticAsset(f"scn_{seed:04d}", "scene", cloud, poses, _render_all(cloud, poses, cfg),
                          (lo, hi), norm, seed)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegeneratePoseError("zero-norm camera position")
    return v / n


def select_views(asset: SyntheticAsset, n_noisy: int, n_novel: int, constraints: ViewConstraints,
                 rng: np.random.Generator, candidates: Sequence[int] | None = None,
                 novel_candidates: Sequence[int] | None = None, max_draws: int = MAX_DRAWS) -> ViewSet:
    """Sample a condition view, noisy views and novel views satisfying the angle limits.

    Each draw picks a condition view, then noisy views among the poses that
    pass the condition-relative limits, then novel views among the poses that
    pass every limit against the chosen views. Draws that run out of
    candidates are rejected; after ``max_draws`` rejections the tightest
    constraint is reported.
    """
    pool = np.asarray(candidates if candidates is not None else range(len(asset.poses)))
    nv_pool = np.asarray(novel_candidates) if novel_candidates is not None else pool
    if len(pool) < 1 + n_noisy or len(np.union1d(pool, nv_pool)) < 1 + n_noisy + n_novel:
        raise ContractError(f"asset {asset.asset_id} has too few poses for {n_noisy}+{n_novel}+1 views")
    pos = _unit(np.array([p.center for p in asset.poses]))
    fwd = _unit(np.array([p.forward for p in asset.poses]))
    slack = 1e-12
    cos_t1 = math.cos(math.radians(constraints.theta1)) - slack
    cos_t2 = math.cos(math.radians(constraints.theta2)) - slack
    cos_p1 = math.cos(math.radians(constraints.phi1)) - slack
    cos_p2 = math.cos(math.radians(constraints.phi2)) - slack
    fails = {"theta1": 0, "theta2": 0, "phi1": 0, "phi2": 0}
    for _ in range(max_draws):
        c = int(rng.choice(pool))
        near_pos = pos[pool] @ pos[c] >= cos_t1
        near_fwd = fwd[pool] @ fwd[c] >= cos_p1
        noisy_pool = pool[near_pos & near_fwd & (pool != c)]
        if len(noisy_pool) < n_noisy:
            fails["theta1" if (near_pos & (pool != c)).sum() < n_noisy else "phi1"] += 1
            continue
        noisy = rng.choice(noisy_pool, size=n_noisy, replace=False)
        free = nv_pool[~np.isin(nv_pool, np.append(noisy, c))]
        ok_fwd = fwd[free] @ fwd[c] >= cos_p2
        ok_pos = np.all(pos[free] @ pos[noisy].T >= cos_t2, axis=1) if n_noisy else np.ones(len(free), bool)
        novel_pool = free[ok_fwd & ok_pos]
        if len(novel_pool) < n_novel:
            fails["theta2" if ok_pos.sum() < n_novel else "phi2"] += 1
            continue
        novel = rng.choice(novel_pool, size=n_novel, replace=False)
        mk = lambda i: View(int(i), asset.poses[int(i)], asset.images[int(i)])  # noqa: E731
        return ViewSet(mk(c), tuple(mk(i) for i in noisy), tuple(mk(i) for i in novel), asset.tag,
                       asset.asset_id)
    tightest = max(fails, key=fails.get)
    raise ConstraintsUnsatisfiableError(
        f"no view assignment for {asset.asset_id} after {max_draws} draws; "
        f"tightest constraint {tightest} ({fails[tightest]} rejections)")


def viewset_stream(assets: Sequence[SyntheticAsset], n_noisy: int, n_novel: int, constraints: ViewConstraints,
                   rng: np.random.Generator, candidates: dict[str, Sequence[int]] | None = None,
                   novel_candidates: dict[str, Sequence[int]] | None = None) -> Iterator[ViewSet]:
    """Endless ViewSets from uniformly chosen assets; pose pools may be restricted per asset id."""
    if not assets:
        return iter(())
    candidates = candidates or {}
    novel_candidates = novel_candidates or {}

    def gen():
        while True:
            a = assets[int(rng.integers(len(assets)))]
            yield select_views(a, n_noisy, n_novel, constraints, rng, candidates=candidates.get(a.asset_id),
                               novel_candidates=novel_candidates.get(a.asset_id))

    return gen()


def mixed_batch(object_stream: Iterator[ViewSet] | None, scene_stream: Iterator[ViewSet] | None,
                object_fraction: float, rng: np.random.Generator, batch_size: int = 1) -> list[tuple[ViewSet, str]]:
    """Draw each element from the object stream with probability ``object_fraction``."""
    if not 0.0 <= object_fraction <= 1.0:
        raise ContractError("object_fraction must lie in [0, 1]")
    if object_fraction > 0 and object_stream is None:
        raise ContractError("object stream required for object_fraction > 0")
    if object_fraction < 1 and scene_stream is None:
        raise ContractError("scene stream required for object_fraction < 1")
    out = []
    for _ in range(batch_size):
        use_obj = rng.random() < object_fraction
        try:
            vs = next(object_stream if use_obj else scene_stream)
        except StopIteration:
            raise ContractError(f"{'object' if use_obj else 'scene'} stream is empty") from None
        out.append((vs, "object" if use_obj else "scene"))
    return out


def save_viewset(vs: ViewSet, path, constraints: ViewConstraints) -> Path:
    """Persist a ViewSet as pose indices into its asset plus the limits it was drawn under."""
    c = constraints
    rec = {"asset_id": vs.asset_id, "tag": vs.tag, "condition": vs.condition.index,
           "noisy": [v.index for v in vs.noisy], "novel": [v.index for v in vs.novel],
           "constraints": {"theta1": c.theta1, "theta2": c.theta2, "phi1": c.phi1, "phi2": c.phi2}}
    path = Path(path)
    path.write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
    return path


def load_viewset(path, asset: SyntheticAsset) -> ViewSet:
    """Rebuild a persisted ViewSet and re-check it against its recorded angle limits."""
    rec = json.loads(Path(path).read_text())
    if rec["asset_id"] != asset.asset_id:
        raise ContractError(f"view set belongs to {rec['asset_id']}, not {asset.asset_id}")
    idx = [rec["condition"], *rec["noisy"], *rec["novel"]]
    if len(set(idx)) != len(idx) or not all(0 <= i < len(asset.poses) for i in idx):
        raise ContractError(f"view set indices {idx} are not distinct valid poses of {asset.asset_id}")
    mk = lambda i: View(int(i), asset.poses[int(i)], asset.images[int(i)])  # noqa: E731
    vs = ViewSet(mk(rec["condition"]), tuple(mk(i) for i in rec["noisy"]), tuple(mk(i) for i in rec["novel"]),
                 rec["tag"], asset.asset_id)
    rep = check_view_constraints(vs.condition.pose, [v.pose for v in vs.noisy], [v.pose for v in vs.novel],
                                 ViewConstraints(**rec["constraints"]))
    if not rep.passed:
        raise ConstraintsUnsatisfiableError(f"stored view set fails its constraints: {'; '.join(rep.failures)}")
    return vs


# ---- manifest --------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    config: DataConfig
    assets: list[dict]

    def to_json(self) -> dict:
        return {"version": 1, "config": self.config.to_json(), "assets": self.assets}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    def write(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(self.dumps())
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        man = cls(path.parent, DataConfig.from_json(d["config"]), d["assets"])
        man.validate()
        return man

    def validate(self) -> None:
        for rec in self.assets:
            if "normalization" not in rec:
                raise ContractError(f"asset {rec.get('id')} has no normalization record")
            for rel in rec["poses"] + rec["images"] + [rec["cloud"]]:
                if not (self.root / rel).exists():
                    raise ContractError(f"manifest references missing file {rel}")


def _asset_record(asset: SyntheticAsset) -> dict:
    d = asset.asset_id
    return {
        "id": d,
        "profile": asset.tag,
        "seed": asset.seed,
        "cloud": f"{d}/cloud.ply",
        "poses": [f"{d}/pose_{i:03d}.json" for i in range(len(asset.poses))],
        "images": [f"{d}/img_{i:03d}.png" for i in range(len(asset.images))],
        "bounds": [list(map(float, asset.bounds[0])), list(map(float, asset.bounds[1]))],
        "normalization": asset.normalization,
    }


def write_dataset(root, assets: Sequence[SyntheticAsset], cfg: DataConfig = DataConfig()) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for a in assets:
        rec = _asset_record(a)
        adir = root / a.asset_id
        adir.mkdir(exist_ok=True)
        export_ply(a.cloud, root / rec["cloud"])
        for pose, img, prel, irel in zip(a.poses, a.images, rec["poses"], rec["images"]):
            pose.save(root / prel)
            write_png(root / irel, img)
        (adir / "meta.json").write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
        records.append(rec)
    man = DatasetManifest(root, cfg, records)
    man.write()
    return man


def load_dataset(manifest: DatasetManifest | str | Path) -> list[SyntheticAsset]:
    man = manifest if isinstance(manifest, DatasetManifest) else DatasetManifest.read(manifest)
    assets = []
    for rec in man.assets:
        poses = [CameraPose.load(man.root / p) for p in rec["poses"]]
        images = [read_png(man.root / p) for p in rec["images"]]
        cloud = import_ply(man.root / rec["cloud"])
        assets.append(SyntheticAsset(rec["id"], rec["profile"], cloud, poses, images,
                                     (rec["bounds"][0], rec["bounds"][1]), rec["normalization"], rec.get("seed")))
    return assets
