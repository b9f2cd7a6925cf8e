"""Losses, learning-rate schedule, Adam, the training loop, checkpoints and evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as te
from .camera import ViewConstraints
from .data import SyntheticAsset, ViewSet, mixed_batch, select_views, viewset_stream
from .denoiser import Denoiser, DenoiserConfig, render_tensor
from .diffusion import NoiseSchedule, SamplerConfig, q_sample, sample, to_diffusion_space
from .errors import ContractError, InvalidInputError, NonFiniteLossError
from .metrics import psnr, ssim
from .raster import RenderConfig, render
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("mixed", "finetune-object", "finetune-scene")
PD_EPS = 1e-8
# training renders use small tiles: splats are a pixel or two wide
TRAIN_RENDER = RenderConfig(tile_size=8)


# ---- losses -----------------------------------------------------------------


def _check_pair(rendered: Tensor, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt)
    if tuple(rendered.shape) != gt.shape:
        raise ContractError(f"rendered shape {tuple(rendered.shape)} != ground truth shape {gt.shape}")
    return gt.astype(rendered.dtype)


def gradient_proxy(rendered, gt) -> Tensor:
    """Mean absolute difference of horizontal and vertical finite-difference images."""
    rendered = te._wrap(rendered)
    gt = _check_pair(rendered, gt)
    dx = (rendered[..., :, 1:, :] - rendered[..., :, :-1, :]) - (gt[..., :, 1:, :] - gt[..., :, :-1, :])
    dy = (rendered[..., 1:, :, :] - rendered[..., :-1, :, :]) - (gt[..., 1:, :, :] - gt[..., :-1, :, :])
    total = te.abs_(dx).sum() + te.abs_(dy).sum()
    return total * (1.0 / (dx.data.size + dy.data.size))


def mse(rendered, gt) -> Tensor:
    rendered = te._wrap(rendered)
    diff = rendered - _check_pair(rendered, gt)
    return (diff * diff).mean()


def loss_denoise(rendered, gt, lam: float) -> Tensor:
    """L2 plus ``lam`` times the image-gradient proxy over the denoised views."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    out = mse(rendered, gt)
    return out + gradient_proxy(rendered, gt) * lam if lam > 0 else out


def loss_novel(rendered, gt, lam: float) -> Tensor:
    """Same objective as :func:`loss_denoise`, evaluated at the novel poses."""
    return loss_denoise(rendered, gt, lam)


def loss_point_distribution(depth, origins: np.ndarray, sigma0: float = 0.5, eps: float = PD_EPS) -> Tensor:
    """Mean of ``l - target`` with the standardized target held constant.

    ``depth`` holds each primitive's distance along its unit ray; ``origins``
    the matching ray origins.
    """
    depth = te._wrap(depth)
    l = depth.data.astype(np.float64).reshape(-1)
    if l.size == 0:
        raise ContractError("point-distribution loss needs a nonempty cloud")
    o_norm = np.linalg.norm(np.asarray(origins, dtype=np.float64).reshape(-1, 3), axis=1)
    if o_norm.size != l.size:
        raise ContractError(f"{l.size} depths but {o_norm.size} ray origins")
    if l.size == 1:
        log.warning("point-distribution loss on a single primitive: spread term dropped")
        target = np.full(1, o_norm.mean())
    else:
        target = (l - l.mean()) / math.sqrt(l.var() + eps) * sigma0 + o_norm.mean()
    return (depth.reshape(-1) - target.astype(depth.dtype)).mean()


def loss_gates(iteration: int, tag: str, iter_0: int) -> tuple[bool, bool]:
    """(render losses on, point-distribution loss on) for an iteration and profile."""
    if iteration < 1:
        raise ContractError("iterations are numbered from 1")
    if tag not in ("object", "scene"):
        raise ContractError(f"unknown profile tag {tag!r}")
    return iteration > iter_0, iteration <= iter_0 and tag == "object"


def total_loss(l_de, l_nv, l_pd, iteration: int, tag: str, iter_0: int):
    """Gated sum; terms whose indicator is off are ignored and may be None."""
    use_render, use_pd = loss_gates(iteration, tag, iter_0)
    out = 0.0
    if use_render:
        out = l_de + l_nv
    if use_pd:
        out = out + l_pd
    return out


# ---- optimization -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 4e-4
    warmup_iters: int = 2000
    total_iters: int = 5000
    lam: float = 0.5
    iter_0: int = 500
    sigma0: float = 0.5
    batch_size: int = 1
    seed: int = 0
    object_fraction: float = 0.5
    mode: str = "mixed"
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ContractError("need 0 <= warmup_iters < total_iters")
        if self.lam < 0 or self.sigma0 <= 0 or self.lr_peak <= 0:
            raise ContractError("need lam >= 0, sigma0 > 0 and lr_peak > 0")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.iter_0 < 0 or self.checkpoint_every < 0:
            raise ContractError("batch_size >= 1, iter_0 >= 0 and checkpoint_every >= 0 required")
        if not 0.0 <= self.object_fraction <= 1.0:
            raise ContractError("object_fraction must lie in [0, 1]")

    @property
    def effective_object_fraction(self) -> float:
        return {"mixed": self.object_fraction, "finetune-object": 1.0, "finetune-scene": 0.0}[self.mode]

    def to_json(self) -> dict:
        return asdict(self)


def learning_rate(iteration: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to the peak, then cosine annealing to 0 at total_iters."""
    if iteration <= cfg.warmup_iters:
        return cfg.lr_peak * iteration / cfg.warmup_iters if cfg.warmup_iters else cfg.lr_peak
    frac = min(1.0, (iteration - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters))
    return 0.5 * cfg.lr_peak * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# ---- training ---------------------------------------------------------------


def config_hash(*parts: dict) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class StepRecord:
    iteration: int
    loss: float
    lr: float
    tags: list[str]
    skipped: bool
    components: dict[str, float] = field(default_factory=dict)


class Trainer:
    """Owns the model, optimizer state and assets; ``step`` runs one iteration.

    All randomness of iteration ``i`` comes from ``default_rng([seed, i])``,
    so resuming from a checkpoint replays the same trajectory.
    """

    def __init__(self, assets: Sequence[SyntheticAsset], cfg: TrainConfig = TrainConfig(),
                 model_cfg: DenoiserConfig = DenoiserConfig(), render_cfg: RenderConfig = TRAIN_RENDER,
                 constraints: ViewConstraints = ViewConstraints(), schedule: NoiseSchedule | None = None,
                 candidates: dict[str, Sequence[int]] | None = None,
                 novel_candidates: dict[str, Sequence[int]] | None = None, model: Denoiser | None = None):
        self.cfg = cfg
        self.render_cfg = render_cfg
        self.constraints = constraints
        self.schedule = schedule or NoiseSchedule.cosine()
        self.objects = [a for a in assets if a.tag == "object"]
        self.scenes = [a for a in assets if a.tag == "scene"]
        frac = cfg.effective_object_fraction
        if frac > 0 and not self.objects:
            raise ContractError("training needs object assets for this mode")
        if frac < 1 and not self.scenes:
            raise ContractError("training needs scene assets for this mode")
        self.candidates = candidates or {}
        self.novel_candidates = novel_candidates or {}
        self.model = model or Denoiser(model_cfg, seed=cfg.seed)
        for tag, mode in (("scene", "finetune-object"), ("object", "finetune-scene")):
            if cfg.mode == mode and tag in self.model.heads:
                self.model.drop_head(tag)
        self.optim = Adam(self.model.params)
        self.iteration = 0
        self.history: list[StepRecord] = []

    @property
    def model_cfg(self) -> DenoiserConfig:
        return self.model.cfg

    def config_hash(self) -> str:
        return config_hash(self.cfg.to_json(), self.model_cfg.to_json(), asdict(self.render_cfg))

    def draw_batch(self, rng: np.random.Generator) -> list[tuple[ViewSet, str]]:
        mc = self.model_cfg
        streams = [viewset_stream(group, mc.num_views, mc.num_novel, self.constraints, rng, self.candidates,
                                  self.novel_candidates) if group else None
                   for group in (self.objects, self.scenes)]
        return mixed_batch(streams[0], streams[1], self.cfg.effective_object_fraction, rng, self.cfg.batch_size)

    def _sample_loss(self, vs: ViewSet, tag: str, iteration: int, rng: np.random.Generator):
        cfg = self.cfg
        use_render, use_pd = loss_gates(iteration, tag, cfg.iter_0)
        t = int(rng.integers(1, self.schedule.T + 1))
        gt_noisy = np.stack([v.image for v in vs.noisy])
        eps = rng.standard_normal(gt_noisy.shape)
        if not (use_render or use_pd):
            return None, {}
        x_t = q_sample(to_diffusion_space(gt_noisy), t, eps, self.schedule)
        noisy_poses = [v.pose for v in vs.noisy]
        views, origins, dirs = self.model.prepare(to_diffusion_space(vs.condition.image), vs.condition.pose,
                                                  x_t, noisy_poses)
        out = self.model.forward_tensors(views[None], origins[None], dirs[None], [t], tag)
        parts = {k: v[0] for k, v in out.items()}
        comps = {}
        l_de = l_nv = l_pd = None
        if use_pd:
            l_pd = loss_point_distribution(parts["depth"], origins, cfg.sigma0)
            comps["pd"] = float(l_pd.data)
        if use_render:
            den = te.concat([render_tensor(parts, p, self.render_cfg)[None] for p in noisy_poses], axis=0)
            nov = te.concat([render_tensor(parts, v.pose, self.render_cfg)[None] for v in vs.novel], axis=0)
            l_de = loss_denoise(den, gt_noisy, cfg.lam)
            l_nv = loss_novel(nov, np.stack([v.image for v in vs.novel]), cfg.lam)
            comps["de"] = float(l_de.data)
            comps["nv"] = float(l_nv.data)
        return total_loss(l_de, l_nv, l_pd, iteration, tag, cfg.iter_0), comps

    def step(self) -> StepRecord:
        it = self.iteration + 1
        rng = np.random.default_rng([self.cfg.seed, it])
        batch = self.draw_batch(rng)
        lr = learning_rate(it, self.cfg)
        self.model.zero_grad()
        comps: dict[str, float] = {}
        with te.Tape() as tape:
            terms = []
            for vs, tag in batch:
                try:
                    loss, c = self._sample_loss(vs, tag, it, rng)
                except InvalidInputError as exc:
                    raise NonFiniteLossError(f"iteration {it}: {exc}") from exc
                for k, v in c.items():
                    comps[k] = comps.get(k, 0.0) + v / len(batch)
                if loss is not None:
                    terms.append(loss)
            if not terms:
                rec = StepRecord(it, 0.0, lr, [t for _, t in batch], True)
            else:
                total = terms[0]
                for term in terms[1:]:
                    total = total + term
                total = total * (1.0 / len(batch))
                value = float(total.data)
                if not math.isfinite(value):
                    raise NonFiniteLossError(f"non-finite loss {value} at iteration {it}")
                tape.backward(total)
                self.optim.step(lr)
                rec = StepRecord(it, value, lr, [t for _, t in batch], False, comps)
        self.iteration = it
        self.history.append(rec)
        return rec

    def run(self, until: int | None = None, checkpoint_dir=None, log_every: int = 100) -> list[StepRecord]:
        until = self.cfg.total_iters if until is None else min(until, self.cfg.total_iters)
        out = []
        while self.iteration < until:
            try:
                rec = self.step()
            except NonFiniteLossError:
                # the failed step made no update, so the current state is the last good one
                if checkpoint_dir is not None:
                    path = self.save(Path(checkpoint_dir) / "last_good.bin")
                    log.error("non-finite loss after iteration %d; state kept in %s", self.iteration, path)
                raise
            out.append(rec)
            if log_every and rec.iteration % log_every == 0:
                log.info("iter %d loss %.5f lr %.2e %s", rec.iteration, rec.loss, rec.lr, rec.components)
            every = self.cfg.checkpoint_every
            if checkpoint_dir is not None and every and rec.iteration % every == 0:
                self.save(Path(checkpoint_dir) / f"ckpt_{rec.iteration:06d}.bin")
        if checkpoint_dir is not None:
            self.save(Path(checkpoint_dir) / "last.bin")
        return out

    # ---- checkpoints ----

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {f"param.{k}": v.data for k, v in self.model.params.items()}
        tensors.update({f"adam.m.{k}": v for k, v in self.optim.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in self.optim.v.items()})
        header = {"kind": "trainer", "iteration": self.iteration, "adam_step": self.optim.step_count,
                  "config_hash": self.config_hash(), "train": self.cfg.to_json(),
                  "denoiser": self.model_cfg.to_json(), "render": _render_json(self.render_cfg),
                  "heads": list(self.model.heads)}
        te.save_tensors(path, tensors, header)
        return path

    @classmethod
    def resume(cls, path, assets: Sequence[SyntheticAsset], **kwargs) -> "Trainer":
        tensors, header = te.load_tensors(path)
        cfg = TrainConfig(**header["train"])
        model = load_model(path)
        trainer = cls(assets, cfg, model.cfg, _render_from_json(header["render"]), model=model, **kwargs)
        if trainer.config_hash() != header["config_hash"]:
            raise ContractError("checkpoint config hash does not match its configuration")
        trainer.optim.m = {k: tensors[f"adam.m.{k}"] for k in model.params}
        trainer.optim.v = {k: tensors[f"adam.v.{k}"] for k in model.params}
        trainer.optim.step_count = int(header["adam_step"])
        trainer.iteration = int(header["iteration"])
        return trainer


def _render_json(rc: RenderConfig) -> dict:
    d = asdict(rc)
    d["background"] = list(rc.background)
    return d


def _render_from_json(d: dict) -> RenderConfig:
    d = dict(d)
    d["background"] = tuple(d["background"])
    return RenderConfig(**d)


def save_model(model: Denoiser, path, extra: dict | None = None) -> Path:
    header = {"kind": "model", "denoiser": model.cfg.to_json(), "heads": list(model.heads), **(extra or {})}
    te.save_tensors(path, {f"param.{k}": v.data for k, v in model.params.items()}, header)
    return Path(path)


def load_model(path) -> Denoiser:
    tensors, header = te.load_tensors(path)
    model = Denoiser(DenoiserConfig.from_json(header["denoiser"]))
    model.load_state_dict({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    return model


# ---- evaluation -------------------------------------------------------------


def evaluation_viewset(asset: SyntheticAsset, model_cfg: DenoiserConfig, constraints: ViewConstraints,
                       seed: int, index: int) -> ViewSet:
    rng = np.random.default_rng([seed, index])
    return select_views(asset, model_cfg.num_views, model_cfg.num_novel, constraints, rng)


def evaluate_viewset(model: Denoiser, vs: ViewSet, schedule: NoiseSchedule, sampler_cfg: SamplerConfig,
                     render_cfg: RenderConfig = RenderConfig()) -> dict:
    """Sample from the condition view and score the novel and supervised (noisy) views."""
    res = sample(vs.condition.image, vs.condition.pose, [v.pose for v in vs.noisy], model, schedule,
                 sampler_cfg, tag=vs.tag, render_cfg=render_cfg)
    novel = [render(res.cloud, v.pose, render_cfg).image for v in vs.novel]
    noisy = [render(res.cloud, v.pose, render_cfg).image for v in vs.noisy]
    nv_psnr = [psnr(r, v.image) for r, v in zip(novel, vs.novel)]
    nv_ssim = [ssim(r, v.image) for r, v in zip(novel, vs.novel)]
    sup_psnr = [psnr(r, v.image) for r, v in zip(noisy, vs.noisy)]
    return {"id": vs.asset_id, "profile": vs.tag, "views": vs.indices,
            "psnr": float(np.mean(nv_psnr)), "ssim": float(np.mean(nv_ssim)),
            "psnr_per_view": nv_psnr, "ssim_per_view": nv_ssim,
            "supervised_psnr": float(np.mean(sup_psnr)), "denoiser_calls": res.denoiser_calls,
            "_cloud": res.cloud, "_novel": novel}


def evaluate(model: Denoiser, assets: Sequence[SyntheticAsset], schedule: NoiseSchedule | None = None,
             sampler_cfg: SamplerConfig = SamplerConfig(), render_cfg: RenderConfig = RenderConfig(),
             constraints: ViewConstraints = ViewConstraints(), seed: int = 0) -> dict:
    """Metrics report: per-asset PSNR/SSIM on novel views plus the aggregate means."""
    schedule = schedule or NoiseSchedule.cosine()
    per_asset = []
    for i, asset in enumerate(assets):
        if asset.tag not in model.heads:
            raise ContractError(f"model has no {asset.tag} head for asset {asset.asset_id}")
        vs = evaluation_viewset(asset, model.cfg, constraints, seed, i)
        rec = evaluate_viewset(model, vs, schedule, replace(sampler_cfg, seed=sampler_cfg.seed + i), render_cfg)
        per_asset.append({k: v for k, v in rec.items() if not k.startswith("_")})
    agg = {"psnr": float(np.mean([r["psnr"] for r in per_asset])) if per_asset else float("nan"),
           "ssim": float(np.mean([r["ssim"] for r in per_asset])) if per_asset else float("nan"),
           "assets": len(per_asset)}
    return {"assets": per_asset, "aggregate": agg,
            "sampler": {"num_steps": sampler_cfg.num_steps, "eta": sampler_cfg.eta, "seed": sampler_cfg.seed}}
