"""Noise schedule, forward noising, x0-prediction updates and strided sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .raster import RenderConfig, render

log = logging.getLogger(__name__)

__all__ = ["NoiseSchedule", "SamplerConfig", "q_sample", "ancestral_update", "sampling_timesteps",
           "to_diffusion_space", "from_diffusion_space", "SampleResult", "run_sampler", "sample"]


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray  # (T + 1,), index t

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008, lo: float = 1e-5, hi: float = 1.0 - 1e-5) -> "NoiseSchedule":
        """Cosine schedule squashed affinely into [lo, hi] for t >= 1; alpha_bar[0] = 1.

        The affine squash keeps the table strictly decreasing where a hard clamp
        would flatten the tail.
        """
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        raw = f / f[0]
        ab = lo + (hi - lo) * raw
        ab[0] = 1.0
        return cls(ab)

    def check(self) -> None:
        ab = self.alpha_bar
        if ab[0] < 1 - 1e-4 or ab[-1] > 1e-3 or np.any(np.diff(ab) >= 0) or np.any(ab <= 0):
            raise ContractError("noise schedule violates its invariants")

    def __getitem__(self, t: int) -> float:
        return float(self.alpha_bar[t])


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ContractError("num_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError("eta must lie in [0, 1]")


def _check_t(schedule: NoiseSchedule, t: int) -> None:
    if not 0 <= t <= schedule.T:
        raise ContractError(f"timestep {t} outside [0, {schedule.T}]")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    _check_t(schedule, t)
    if np.shape(eps) != np.shape(x0):
        raise ContractError(f"noise shape {np.shape(eps)} != data shape {np.shape(x0)}")
    ab = schedule[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ancestral_update(x0_hat: np.ndarray, t: int, t_prev: int, eps: np.ndarray | None,
                     schedule: NoiseSchedule) -> np.ndarray:
    """Re-noise a clean prediction to level ``t_prev``; ``eps=None`` means no noise."""
    _check_t(schedule, t)
    _check_t(schedule, t_prev)
    if not t_prev < t:
        raise ContractError(f"t_prev={t_prev} must be smaller than t={t}")
    ab = schedule[t_prev]
    out = math.sqrt(ab) * x0_hat
    if eps is not None:
        out = out + math.sqrt(1.0 - ab) * eps
    return out


def sampling_timesteps(num_steps: int, T: int) -> list[int]:
    """Uniformly spaced decreasing timesteps from T down to 0 (num_steps + 1 values)."""
    if not 1 <= num_steps <= T:
        raise ContractError(f"num_steps must lie in [1, {T}], got {num_steps}")
    ts = np.round(np.linspace(T, 0, num_steps + 1)).astype(int)
    return [int(v) for v in ts]


def to_diffusion_space(images: np.ndarray) -> np.ndarray:
    return images * 2.0 - 1.0


def from_diffusion_space(x: np.ndarray) -> np.ndarray:
    return (x + 1.0) * 0.5


@dataclass
class SampleResult:
    cloud: object
    views: np.ndarray  # final denoised noisy-view renders in [0, 1], (N, H, W, 3)
    trajectory: list[np.ndarray]
    timesteps: list[int]
    denoiser_calls: int


def run_sampler(predict: Callable[[np.ndarray, int], tuple[object, np.ndarray]], shape: Sequence[int],
                schedule: NoiseSchedule, cfg: SamplerConfig, keep_trajectory: bool = False) -> SampleResult:
    """Generic x0-prediction sampling loop.

    ``predict(x_t, t)`` takes noisy views in diffusion space and returns
    ``(cloud, x0_hat)`` with ``x0_hat`` in diffusion space.
    """
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal(tuple(shape))
    ts = sampling_timesteps(cfg.num_steps, schedule.T)
    traj = [x.copy()] if keep_trajectory else []
    cloud = None
    x0_hat = None
    calls = 0
    for t, t_prev in zip(ts[:-1], ts[1:]):
        cloud, x0_hat = predict(x, t)
        calls += 1
        eps = cfg.eta * rng.standard_normal(x.shape) if cfg.eta > 0 else None
        x = ancestral_update(x0_hat, t, t_prev, eps, schedule)
        if keep_trajectory:
            traj.append(x.copy())
        log.debug("sampling step t=%d -> %d", t, t_prev)
    return SampleResult(cloud, from_diffusion_space(x0_hat), traj, ts, calls)


def sample(cond_image: np.ndarray, cond_pose, noisy_poses: Sequence, denoiser, schedule: NoiseSchedule,
           cfg: SamplerConfig, tag: str = "object", render_cfg=None, keep_trajectory: bool = False) -> SampleResult:
    """Generate Gaussians from one clean posed image.

    ``cond_image`` is in [0, 1]. Each step runs the denoiser, renders its
    cloud at the noisy-view poses and re-noises that render.
    """
    rc = render_cfg or RenderConfig()
    cond = to_diffusion_space(np.asarray(cond_image, dtype=np.float64))
    h, w = cond.shape[:2]

    def predict(x_t, t):
        cloud = denoiser.forward(cond, cond_pose, x_t, noisy_poses, t, tag)
        views = np.stack([render(cloud, p, rc).image for p in noisy_poses])
        return cloud, to_diffusion_space(views)

    return run_sampler(predict, (len(noisy_poses), h, w, 3), schedule, cfg, keep_trajectory)
