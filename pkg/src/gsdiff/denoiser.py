"""Multi-view transformer that maps posed images to pixel-aligned Gaussians.

Images (condition view plus N noisy views) are concatenated with their ray
embeddings, patchified, run through adaLN-Zero transformer blocks conditioned
on the timestep and decoded by an object or scene head into raw Gaussian
parameter maps.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as te
from .camera import CameraPose, generate_rays, rppc_embed
from .errors import ContractError
from .gaussians import ChannelLayout, GaussianCloud, GaussianParamMap, lift_tensors, profile_for
from .raster import RenderConfig, render, render_backward
from .tensor import Tensor

__all__ = ["DenoiserConfig", "Denoiser", "patchify_array", "unpatchify", "timestep_features", "ray_inputs",
           "render_tensor", "HEAD_TAGS"]

HEAD_TAGS = ("object", "scene")

# raw-channel bias at init: unit quaternion, small splats, mostly transparent
_HEAD_BIAS = {
    "object": {"depth": 0.0, "log_scale": math.log(0.03), "opacity": -2.0},
    "scene": {"depth": 4.6, "log_scale": math.log(0.1), "opacity": -2.0},
}


@dataclass(frozen=True)
class DenoiserConfig:
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    patch_size: int = 4
    height: int = 32
    width: int = 32
    in_channels: int = 9
    num_views: int = 3  # noisy views; the condition view is extra
    num_novel: int = 4
    extra_channels: int = 0
    mlp_ratio: int = 4
    heads_enabled: tuple[str, ...] = HEAD_TAGS

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ContractError(f"image {self.height}x{self.width} not divisible by patch size {self.patch_size}")
        if self.in_channels != 9:
            raise ContractError("inputs are RGB plus a 6-channel ray embedding")
        if min(self.depth, self.num_views, self.heads) < 1:
            raise ContractError("depth, heads and num_views must be positive")
        unknown = set(self.heads_enabled) - set(HEAD_TAGS)
        if unknown:
            raise ContractError(f"unknown decoder heads {sorted(unknown)}")

    @property
    def layout(self) -> ChannelLayout:
        return ChannelLayout(self.extra_channels)

    @property
    def gaussian_channels(self) -> int:
        return self.layout.channels

    @property
    def patches_per_view(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def tokens(self) -> int:
        return (self.num_views + 1) * self.patches_per_view

    def to_json(self) -> dict:
        d = asdict(self)
        d["heads_enabled"] = list(self.heads_enabled)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        if "heads_enabled" in d:
            d["heads_enabled"] = tuple(d["heads_enabled"])
        return cls(**d)


def patchify_array(x, p: int):
    """(B, V, H, W, C) -> (B, V * H/p * W/p, p*p*C), patches in row-major order."""
    x = te._wrap(x)
    b, v, h, w, c = x.shape
    if h % p or w % p:
        raise ContractError(f"image {h}x{w} not divisible by patch size {p}")
    y = x.reshape(b, v, h // p, p, w // p, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
    return y.reshape(b, v * (h // p) * (w // p), p * p * c)


def unpatchify(tokens, views: int, height: int, width: int, p: int):
    """Inverse of :func:`patchify_array`: (B, S, p*p*C) -> (B, V, H, W, C)."""
    tokens = te._wrap(tokens)
    b, s, k = tokens.shape
    gh, gw = height // p, width // p
    if s != views * gh * gw or k % (p * p):
        raise ContractError(f"cannot unpatchify tokens {tokens.shape} into {views}x{height}x{width}")
    c = k // (p * p)
    y = tokens.reshape(b, views, gh, gw, p, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
    return y.reshape(b, views, height, width, c)


def timestep_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features (B, dim) of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((len(t), 1))], axis=1)
    return feats


def ray_inputs(images: np.ndarray, poses: Sequence[CameraPose]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack (V, H, W, 3) images with RPPC embeddings -> (V, H, W, 9), plus ray origins and directions."""
    grids = [generate_rays(p) for p in poses]
    emb = np.stack([rppc_embed(g).values for g in grids])
    origins = np.stack([g.origins for g in grids])
    dirs = np.stack([g.directions for g in grids])
    return np.concatenate([np.asarray(images, dtype=np.float64), emb], axis=-1), origins, dirs


def render_tensor(parts: dict[str, Tensor], pose: CameraPose, cfg: RenderConfig) -> Tensor:
    """Differentiable render of flattened Gaussian tensors; returns an (H, W, 3) image tensor."""
    keys = ("means", "quats", "scales", "opacities", "colors")
    cloud = GaussianCloud(*(parts[k].data for k in keys))
    out = render(cloud, pose, cfg)
    dtype = parts["means"].dtype

    def backward(g):
        grads = render_backward(out, g)
        return tuple(getattr(grads, k).astype(dtype) for k in keys)

    return te.custom_op([parts[k] for k in keys], out.image.astype(dtype), backward)


class Denoiser:
    """Parameters live in ``self.params`` (name -> Tensor); every forward builds a fresh graph."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # ---- parameters --------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.cfg
        d = c.embed_dim
        k_in = c.patch_size ** 2 * c.in_channels

        def dense(n_in, n_out, gain=1.0):
            return rng.standard_normal((n_in, n_out)) * gain / math.sqrt(n_in)

        self._add("patch.w", dense(k_in, d))
        self._add("patch.b", np.zeros(d))
        self._add("pos", rng.standard_normal((c.tokens, d)) * 0.02)
        self._add("slot", rng.standard_normal((2, d)) * 0.02)
        self._add("time.w1", dense(d, d))
        self._add("time.b1", np.zeros(d))
        self._add("time.w2", dense(d, d))
        self._add("time.b2", np.zeros(d))
        for i in range(c.depth):
            pre = f"block{i}."
            self._add(pre + "ada.w", np.zeros((d, 6 * d)))
            self._add(pre + "ada.b", np.zeros(6 * d))
            self._add(pre + "qkv.w", dense(d, 3 * d))
            self._add(pre + "qkv.b", np.zeros(3 * d))
            self._add(pre + "proj.w", dense(d, d))
            self._add(pre + "proj.b", np.zeros(d))
            self._add(pre + "mlp.w1", dense(d, c.mlp_ratio * d))
            self._add(pre + "mlp.b1", np.zeros(c.mlp_ratio * d))
            self._add(pre + "mlp.w2", dense(c.mlp_ratio * d, d))
            self._add(pre + "mlp.b2", np.zeros(d))
        k_out = c.patch_size ** 2 * c.gaussian_channels
        for tag in c.heads_enabled:
            pre = f"head.{tag}."
            self._add(pre + "ada.w", np.zeros((d, 2 * d)))
            self._add(pre + "ada.b", np.zeros(2 * d))
            self._add(pre + "w", dense(d, k_out, gain=0.01))
            self._add(pre + "b", np.tile(self._channel_bias(tag), c.patch_size ** 2))

    def _channel_bias(self, tag: str) -> np.ndarray:
        lay = self.cfg.layout
        bias = np.zeros(lay.channels)
        init = _HEAD_BIAS[tag]
        bias[lay.depth] = init["depth"]
        bias[lay.quat.start] = 1.0
        bias[lay.scale] = init["log_scale"]
        bias[lay.opacity] = init["opacity"]
        return bias

    @property
    def heads(self) -> tuple[str, ...]:
        return tuple(t for t in HEAD_TAGS if f"head.{t}.w" in self.params)

    def drop_head(self, tag: str) -> None:
        """Remove a decoder head (single-domain fine-tuning)."""
        if tag not in self.heads:
            raise ContractError(f"no decoder head {tag!r} to drop")
        for name in [n for n in self.params if n.startswith(f"head.{tag}.")]:
            del self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        # a checkpoint lacking a whole head was saved after drop_head
        for tag in HEAD_TAGS:
            names = {n for n in self.params if n.startswith(f"head.{tag}.")}
            if names and names <= missing:
                for n in names:
                    del self.params[n]
                missing -= names
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ContractError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=self.dtype).copy()

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.cfg.to_json(), sort_keys=True).encode())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # ---- network -----------------------------------------------------------

    def time_embedding(self, t) -> Tensor:
        p = self.params
        feats = Tensor(timestep_features(t, self.cfg.embed_dim).astype(self.dtype))
        h = te.silu(te.linear(feats, p["time.w1"], p["time.b1"]))
        return te.linear(h, p["time.w2"], p["time.b2"])

    def patchify(self, views) -> Tensor:
        """(B, N+1, H, W, 9) -> tokens (B, (N+1)*P, D); view 0 is the condition view."""
        c = self.cfg
        views = te._wrap(views)
        if views.ndim != 5 or views.shape[1:] != (c.num_views + 1, c.height, c.width, c.in_channels):
            raise ContractError(f"views shape {views.shape} does not match config "
                                f"(B, {c.num_views + 1}, {c.height}, {c.width}, {c.in_channels})")
        p = self.params
        tok = te.linear(patchify_array(views, c.patch_size), p["patch.w"], p["patch.b"]) + p["pos"]
        slot_ids = np.repeat(np.minimum(np.arange(c.num_views + 1), 1), c.patches_per_view)
        return tok + p["slot"][slot_ids]

    @staticmethod
    def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        return te.layer_norm(x) * (scale + 1.0) + shift

    def _attention(self, x: Tensor, pre: str) -> Tensor:
        c = self.cfg
        p = self.params
        b, s, d = x.shape
        dh = d // c.heads
        qkv = te.linear(x, p[pre + "qkv.w"], p[pre + "qkv.b"]).reshape(b, s, 3, c.heads, dh)
        qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, heads, S, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = te.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        return te.linear(out, p[pre + "proj.w"], p[pre + "proj.b"])

    def transformer_block(self, i: int, x: Tensor, temb: Tensor) -> Tensor:
        p = self.params
        pre = f"block{i}."
        d = self.cfg.embed_dim
        mod = te.linear(te.silu(temb), p[pre + "ada.w"], p[pre + "ada.b"])[:, None, :]
        sh1, sc1, g1 = mod[..., 0:d], mod[..., d:2 * d], mod[..., 2 * d:3 * d]
        sh2, sc2, g2 = mod[..., 3 * d:4 * d], mod[..., 4 * d:5 * d], mod[..., 5 * d:]
        x = x + g1 * self._attention(self._modulate(x, sh1, sc1), pre)
        h = te.gelu(te.linear(self._modulate(x, sh2, sc2), p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
        return x + g2 * te.linear(h, p[pre + "mlp.w2"], p[pre + "mlp.b2"])

    def backbone(self, views, t) -> tuple[Tensor, Tensor]:
        temb = self.time_embedding(t)
        x = self.patchify(views)
        for i in range(self.cfg.depth):
            x = self.transformer_block(i, x, temb)
        return x, temb

    def decode(self, tokens: Tensor, temb: Tensor, tag: str) -> Tensor:
        """Raw Gaussian channels (B, N+1, H, W, C_g) from the selected head."""
        if tag not in HEAD_TAGS:
            raise ContractError(f"unknown profile tag {tag!r}")
        if tag not in self.heads:
            raise ContractError(f"decoder head {tag!r} is not present (dropped for fine-tuning)")
        c = self.cfg
        p = self.params
        pre = f"head.{tag}."
        d = c.embed_dim
        mod = te.linear(te.silu(temb), p[pre + "ada.w"], p[pre + "ada.b"])[:, None, :]
        h = self._modulate(tokens, mod[..., :d], mod[..., d:])
        out = te.linear(h, p[pre + "w"], p[pre + "b"])
        return unpatchify(out, c.num_views + 1, c.height, c.width, c.patch_size)

    def decode_gaussians(self, tokens: Tensor, temb: Tensor, tag: str) -> list[list[GaussianParamMap]]:
        raw = self.decode(tokens, temb, tag).data
        return [[GaussianParamMap(v, self.cfg.layout) for v in sample] for sample in raw]

    def forward_tensors(self, views, origins: np.ndarray, dirs: np.ndarray, t, tag: str) -> dict[str, Tensor]:
        """Differentiable pipeline; Gaussian fields come back flattened to (B, (N+1)*H*W, ...)."""
        tokens, temb = self.backbone(views, t)
        raw = self.decode(tokens, temb, tag)
        lifted = lift_tensors(raw, origins, dirs, profile_for(tag), self.cfg.layout)
        b = raw.shape[0]
        n = raw.shape[1] * raw.shape[2] * raw.shape[3]
        return {k: v.reshape(b, n, *v.shape[4:]) for k, v in lifted.items()}

    def forward(self, cond_image: np.ndarray, cond_pose: CameraPose, noisy: np.ndarray,
                noisy_poses: Sequence[CameraPose], t: int, tag: str) -> GaussianCloud:
        """One sample: condition image and noisy views in diffusion space ([-1, 1])."""
        views, origins, dirs = self.prepare(cond_image, cond_pose, noisy, noisy_poses)
        out = self.forward_tensors(views[None], origins[None], dirs[None], [t], tag)
        return GaussianCloud(*(out[k].data[0].astype(np.float64)
                               for k in ("means", "quats", "scales", "opacities", "colors")))

    def prepare(self, cond_image, cond_pose, noisy, noisy_poses) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = self.cfg
        if len(noisy_poses) != c.num_views or np.shape(noisy)[0] != c.num_views:
            raise ContractError(f"expected {c.num_views} noisy views, got {np.shape(noisy)[0]} images "
                                f"and {len(noisy_poses)} poses")
        images = np.concatenate([np.asarray(cond_image)[None], np.asarray(noisy)], axis=0)
        views, origins, dirs = ray_inputs(images, [cond_pose, *noisy_poses])
        return views.astype(self.dtype), origins, dirs
