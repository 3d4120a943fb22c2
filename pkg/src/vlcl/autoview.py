"""Learnable views: localisation nets emitting diagonal affine warps, grid construction,
bilinear sampling, and the random photometric/flip pre-augmentation.

Coordinates are normalised so that -1 and +1 are the centres of the first and last
pixel along each axis (``align_corners=True`` in torch terms).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import Params, _groups, activation, conv_block, init_conv_params
from .errors import ConfigError

# sigmoid(-40) underflows against 1.0 in float32 and float64, giving an exact identity warp
IDENTITY_LOGIT = 40.0


@dataclass(frozen=True)
class ViewConfig:
    conv_channels: Tuple[int, ...] = (16, 16)
    image_size: int = 32
    in_channels: int = 3
    activation: str = "relu"
    pool: str = "max"
    norm_groups: int = 4
    scale_min: float = 0.3
    scale_max: float = 1.0
    init_scale: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if not self.conv_channels:
            raise ConfigError("localisation net needs at least one conv block")
        if not 0 < self.scale_min < self.scale_max <= 1.0:
            raise ConfigError("need 0 < scale_min < scale_max <= 1")
        if not self.scale_min < self.init_scale <= self.scale_max:
            raise ConfigError("init_scale must lie in (scale_min, scale_max]")
        if self.image_size < 2 ** len(self.conv_channels):
            raise ConfigError("image_size too small for the localisation net")
        if self.pool not in ("max", "avg"):
            raise ConfigError(f"pool must be 'max' or 'avg', got {self.pool!r}")
        activation(self.activation)

    @classmethod
    def reference_scale(cls, **overrides) -> "ViewConfig":
        """Four 64-channel conv blocks on 80x80 inputs."""
        base = dict(conv_channels=(64, 64, 64, 64), image_size=80, norm_groups=8)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    jitter_prob: float = 0.8
    blur_prob: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    blur_kernel: int = 5
    flip_prob: float = 0.5
    per_branch: bool = True

    def __post_init__(self):
        object.__setattr__(self, "blur_sigma", tuple(float(s) for s in self.blur_sigma))
        for name in ("jitter_prob", "blur_prob", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.hue <= 0.5:
            raise ConfigError("hue must lie in [0, 0.5]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError("blur_kernel must be a positive odd integer")
        lo, hi = self.blur_sigma
        if not 0 < lo <= hi:
            raise ConfigError("blur_sigma must be an increasing positive range")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0,
                   jitter_prob=0.0, blur_prob=0.0, flip_prob=0.0)


# --- pre-augmentation -------------------------------------------------------------

_GRAY = (0.299, 0.587, 0.114)
_RGB_TO_YIQ = torch.tensor([[0.299, 0.587, 0.114],
                            [0.596, -0.274, -0.322],
                            [0.211, -0.523, 0.312]], dtype=torch.float64)
_YIQ_TO_RGB = torch.linalg.inv(_RGB_TO_YIQ)


def _grayscale(x: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(_GRAY, dtype=x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True)


def _per_image(values: np.ndarray, x: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(values, dtype=x.dtype).view(-1, 1, 1, 1)


def _hue_rotate(x: torch.Tensor, turns: np.ndarray) -> torch.Tensor:
    """Rotate chroma in YIQ space by ``turns`` (fractions of a full hue circle) per image."""
    angle = torch.as_tensor(turns, dtype=torch.float64) * 2 * math.pi
    c, s = torch.cos(angle), torch.sin(angle)
    rot = torch.zeros(len(turns), 3, 3, dtype=torch.float64)
    rot[:, 0, 0] = 1.0
    rot[:, 1, 1], rot[:, 1, 2] = c, -s
    rot[:, 2, 1], rot[:, 2, 2] = s, c
    mats = (_YIQ_TO_RGB @ rot @ _RGB_TO_YIQ).to(x.dtype)
    return torch.einsum("bij,bjhw->bihw", mats, x)


def gaussian_kernel(sigma: float, size: int, dtype=torch.float32) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    k = torch.exp(-0.5 * (r / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(x: torch.Tensor, sigma: float, size: int) -> torch.Tensor:
    """Separable normalised Gaussian blur with reflect padding (NCHW)."""
    c = x.shape[1]
    k = gaussian_kernel(sigma, size, x.dtype)
    pad = size // 2
    x = F.pad(x, (pad, pad, 0, 0), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, size).repeat(c, 1, 1, 1), groups=c)
    x = F.pad(x, (0, 0, pad, pad), mode="reflect")
    return F.conv2d(x, k.view(1, 1, size, 1).repeat(c, 1, 1, 1), groups=c)


@torch.no_grad()
def pre_augment(images: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """Random colour jitter, Gaussian blur and horizontal flip, independently per image.

    ``images`` is NCHW in [0, 1]; the result is clipped to [0, 1].  Operations with zero
    strength or probability are skipped, so a disabled config is an exact identity.
    Random draws happen unconditionally so the rng advances by a fixed amount per call.
    """
    x = images.detach().clone()
    b = x.shape[0]
    jitter = rng.uniform(size=b) < cfg.jitter_prob
    bright = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness, size=b)
    contr = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast, size=b)
    satur = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation, size=b)
    hue = rng.uniform(-cfg.hue, cfg.hue, size=b)
    blur = rng.uniform(size=b) < cfg.blur_prob
    sigma = rng.uniform(*cfg.blur_sigma, size=b)
    flip = rng.uniform(size=b) < cfg.flip_prob

    if jitter.any() and x.shape[1] == 3:
        m = _per_image(jitter.astype(np.float64), x)
        if cfg.brightness > 0:
            x = torch.where(m > 0, (x * _per_image(bright, x)).clamp(0, 1), x)
        if cfg.contrast > 0:
            mean = _grayscale(x).mean(dim=(2, 3), keepdim=True)
            x = torch.where(m > 0, ((x - mean) * _per_image(contr, x) + mean).clamp(0, 1), x)
        if cfg.saturation > 0:
            gray = _grayscale(x)
            x = torch.where(m > 0, ((x - gray) * _per_image(satur, x) + gray).clamp(0, 1), x)
        if cfg.hue > 0:
            x = torch.where(m > 0, _hue_rotate(x, np.where(jitter, hue, 0.0)).clamp(0, 1), x)
    if blur.any():
        for i in np.flatnonzero(blur):
            x[i:i + 1] = gaussian_blur(x[i:i + 1], float(sigma[i]), cfg.blur_kernel)
    if flip.any():
        idx = torch.as_tensor(np.flatnonzero(flip))
        x[idx] = torch.flip(x[idx], dims=[3])
    return x.clamp(0.0, 1.0)


# --- affine warps and sampling ----------------------------------------------------


def identity_params(batch: int, dtype=torch.float32) -> torch.Tensor:
    return torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=dtype).repeat(batch, 1)


def affine_grid(params: torch.Tensor, out_size: Tuple[int, int]) -> torch.Tensor:
    """``(B, 4)`` params ``(sx, sy, tx, ty)`` -> ``(B, H, W, 2)`` source ``(x, y)`` coordinates.

    Each target lattice point ``(u, v)`` maps to ``(sx*u + tx, sy*v + ty)``.
    """
    h, w = out_size
    u = torch.linspace(-1.0, 1.0, w, dtype=params.dtype)
    v = torch.linspace(-1.0, 1.0, h, dtype=params.dtype)
    sx, sy, tx, ty = (params[:, i].view(-1, 1, 1) for i in range(4))
    x = sx * u.view(1, 1, w) + tx
    y = sy * v.view(1, h, 1) + ty
    return torch.stack(torch.broadcast_tensors(x, y), dim=-1)


def bilinear_sample(images: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Sample NCHW ``images`` at normalised ``grid`` (B, Ho, Wo, 2) with zero padding.

    Differentiable in both arguments.  Neighbours outside the image contribute zero.
    """
    b, c, h, w = images.shape
    ho, wo = grid.shape[1:3]
    px = (grid[..., 0] + 1) * (0.5 * (w - 1))
    py = (grid[..., 1] + 1) * (0.5 * (h - 1))
    x0 = torch.floor(px.detach())
    y0 = torch.floor(py.detach())
    wx = (px - x0).to(images.dtype)
    wy = (py - y0).to(images.dtype)
    x0, y0 = x0.long(), y0.long()
    flat = images.reshape(b, c, h * w)

    def tap(xi, yi):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).view(b, 1, ho * wo).expand(b, c, ho * wo)
        vals = flat.gather(2, idx).view(b, c, ho, wo)
        return vals * valid.unsqueeze(1).to(images.dtype)

    wx, wy = wx.unsqueeze(1), wy.unsqueeze(1)
    return ((1 - wx) * (1 - wy) * tap(x0, y0) + wx * (1 - wy) * tap(x0 + 1, y0)
            + (1 - wx) * wy * tap(x0, y0 + 1) + wx * wy * tap(x0 + 1, y0 + 1))


def warp(images: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    # float64 coordinates keep lattice points on exact pixel centres for float32 images
    return bilinear_sample(images, affine_grid(params.to(torch.float64), images.shape[2:]))


def random_crop_params(batch: int, rng: np.random.Generator, scale_min: float = 0.3,
                       scale_max: float = 1.0, dtype=torch.float32) -> torch.Tensor:
    """Random axis-aligned crops (resized back to full size) expressed as affine params."""
    s = rng.uniform(scale_min, scale_max, size=(batch, 2))
    t = rng.uniform(-1, 1, size=(batch, 2)) * (1 - s)
    return torch.as_tensor(np.concatenate([s, t], axis=1), dtype=dtype)


# --- localisation network -----------------------------------------------------------


class ViewModule:
    """A localisation net ``gamma -> (sx, sy, tx, ty)`` with bounded outputs.

    scale = s_min + (s_max - s_min) * sigmoid(z); translation = (1 - scale) * tanh(z_t),
    which keeps every warped window inside the source image.
    """

    def __init__(self, cfg: ViewConfig):
        self.cfg = cfg
        self._act = activation(cfg.activation)
        side = cfg.image_size // 2 ** len(cfg.conv_channels)
        self.flat_dim = cfg.conv_channels[-1] * side * side

    def init_params(self, generator: torch.Generator, dtype=torch.float32) -> Params:
        cfg = self.cfg
        params: Params = {}
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.conv_channels):
            init_conv_params(params, f"loc.{i}", c_in, c_out, generator, dtype)
            c_in = c_out
        p = (cfg.init_scale - cfg.scale_min) / (cfg.scale_max - cfg.scale_min)
        logit = IDENTITY_LOGIT if p >= 1.0 else math.log(p / (1 - p))
        params["head.weight"] = torch.zeros(4, self.flat_dim, dtype=dtype)
        params["head.bias"] = torch.tensor([logit, logit, 0.0, 0.0], dtype=dtype)
        return params

    def raw(self, params: Params, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        x = images
        for i, channels in enumerate(cfg.conv_channels):
            x = conv_block(x, params, f"loc.{i}", self._act, cfg.pool,
                           _groups(channels, cfg.norm_groups))
        return F.linear(x.flatten(1), params["head.weight"], params["head.bias"])

    def localise(self, params: Params, images: torch.Tensor) -> torch.Tensor:
        """NCHW images -> ``(B, 4)`` affine params within the clamp bounds."""
        z = self.raw(params, images)
        lo, hi = self.cfg.scale_min, self.cfg.scale_max
        # the clamp only guards against rounding just below ``lo`` when the sigmoid saturates
        scale = (hi - (hi - lo) * torch.sigmoid(-z[:, :2])).clamp(lo, hi)
        shift = (1 - scale) * torch.tanh(z[:, 2:])
        return torch.cat([scale, shift], dim=1)

    def __call__(self, params: Params, images: torch.Tensor) -> torch.Tensor:
        return warp(images, self.localise(params, images))


def make_views(view_module: ViewModule, gamma1: Params, gamma2: Params, images: torch.Tensor,
               aug_cfg: AugmentConfig, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Two views of every image: pre-augment, then each localisation net warps its copy."""
    first = pre_augment(images, aug_cfg, rng)
    second = pre_augment(images, aug_cfg, rng) if aug_cfg.per_branch else first
    return view_module(gamma1, first), view_module(gamma2, second)
