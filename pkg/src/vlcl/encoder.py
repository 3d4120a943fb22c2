"""Main encoder, projection head and the momentum copy, written functionally.

Parameters live in plain ``dict[str, Tensor]`` so that the trainer can build a
differentiable updated parameter set and evaluate the network at it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import torch
import torch.nn.functional as F

from .errors import ConfigError

log = logging.getLogger(__name__)

Params = Dict[str, torch.Tensor]

_ACTIVATIONS = {"relu": F.relu, "softplus": F.softplus, "tanh": torch.tanh}


def activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}") from None


@dataclass(frozen=True)
class EncoderConfig:
    conv_channels: Tuple[int, ...] = (64, 64, 64)
    feature_dim: int = 64
    proj_dim: int = 128
    proj_hidden: int = 64
    image_size: int = 32
    in_channels: int = 3
    activation: str = "relu"
    pool: str = "max"
    norm_groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.feature_dim <= 0 or self.proj_dim <= 0 or self.proj_hidden <= 0:
            raise ConfigError("feature_dim, proj_dim and proj_hidden must be positive")
        if any(c <= 0 for c in self.conv_channels):
            raise ConfigError("conv_channels must be positive")
        if self.image_size < 2 ** self.num_blocks:
            raise ConfigError(
                f"image_size {self.image_size} too small for {self.num_blocks} pooling blocks"
            )
        if self.pool not in ("max", "avg"):
            raise ConfigError(f"pool must be 'max' or 'avg', got {self.pool!r}")
        activation(self.activation)

    @property
    def block_channels(self) -> Tuple[int, ...]:
        return self.conv_channels + (self.feature_dim,)

    @property
    def num_blocks(self) -> int:
        return len(self.conv_channels) + 1


@dataclass
class EncoderState:
    """``theta`` (trained) and ``omega`` (momentum copy) with identical keys and shapes."""

    theta: Params
    omega: Params


def _groups(channels: int, max_groups: int) -> int:
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


def conv_block(x: torch.Tensor, params: Params, prefix: str, act, pool: str, groups: int):
    x = F.conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], padding=1)
    x = F.group_norm(x, groups, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"])
    x = act(x)
    if pool == "max":
        return F.max_pool2d(x, 2)
    return F.avg_pool2d(x, 2)


def init_conv_params(params: Params, prefix: str, c_in: int, c_out: int,
                     generator: torch.Generator, dtype=torch.float32):
    fan_in = c_in * 9
    params[f"{prefix}.weight"] = torch.randn(c_out, c_in, 3, 3, generator=generator,
                                             dtype=dtype) * math.sqrt(2.0 / fan_in)
    params[f"{prefix}.bias"] = torch.zeros(c_out, dtype=dtype)
    params[f"{prefix}.norm.weight"] = torch.ones(c_out, dtype=dtype)
    params[f"{prefix}.norm.bias"] = torch.zeros(c_out, dtype=dtype)


def init_linear_params(params: Params, prefix: str, d_in: int, d_out: int,
                       generator: torch.Generator, dtype=torch.float32):
    params[f"{prefix}.weight"] = torch.randn(d_out, d_in, generator=generator,
                                             dtype=dtype) * math.sqrt(2.0 / d_in)
    params[f"{prefix}.bias"] = torch.zeros(d_out, dtype=dtype)


def to_nchw(images) -> torch.Tensor:
    """Channel-last numpy/tensor batch -> NCHW tensor (no copy for tensors already NCHW)."""
    x = torch.as_tensor(images)
    if x.ndim != 4:
        raise ConfigError(f"expected a 4-d image batch, got shape {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2)


class Encoder:
    """Conv backbone ``encode`` plus 2-layer MLP ``project`` head, evaluated at given params."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self._act = activation(cfg.activation)

    def init_params(self, generator: torch.Generator, dtype=torch.float32) -> Params:
        cfg = self.cfg
        params: Params = {}
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.block_channels):
            init_conv_params(params, f"backbone.{i}", c_in, c_out, generator, dtype)
            c_in = c_out
        init_linear_params(params, "head.0", cfg.feature_dim, cfg.proj_hidden, generator, dtype)
        init_linear_params(params, "head.1", cfg.proj_hidden, cfg.proj_dim, generator, dtype)
        return params

    def encode(self, params: Params, images: torch.Tensor) -> torch.Tensor:
        """``images`` NCHW -> ``(batch, feature_dim)`` globally pooled features."""
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1] != cfg.in_channels or \
                images.shape[2] != cfg.image_size or images.shape[3] != cfg.image_size:
            raise ConfigError(
                f"encoder expects (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}) "
                f"images, got {tuple(images.shape)}"
            )
        x = images
        for i, channels in enumerate(cfg.block_channels):
            x = conv_block(x, params, f"backbone.{i}", self._act, cfg.pool,
                           _groups(channels, cfg.norm_groups))
        return x.mean(dim=(2, 3))

    def project(self, params: Params, features: torch.Tensor) -> torch.Tensor:
        """Features -> unit-norm ``(batch, proj_dim)`` embeddings."""
        if features.shape[-1] != self.cfg.feature_dim:
            raise ConfigError(f"project expects width {self.cfg.feature_dim}, got {features.shape[-1]}")
        h = F.relu(F.linear(features, params["head.0.weight"], params["head.0.bias"]))
        z = F.linear(h, params["head.1.weight"], params["head.1.bias"])
        return l2_normalize(z)

    def embed(self, params: Params, images: torch.Tensor) -> torch.Tensor:
        return self.project(params, self.encode(params, images))


def l2_normalize(z: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norm = z.norm(dim=-1, keepdim=True)
    if bool((norm < eps).any()):
        log.warning("zero-norm embedding before normalisation; adding %g", eps)
        norm = norm + eps
    return z / norm


def init_encoders(cfg: EncoderConfig, rng, dtype=torch.float32) -> Tuple[Encoder, EncoderState]:
    """Build the encoder and its initial state; ``rng`` is a seed or ``torch.Generator``."""
    if not isinstance(rng, torch.Generator):
        rng = torch.Generator().manual_seed(int(rng))
    encoder = Encoder(cfg)
    theta = encoder.init_params(rng, dtype)
    omega = {k: v.clone() for k, v in theta.items()}
    return encoder, EncoderState(theta=theta, omega=omega)


@torch.no_grad()
def momentum_update(state: EncoderState, epsilon: float) -> EncoderState:
    """omega <- epsilon * omega + (1 - epsilon) * theta, outside any autograd graph."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"momentum coefficient must lie in [0, 1], got {epsilon}")
    omega = {}
    for name, w in state.omega.items():
        t = state.theta[name].detach()
        if epsilon == 0.0:
            omega[name] = t.clone()
        else:
            omega[name] = epsilon * w.detach() + (1.0 - epsilon) * t
    return EncoderState(theta=state.theta, omega=omega)
