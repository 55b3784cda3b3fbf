"""Convolutional U-net score network with a separate spatial-mean bypass.

The input ``X`` (noised channels plus context) is split into its per-channel
spatial mean ``Xbar`` and the deviation ``X' = X - Xbar``. The U-net sees
only ``X'``, and its output has its spatial mean removed. A small dense net
maps ``(Xbar, t)`` to the output mean, so::

    f(X, t) = U(X', t) - mean(U(X', t)) + M(Xbar, t)

and ``f`` is trained to predict the added unit noise ``eps``; since the
conditional score is ``-eps / sigma``, the score is ``-f / sigma(t)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..sde import NoiseSchedule
from .base import ScoreModel


@dataclass(frozen=True)
class UNetConfig:
    channels: tuple[str, ...] = ("vorticity", "supersaturation", "context")
    context_channels: tuple[str, ...] = ("context",)
    base_width: int = 32
    n_stages: int = 3
    n_res_blocks: int = 8
    embed_dim: int = 128
    fourier_scale: float = 30.0
    bypass_width: int = 64
    dropout: float = 0.5
    padding_mode: str = "zeros"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "context_channels", tuple(self.context_channels))
        if not set(self.context_channels) <= set(self.channels):
            raise ValueError("context channels must be a subset of channels")
        if self.base_width % 8:
            raise ValueError("base_width must be a multiple of 8")
        if self.padding_mode not in ("zeros", "circular"):
            raise ValueError("padding_mode must be 'zeros' or 'circular'")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def c_in(self) -> int:
        return len(self.channels)

    @property
    def c_out(self) -> int:
        return len(self.channels) - len(self.context_channels)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["context_channels"] = list(self.context_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> UNetConfig:
        return cls(**d)


def _groups(ch: int) -> int:
    return max(1, ch // 8)


class FourierTimeEmbedding(nn.Module):
    """Fixed random Fourier features of ``t`` followed by a dense layer."""

    def __init__(self, dim: int, scale: float):
        super().__init__()
        self.register_buffer("freqs", torch.randn(dim // 2) * scale)
        self.dense = nn.Linear(dim, dim)

    def forward(self, t):
        proj = 2 * math.pi * t[:, None] * self.freqs[None]
        return F.silu(self.dense(torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)))


def _conv(c_in, c_out, cfg: UNetConfig, stride=1):
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, padding_mode=cfg.padding_mode)


class TimeConvStage(nn.Module):
    """conv -> add dense(time) -> group norm -> swish."""

    def __init__(self, c_in, c_out, cfg: UNetConfig, stride=1):
        super().__init__()
        self.conv = _conv(c_in, c_out, cfg, stride)
        self.time = nn.Linear(cfg.embed_dim, c_out)
        self.norm = nn.GroupNorm(_groups(c_out), c_out)

    def forward(self, x, emb):
        h = self.conv(x) + self.time(emb)[:, :, None, None]
        return F.silu(self.norm(h))


class ResBlock(nn.Module):
    def __init__(self, ch, cfg: UNetConfig):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = _conv(ch, ch, cfg)
        self.time = nn.Linear(cfg.embed_dim, ch)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.drop = nn.Dropout(cfg.dropout)
        self.conv2 = _conv(ch, ch, cfg)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(emb)[:, :, None, None]
        h = self.conv2(self.drop(F.silu(self.norm2(h))))
        return x + h


class MeanBypass(nn.Module):
    """Three dense layers on the per-channel spatial means."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        w = cfg.bypass_width
        self.lin1 = nn.Linear(cfg.c_in, w)
        self.time1 = nn.Linear(cfg.embed_dim, w)
        self.norm1 = nn.LayerNorm(w)
        self.lin2 = nn.Linear(w, w)
        self.time2 = nn.Linear(cfg.embed_dim, w)
        self.norm2 = nn.LayerNorm(w)
        self.out = nn.Linear(w, cfg.c_out)

    def hidden(self, xbar, emb):
        h = F.silu(self.norm1(self.lin1(xbar) + self.time1(emb)))
        return F.silu(self.norm2(self.lin2(h) + self.time2(emb)))

    def forward(self, xbar, emb):
        return self.out(self.hidden(xbar, emb))


class UNet(nn.Module):
    """``f_theta(X, t)`` on channel-first tensors ``(B, C_in, N, N)``."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.embed = FourierTimeEmbedding(cfg.embed_dim, cfg.fourier_scale)
        self.lift = _conv(cfg.c_in, w, cfg)
        widths = [w * 2**i for i in range(cfg.n_stages + 1)]
        self.down = nn.ModuleList(TimeConvStage(widths[i], widths[i + 1], cfg, stride=2) for i in range(cfg.n_stages))
        self.blocks = nn.ModuleList(ResBlock(widths[-1], cfg) for _ in range(cfg.n_res_blocks))
        self.up = nn.ModuleList(
            TimeConvStage(widths[i + 1] + widths[i], widths[i], cfg) for i in reversed(range(cfg.n_stages))
        )
        self.project = _conv(w, cfg.c_out, cfg)
        self.bypass = MeanBypass(cfg)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="linear")
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def check_grid(self, n: int):
        if n % 2**self.cfg.n_stages:
            raise ValueError(f"N={n} not divisible by {2**self.cfg.n_stages}")

    def spatial(self, xp, emb):
        """The U branch on the deviation field ``X'``."""
        h = self.lift(xp)
        skips = [h]
        for stage in self.down:
            h = stage(h, emb)
            skips.append(h)
        skips.pop()
        for block in self.blocks:
            h = block(h, emb)
        for stage in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = stage(torch.cat([h, skips.pop()], dim=1), emb)
        return self.project(h)

    def branches(self, x, t):
        """``(Y', Ybar)``: zero-mean spatial part and bypass mean part."""
        self.check_grid(x.shape[-1])
        emb = self.embed(t)
        xbar = x.mean(dim=(-2, -1))
        u = self.spatial(x - xbar[:, :, None, None], emb)
        y_prime = u - u.mean(dim=(-2, -1), keepdim=True)
        return y_prime, self.bypass(xbar, emb)

    def forward(self, x, t):
        y_prime, y_bar = self.branches(x, t)
        return y_prime + y_bar[:, :, None, None]


class UNetScore(ScoreModel):
    """Score ``-f_theta / sigma(t)`` from a :class:`UNet` on numpy fields."""

    def __init__(self, net: UNet, schedule: NoiseSchedule, batch_size: int = 64):
        self.net = net
        self.schedule = schedule
        self.channels = net.cfg.channels
        self.context_channels = net.cfg.context_channels
        self.batch_size = batch_size

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def denoiser(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """``f_theta`` in inference mode, ``(B, N, N, C_out)``."""
        self.net.eval()
        out = []
        with torch.no_grad():
            for i in range(0, x.shape[0], self.batch_size):
                xb = torch.as_tensor(np.moveaxis(x[i : i + self.batch_size], -1, 1).copy(), dtype=self.dtype)
                tb = torch.as_tensor(t[i : i + self.batch_size], dtype=self.dtype)
                out.append(self.net(xb, tb).double().numpy())
        return np.moveaxis(np.concatenate(out), 1, -1)

    def score(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        s = self.schedule.sigma(t)
        return -self.denoiser(x, t) / np.reshape(s, (-1, 1, 1, 1))


def unet_gradient(net: nn.Module, loss_fn, *batch) -> dict[str, torch.Tensor]:
    """Gradients of ``loss_fn(net, *batch)`` w.r.t. every named parameter."""
    net.zero_grad(set_to_none=True)
    loss = loss_fn(net, *batch)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss.detach())}")
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in net.named_parameters()
    }
