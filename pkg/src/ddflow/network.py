"""Time-conditioned coarse-to-fine registration network.

``f(fixed, moving, psi_t, t) -> psi_1`` with a shared convolutional encoder
and, per scale, a correlation/MLP block that predicts a residual field. The
noisy input field enters only at the coarsest stage, where it warps the
moving features and is the base of the residual. Finer stages refine the
upsampled field. Prediction heads start at zero, so an untrained network
returns the (resampled) input field unchanged.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from . import torch_ops

T_MAX = 1000.0


@dataclass(frozen=True)
class NetworkConfig:
    n_scales: int = 3
    channels: tuple = (8, 16, 32)
    corr_radius: int = 1
    time_embed_dim: int = 32
    mlp_hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.n_scales < 2:
            raise ValueError("n_scales must be >= 2")
        if len(self.channels) != self.n_scales:
            raise ValueError(f"need one channel count per scale, got {self.channels} for {self.n_scales} scales")
        if self.corr_radius < 1:
            raise ValueError("corr_radius must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be an even integer >= 2")

    @property
    def divisor(self) -> int:
        return 2 ** (self.n_scales - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        return cls(**{k: (tuple(v) if k == "channels" else v) for k, v in d.items()})


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """(B,) times in [0, 1] -> (B, dim) as ``[sin(w t T), cos(w t T)]``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = (t * T_MAX)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def time_embedding(t: float, dim: int) -> torch.Tensor:
    return sinusoidal_embedding(torch.tensor([float(t)], dtype=torch.float64), dim)[0]


def local_correlation(fa: torch.Tensor, fb: torch.Tensor, radius: int) -> torch.Tensor:
    """Channel-mean products ``fa(x) . fb(x + o)`` for every offset ``o`` in the cube of radius ``radius``.

    ``fb`` is border-clamped. Output channels follow ``itertools.product`` order over (dx, dy, dz).
    """
    if fa.shape != fb.shape:
        raise ValueError(f"feature shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    r = radius
    X, Y, Z = fa.shape[2:]
    padded = F.pad(fb, (r, r, r, r, r, r), mode="replicate")
    out = []
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                shifted = padded[:, :, r + dx:r + dx + X, r + dy:r + dy + Y, r + dz:r + dz + Z]
                out.append((fa * shifted).mean(dim=1))
    return torch.stack(out, dim=1)


class EncoderStage(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)

    def forward(self, x):
        return F.silu(self.conv2(F.silu(self.conv1(x))))


class CorrBlock(nn.Module):
    """Local correlation + both feature maps (+ coarser context) -> per-voxel MLP -> field increment."""

    def __init__(self, channels, radius, hidden, context):
        super().__init__()
        self.radius = radius
        n_corr = (2 * radius + 1) ** 3
        self.mlp1 = nn.Conv3d(n_corr + 2 * channels + context, hidden, 1)
        self.mlp2 = nn.Conv3d(hidden, hidden, 1)
        self.head = nn.Conv3d(hidden, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, warped_moving, fixed, context=None):
        corr = local_correlation(warped_moving, fixed, self.radius)
        parts = [corr, warped_moving, fixed]
        if context is not None:
            parts.append(context)
        h = F.silu(self.mlp1(torch.cat(parts, dim=1)))
        h = F.silu(self.mlp2(h))
        return self.head(h), h


class RegistrationNet(nn.Module):
    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.encoder = nn.ModuleList(
            EncoderStage(1 if k == 0 else ch[k - 1], ch[k], 1 if k == 0 else 2) for k in range(cfg.n_scales)
        )
        self.time_proj = nn.ModuleList(nn.Linear(cfg.time_embed_dim, c) for c in ch)
        self.blocks = nn.ModuleList(
            CorrBlock(ch[k], cfg.corr_radius, cfg.mlp_hidden, 0 if k == cfg.n_scales - 1 else cfg.mlp_hidden)
            for k in range(cfg.n_scales)
        )

    def encode(self, img):
        feats = []
        h = img
        for stage in self.encoder:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, fixed, moving, psi_t, t, return_stages: bool = False):
        """fixed, moving: (B, 1, X, Y, Z); psi_t: (B, 3, X, Y, Z); t: float or (B,) tensor."""
        cfg = self.cfg
        b = fixed.shape[0]
        check_inputs(cfg, fixed, moving, psi_t)
        if not torch.is_tensor(t):
            t = torch.full((b,), float(t), dtype=fixed.dtype, device=fixed.device)
        t = t.to(fixed.dtype).reshape(-1).expand(b)
        feats = self.encode(torch.cat([fixed, moving], dim=0))
        feats_f = [f[:b] for f in feats]
        feats_m = [f[b:] for f in feats]
        emb = sinusoidal_embedding(t, cfg.time_embed_dim)

        n = cfg.n_scales
        psi = torch_ops.downsample(psi_t, cfg.divisor)
        stages = {"input_coarse": psi}
        context = None
        for k in reversed(range(n)):
            if k < n - 1:
                psi = torch_ops.upsample(psi, 2)
                context = torch_ops.upsample_features(context, 2)
            fm = feats_m[k] + self.time_proj[k](emb)[:, :, None, None, None]
            warped = torch_ops.warp(fm, psi)
            delta, context = self.blocks[k](warped, feats_f[k], context)
            psi = psi + delta
            stages[f"delta{k}"] = delta
            stages[f"psi{k}"] = psi
        if return_stages:
            return psi, stages
        return psi


def check_inputs(cfg: NetworkConfig, fixed, moving, psi_t):
    if fixed.shape != moving.shape:
        raise ValueError(f"fixed/moving shapes differ: {tuple(fixed.shape)} vs {tuple(moving.shape)}")
    if fixed.dim() != 5 or fixed.shape[1] != 1:
        raise ValueError(f"images must be (B, 1, X, Y, Z), got {tuple(fixed.shape)}")
    if psi_t.shape != (fixed.shape[0], 3) + tuple(fixed.shape[2:]):
        raise ValueError(f"field shape {tuple(psi_t.shape)} does not match images {tuple(fixed.shape)}")
    bad = [n for n in fixed.shape[2:] if n % cfg.divisor]
    if bad:
        raise ValueError(f"spatial dims {tuple(fixed.shape[2:])} must be divisible by {cfg.divisor}")


def build_network(cfg: NetworkConfig = NetworkConfig(), dtype=torch.float32) -> RegistrationNet:
    """Deterministically initialised network for ``cfg.seed``; global RNG state is untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = RegistrationNet(cfg)
    return net.to(dtype)


NetworkParameters = Dict[str, torch.Tensor]


def init_params(cfg: NetworkConfig = NetworkConfig(), seed: Optional[int] = None, dtype=torch.float32) -> NetworkParameters:
    if seed is not None and seed != cfg.seed:
        cfg = NetworkConfig(**{**asdict(cfg), "seed": seed})
    return OrderedDict((k, v.detach().clone()) for k, v in build_network(cfg, dtype).state_dict().items())


def count_params(params) -> int:
    if isinstance(params, nn.Module):
        return sum(p.numel() for p in params.parameters())
    return sum(int(v.numel()) for v in params.values())


class StaleActivationError(RuntimeError):
    pass


@dataclass
class ForwardPass:
    """Output of :func:`forward` together with the graph needed by :func:`backward`."""

    ddf: torch.Tensor
    stages: dict
    _output: Optional[torch.Tensor] = field(default=None, repr=False)
    _leaves: Optional[Dict[str, torch.Tensor]] = field(default=None, repr=False)


_MODULE_CACHE: Dict[NetworkConfig, RegistrationNet] = {}


def _skeleton(cfg: NetworkConfig) -> RegistrationNet:
    if cfg not in _MODULE_CACHE:
        _MODULE_CACHE[cfg] = RegistrationNet(cfg)
    return _MODULE_CACHE[cfg]


def forward(params: NetworkParameters, cfg: NetworkConfig, fixed, moving, psi_t, t, retain: bool = True) -> ForwardPass:
    """Functional forward pass. With ``retain`` the graph is kept for :func:`backward`."""
    tt = float(t) if not torch.is_tensor(t) else t
    if not torch.is_tensor(t) and not 0.0 <= tt < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    module = _skeleton(cfg)
    leaves = OrderedDict((k, v.detach().clone().requires_grad_(retain)) for k, v in params.items())
    with torch.set_grad_enabled(retain):
        out, stages = functional_call(module, leaves, (fixed, moving, psi_t, tt), {"return_stages": True})
    return ForwardPass(
        ddf=out.detach(),
        stages={k: v.detach() for k, v in stages.items()},
        _output=out if retain else None,
        _leaves=leaves if retain else None,
    )


def backward(fp: Optional[ForwardPass], upstream: torch.Tensor) -> NetworkParameters:
    """Parameter gradients of ``<upstream, ddf>`` for a retained forward pass."""
    if fp is None or fp._output is None:
        raise StaleActivationError("no retained activations: run forward(..., retain=True) first")
    if upstream.shape != fp._output.shape:
        raise ValueError(f"upstream shape {tuple(upstream.shape)} != output {tuple(fp._output.shape)}")
    names = list(fp._leaves)
    grads = torch.autograd.grad(
        fp._output, [fp._leaves[k] for k in names], grad_outputs=upstream.to(fp._output.dtype),
        retain_graph=True, allow_unused=True,
    )
    return OrderedDict(
        (k, torch.zeros_like(fp._leaves[k]) if g is None else g.detach()) for k, g in zip(names, grads)
    )
