"""Flow-matching algebra and the multi-step stochastic refinement sampler.

A *model* here is any callable ``model(fixed, moving, psi, t) -> psi_hat1``
on float64 arrays (images ``(X, Y, Z)``, fields ``(3, X, Y, Z)``).
:class:`NetworkPredictor` adapts trained network parameters to that shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np
import torch

from . import network
from .losses import LossConfig, reg_loss_array, reg_loss_grad_array
from .volume import DisplacementField, Volume, _require_same_dims, sample_noise_array

MAX_CHURN = math.sqrt(2.0) - 1.0

Model = Callable[[np.ndarray, np.ndarray, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 10
    eta: Optional[float] = None  # None -> steps * (sqrt(2) - 1), which saturates the churn
    lambda_g: float = 0.05
    use_sde: bool = True
    use_heun: bool = True
    use_ig: bool = True
    use_guidance: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if self.eta is not None and not self.eta >= 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if not self.lambda_g >= 0:
            raise ValueError(f"lambda_g must be non-negative, got {self.lambda_g}")

    @property
    def effective_eta(self) -> float:
        return self.steps * MAX_CHURN if self.eta is None else float(self.eta)

    def plain(self) -> "SamplerConfig":
        """Same seed and step count with every refinement switched off."""
        return replace(self, use_sde=False, use_heun=False, use_ig=False, use_guidance=False)


def interpolate(psi1, eps, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return np.array(eps, dtype=np.float64, copy=True)
    if t == 1.0:
        return np.array(psi1, dtype=np.float64, copy=True)
    return t * psi1 + (1.0 - t) * eps


def velocity(psi_hat1, psi_t, t: float):
    if not t < 1.0:
        raise ValueError(f"velocity is undefined at t={t} (needs t < 1)")
    return (psi_hat1 - psi_t) / (1.0 - t)


def churn_sigma(t: float, eta: float, steps: int):
    sigma = 1.0 - t
    return sigma, sigma * (1.0 + min(eta / steps, MAX_CHURN))


def inject_noise(psi, sigma: float, sigma_hat: float, eps):
    if sigma_hat < sigma:
        raise ValueError(f"sigma_hat ({sigma_hat}) must be >= sigma ({sigma})")
    if sigma_hat == sigma:
        return psi
    return psi + math.sqrt(sigma_hat**2 - sigma**2) * eps


class NetworkPredictor:
    """Wrap network parameters as a ``model(fixed, moving, psi, t)`` callable."""

    def __init__(self, params, cfg: network.NetworkConfig, dtype=torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params = {k: torch.as_tensor(np.asarray(v) if not torch.is_tensor(v) else v).to(dtype)
                       for k, v in params.items()}
        self.calls = 0

    def _tensor(self, a, lead):
        return torch.as_tensor(np.ascontiguousarray(a)).to(self.dtype).reshape(lead + tuple(a.shape[-3:]))

    def __call__(self, fixed, moving, psi, t):
        self.calls += 1
        fp = network.forward(
            self.params, self.cfg,
            self._tensor(fixed, (1, 1)), self._tensor(moving, (1, 1)), self._tensor(psi, (1, 3)),
            float(t), retain=False,
        )
        return fp.ddf[0].to(torch.float64).numpy()


def guided_forward(model: Model, fixed, moving, psi, t: float, lambda_g: float,
                   loss_cfg: LossConfig = LossConfig(), use_guidance: bool = True):
    """Network prediction followed by one descent step of size ``lambda_g`` on the registration loss."""
    psi_hat1 = np.asarray(model(fixed, moving, psi, t), dtype=np.float64)
    if psi_hat1.shape != np.shape(psi):
        raise ValueError(f"model returned shape {psi_hat1.shape}, expected {np.shape(psi)}")
    if use_guidance and lambda_g > 0:
        psi_hat1 = psi_hat1 - lambda_g * reg_loss_grad_array(moving, fixed, psi_hat1, loss_cfg)
    return psi_hat1


def _arrays(fixed, moving):
    if isinstance(fixed, Volume) and isinstance(moving, Volume):
        _require_same_dims(fixed, moving)
        return fixed.data, moving.data, fixed.spacing
    fixed, moving = np.asarray(fixed, dtype=np.float64), np.asarray(moving, dtype=np.float64)
    if fixed.shape != moving.shape:
        raise ValueError(f"dimension mismatch: {fixed.shape} vs {moving.shape}")
    return fixed, moving, None


def sample(model: Model, fixed: Volume, moving: Volume, cfg: SamplerConfig = SamplerConfig(),
           loss_cfg: LossConfig = LossConfig(), spacing=None, trace: Optional[List[dict]] = None) -> DisplacementField:
    """Integrate from spacing-scaled noise to a displacement field in ``cfg.steps`` steps.

    When ``trace`` is a list, one record per step is appended holding the
    state before churn, after churn, the first prediction and the state after
    the update.
    """
    f, m, sp = _arrays(fixed, moving)
    sp = tuple(spacing) if spacing is not None else sp
    if sp is None:
        raise ValueError("spacing is required when images are plain arrays")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.steps
    h = 1.0 / n
    eta = cfg.effective_eta
    lam = cfg.lambda_g if cfg.use_guidance else 0.0

    def fwd(state, t):
        return guided_forward(model, f, m, state, t, lam, loss_cfg, cfg.use_guidance)

    psi = sample_noise_array(f.shape, sp, rng)
    for i in range(n):
        t = i / n
        record = {"i": i, "t": t, "state_in": psi.copy()} if trace is not None else None
        if cfg.use_sde and i > 0:
            sigma, sigma_hat = churn_sigma(t, eta, n)
            psi = inject_noise(psi, sigma, sigma_hat, sample_noise_array(f.shape, sp, rng))
        psi_hat1 = fwd(psi, t)
        v1 = velocity(psi_hat1, psi, t)
        if cfg.use_heun and i < n - 1:
            t_next = (i + 1) / n
            psi_tilde = psi + v1 * h
            v2 = velocity(fwd(psi_tilde, t_next), psi_tilde, t_next)
            v1 = 0.5 * (v1 + v2)
        if record is not None:
            record.update(state_churned=psi.copy(), psi_hat1=psi_hat1.copy())
        psi = psi_hat1 if (cfg.use_ig and i == 0) else psi + v1 * h
        if record is not None:
            record["state_out"] = psi.copy()
            trace.append(record)
    return DisplacementField(psi, sp)


def instance_optimise(fixed: Volume, moving: Volume, ddf0: DisplacementField, steps: int = 10, lr: float = 0.01,
                      loss_cfg: LossConfig = LossConfig(), beta1: float = 0.9, beta2: float = 0.999,
                      eps: float = 1e-8, history: Optional[List[float]] = None) -> DisplacementField:
    """Adam on the displacement components. ``history`` collects the loss before each step and at the end."""
    if int(steps) != steps or steps < 0:
        raise ValueError(f"steps must be a non-negative integer, got {steps}")
    if not lr >= 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    f, m, _ = _arrays(fixed, moving)
    _require_same_dims(fixed, ddf0)
    u = ddf0.data.copy()
    m1 = np.zeros_like(u)
    m2 = np.zeros_like(u)
    for k in range(1, int(steps) + 1):
        if history is not None:
            history.append(reg_loss_array(m, f, u, loss_cfg))
        g = reg_loss_grad_array(m, f, u, loss_cfg)
        m1 = beta1 * m1 + (1 - beta1) * g
        m2 = beta2 * m2 + (1 - beta2) * g * g
        u = u - lr * (m1 / (1 - beta1**k)) / (np.sqrt(m2 / (1 - beta2**k)) + eps)
    if history is not None:
        history.append(reg_loss_array(m, f, u, loss_cfg))
    return DisplacementField(u, ddf0.spacing)
