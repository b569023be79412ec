"""Warmup + reflow training with an EMA teacher.

Warmup epochs train the single-step case only: pure noise in, ``t = 0``.
Afterwards the EMA teacher turns noise into a target field, the student sees
a point on the straight path between noise and that target at a
logit-normal time, and learns to finish the registration. The loss is the
registration loss throughout.
"""
from __future__ import annotations

import copy
import csv
import io as _io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import io, network, torch_ops
from .losses import LossConfig
from .volume import Volume, sample_noise_array

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 2
    lr: float = 1e-4
    batch_size: int = 1
    ema_mu: float = 0.99
    patience: int = 10
    loss: LossConfig = LossConfig()
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        if not 0.0 < self.ema_mu < 1.0:
            raise ValueError(f"ema_mu must lie in (0, 1), got {self.ema_mu}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    student: network.RegistrationNet
    teacher: network.RegistrationNet
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 1
    step: int = 0
    best_val: float = math.inf
    since_improvement: int = 0
    teacher_calls: int = 0
    warmup_epochs: int = 2

    @property
    def in_warmup(self) -> bool:
        return self.epoch <= self.warmup_epochs


def init_state(net_cfg: network.NetworkConfig, cfg: TrainConfig, dtype=torch.float32) -> TrainState:
    student = network.build_network(net_cfg, dtype)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    return TrainState(student, teacher, opt, np.random.default_rng(cfg.seed), warmup_epochs=cfg.warmup_epochs)


def sample_time_logit_normal(rng: np.random.Generator, size=None):
    z = rng.standard_normal(size)
    return 1.0 / (1.0 + np.exp(-z))


@torch.no_grad()
def ema_update(teacher: network.RegistrationNet, student: network.RegistrationNet, mu: float):
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        pt.mul_(mu).add_(ps.detach(), alpha=1.0 - mu)
    return teacher


def _as_batch(arr, dtype, channels=1):
    return torch.as_tensor(np.ascontiguousarray(arr)).to(dtype).reshape((1, channels) + tuple(np.shape(arr)[-3:]))


def train_step(state: TrainState, fixed: Volume, moving: Volume, cfg: TrainConfig, teacher_target=None):
    """One optimiser step on a single pair; returns the loss value.

    ``teacher_target`` replaces the live teacher prediction in the reflow
    branch (the noise and time draws are consumed either way).
    """
    dtype = next(state.student.parameters()).dtype
    eps = sample_noise_array(fixed.dims, fixed.spacing, state.rng)
    f = _as_batch(fixed.data, dtype)
    m = _as_batch(moving.data, dtype)
    eps_t = _as_batch(eps, dtype, 3)
    if state.in_warmup:
        t = 0.0
        psi_t = eps_t
    else:
        t = float(sample_time_logit_normal(state.rng))
        if teacher_target is None:
            state.teacher_calls += 1
            with torch.no_grad():
                target = state.teacher(f, m, eps_t, 0.0)
        else:
            target = torch.as_tensor(teacher_target).to(dtype).reshape(eps_t.shape)
        psi_t = t * target.detach() + (1.0 - t) * eps_t
    state.student.train()
    pred = state.student(f, m, psi_t, t)
    loss = torch_ops.reg_loss(m, f, pred, cfg.loss)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss at epoch {state.epoch} step {state.step} (t={t:.4f}, "
            f"max|pred|={float(pred.detach().abs().max()):.4g})"
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state.teacher, state.student, cfg.ema_mu)
    state.step += 1
    return value


def transform_array(arr: np.ndarray, flips: Sequence[bool], rot: int) -> np.ndarray:
    """Flip the spatial axes flagged in ``flips`` then rotate ``rot`` quarter turns in the x-y plane.

    Works on ``(X, Y, Z)`` grids and on ``(C, X, Y, Z)`` stacks alike.
    """
    off = arr.ndim - 3
    for a, flag in enumerate(flips):
        if flag:
            arr = np.flip(arr, axis=off + a)
    return np.ascontiguousarray(np.rot90(arr, k=rot, axes=(off, off + 1)))


def draw_transform(rng: np.random.Generator):
    flips = tuple(bool(b) for b in rng.integers(0, 2, size=3))
    return flips, int(rng.integers(0, 4))


def augment(pair, labels, rng: np.random.Generator, transform=None):
    """Apply one random flip/rotation draw to both images and, if given, their label maps."""
    flips, rot = draw_transform(rng) if transform is None else transform
    images = tuple(Volume(transform_array(v.data, flips, rot), v.spacing) for v in pair)
    if labels is None:
        return images, None
    out = tuple(type(lab)(transform_array(lab.data, flips, rot), lab.spacing, lab.classes) for lab in labels)
    return images, out


def _pair(item):
    if hasattr(item, "ed_image"):
        return item.ed_image, item.es_image
    fixed, moving = item
    return fixed, moving


def validation_noise(pairs, seed: int):
    rng = np.random.default_rng([seed, 7919])
    return [sample_noise_array(f.dims, f.spacing, rng) for f, _ in pairs]


@torch.no_grad()
def validation_loss(student: network.RegistrationNet, pairs, noise, cfg: TrainConfig) -> float:
    """Mean single-step registration loss from fixed noise at ``t = 0``."""
    student.eval()
    dtype = next(student.parameters()).dtype
    vals = []
    for (f, m), eps in zip(pairs, noise):
        ft, mt = _as_batch(f.data, dtype), _as_batch(m.data, dtype)
        pred = student(ft, mt, _as_batch(eps, dtype, 3), 0.0)
        vals.append(float(torch_ops.reg_loss(mt, ft, pred, cfg.loss)))
    return float(np.mean(vals))


def state_params(module) -> dict:
    return {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in module.state_dict().items()}


def save_checkpoint(path, module, net_cfg: network.NetworkConfig, extra: Optional[dict] = None) -> None:
    config = {"network": net_cfg.to_dict()}
    if extra:
        config.update(extra)
    io.write_frwt(path, state_params(module), config)


def load_checkpoint(path, dtype=torch.float32):
    """Returns ``(params, network config, full config echo)``."""
    params, config = io.read_frwt(path)
    net_cfg = network.NetworkConfig.from_dict(config["network"])
    expected = network.init_params(net_cfg)
    if list(params) != list(expected) or any(params[k].shape != tuple(expected[k].shape) for k in params):
        raise io.FormatError(f"checkpoint {path} does not match its network config")
    return {k: torch.from_numpy(v.copy()).to(dtype) for k, v in params.items()}, net_cfg, config


def load_module(path, dtype=torch.float32) -> network.RegistrationNet:
    params, net_cfg, _ = load_checkpoint(path, dtype)
    net = network.build_network(net_cfg, dtype)
    net.load_state_dict(params)
    return net


@dataclass
class FitResult:
    params: dict
    teacher_params: dict
    net_cfg: network.NetworkConfig
    history: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    state: Optional[TrainState] = None


LOG_FIELDS = ("epoch", "train_loss", "val_loss", "seconds")


def fit(dataset, valset, cfg: TrainConfig = TrainConfig(), net_cfg: network.NetworkConfig = network.NetworkConfig(),
        out_dir=None, dtype=torch.float32, init=None) -> FitResult:
    """Train on ``dataset`` (phantom cases or ``(fixed, moving)`` volume pairs).

    Early stopping watches the validation loss from the first reflow epoch
    on; the best student and its teacher are kept (and written to
    ``out_dir`` when given). ``init`` optionally seeds both networks with
    saved parameters.
    """
    pairs = [_pair(x) for x in dataset]
    vpairs = [_pair(x) for x in valset]
    if not pairs:
        raise ValueError("training set is empty")
    if not vpairs:
        raise ValueError("validation set is empty")
    state = init_state(net_cfg, cfg, dtype)
    if init is not None:
        with torch.no_grad():
            state.student.load_state_dict({k: torch.as_tensor(v) for k, v in init.items()})
            state.teacher.load_state_dict(state.student.state_dict())
    vnoise = validation_noise(vpairs, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    result = FitResult(params={}, teacher_params={}, net_cfg=net_cfg, state=state)

    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        t0 = time.perf_counter()
        losses = []
        for idx in state.rng.permutation(len(pairs)):
            pair = pairs[idx]
            if cfg.augment:
                pair, _ = augment(pair, None, state.rng)
            losses.append(train_step(state, pair[0], pair[1], cfg))
        val = validation_loss(state.student, vpairs, vnoise, cfg)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val,
               "seconds": time.perf_counter() - t0}
        result.history.append(row)
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, row["train_loss"], val, row["seconds"])

        monitored = epoch > cfg.warmup_epochs
        improved = val < state.best_val
        if improved or not result.params or (not monitored):
            result.params = state_params(state.student)
            result.teacher_params = state_params(state.teacher)
            result.best_epoch = epoch
            result.best_val = val
        if monitored:
            if improved:
                state.best_val = val
                state.since_improvement = 0
            else:
                state.since_improvement += 1
        if out is not None:
            _write_outputs(out, result, state, cfg, net_cfg)
        if monitored and state.since_improvement >= cfg.patience:
            log.info("early stop after epoch %d", epoch)
            break
    return result


def _write_outputs(out: Path, result: FitResult, state: TrainState, cfg: TrainConfig, net_cfg):
    extra = {"train": cfg.to_dict(), "epoch": result.best_epoch, "val_loss": result.best_val, "seed": cfg.seed}
    if result.best_epoch == result.history[-1]["epoch"]:
        save_checkpoint(out / "student.frwt", state.student, net_cfg, extra)
        save_checkpoint(out / "teacher.frwt", state.teacher, net_cfg, extra)
    io.write_manifest(out / "manifest.txt", {
        "epoch": result.best_epoch,
        "val_loss": repr(result.best_val),
        "epochs_run": result.history[-1]["epoch"],
        "seed": cfg.seed,
        "network": json.dumps(net_cfg.to_dict(), sort_keys=True),
        "train": json.dumps(cfg.to_dict(), sort_keys=True),
    })
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in result.history:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    io.atomic_write_text(out / "log.csv", buf.getvalue())
