"""Mini-batch flow-matching training with AdamW and a warmup + cosine schedule."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .field import Trajectory
from .flow import LOSS_EPS, LossBreakdown, interpolate, scale_loss, target_velocity, total_loss
from .net.unet import VelocityNet
from .rng import stream
from .wavelet import FilterBank, WaveletPyramid, dwt_multiscale, make_filter_bank

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    eta_min: float = 1e-7
    seed: int = 0
    wavelet: str = "db2"
    scale_weights: tuple[float, ...] | None = None  # None -> lambda_j = 1
    loss_eps: float = LOSS_EPS
    per_subband_loss: bool = False
    max_val_windows: int = 64
    max_probe_windows: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 3e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "OptState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **hyper)

    @classmethod
    def from_config(cls, params: dict, cfg: TrainConfig) -> "OptState":
        return cls.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay, beta1=cfg.betas[0],
                              beta2=cfg.betas[1], eps=cfg.adam_eps)


def adamw_step(params: dict, grads: dict, state: OptState, lr: float | None = None) -> dict:
    """One decoupled-weight-decay Adam update, applied in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    lr = state.lr if lr is None else lr
    for k, g in grads.items():
        if k in params and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)
    return params


def clip_grad_norm(grads: dict, max_norm: float, keys=None) -> tuple[dict, float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    keys = list(grads) if keys is None else list(keys)
    norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys))
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: (g * factor if k in keys else g) for k, g in grads.items()}
    return grads, norm


def cosine_lr(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> lr over ``warmup_epochs``, then cosine decay to ``eta_min``.

    Fractional epochs are allowed so the schedule can advance per step.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    W = cfg.warmup_epochs
    if epoch < W:
        return cfg.lr * epoch / W
    progress = (epoch - W) / (cfg.epochs - W)
    return cfg.eta_min + 0.5 * (cfg.lr - cfg.eta_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- data

@dataclass
class Batch:
    context: np.ndarray  # (B, L, C, H, W), oldest first
    current: np.ndarray  # (B, C, H, W)
    target: np.ndarray   # (B, C, H, W)
    kappa: np.ndarray    # (B, K)

    def __len__(self) -> int:
        return self.current.shape[0]


class WindowDataset:
    """Sliding windows (x^{t-L..t-1}, x^t, x^{t+1}, kappa) over standardized trajectories."""

    def __init__(self, trajectories: Sequence[Trajectory], context_len: int = 3):
        if not trajectories:
            raise ValueError("empty dataset")
        self.trajectories = list(trajectories)
        self.context_len = context_len
        self.index = [
            (i, t)
            for i, tr in enumerate(self.trajectories)
            for t in range(context_len, len(tr) - 1)
        ]
        if not self.index:
            raise ValueError(f"trajectories too short for context {context_len} (need >= {context_len + 2} frames)")

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, indices) -> Batch:
        L = self.context_len
        ctx, cur, tgt, kap = [], [], [], []
        for k in indices:
            i, t = self.index[int(k)]
            frames = self.trajectories[i].frames
            ctx.append(frames[t - L:t])
            cur.append(frames[t])
            tgt.append(frames[t + 1])
            kap.append(self.trajectories[i].params.as_array())
        return Batch(np.stack(ctx), np.stack(cur), np.stack(tgt), np.stack(kap))


# ---------------------------------------------------------------- steps

def _draws(rng: np.random.Generator, template: WaveletPyramid, B: int):
    # tau in [0, 1); one noise draw shared by interpolant and target velocity
    tau = rng.random(B)
    noise = WaveletPyramid([rng.standard_normal(s.shape) for s in template.scales], template.filter_id)
    return tau, noise


def flow_loss(net: VelocityNet, batch: Batch, bank: FilterBank, tau: np.ndarray, noise: WaveletPyramid,
              weights=None, eps: float = LOSS_EPS, per_subband: bool = False, with_grad: bool = False):
    """Multi-scale loss for one batch with given (tau, noise); optionally parameter gradients."""
    J = net.cfg.n_scales
    current = dwt_multiscale(batch.current, bank, J)
    target = dwt_multiscale(batch.target, bank, J)
    state = interpolate(target, noise, tau)
    u = target_velocity(target, noise)
    kappa = batch.kappa if net.cfg.n_kappa else None
    context = batch.context if net.cfg.context_len else None
    preds, cache = net.forward(current.scales, state.scales, tau, kappa, context)
    per_scale, out_grads = [], []
    for j in range(J):
        if with_grad:
            l, g = scale_loss(preds[j], u.scales[j], eps, per_subband, return_grad=True)
            out_grads.append(g)
        else:
            l = scale_loss(preds[j], u.scales[j], eps, per_subband)
        if not math.isfinite(l):
            raise FloatingPointError(f"non-finite loss at scale {j + 1}")
        per_scale.append(l)
    breakdown = total_loss(per_scale, weights)
    if not with_grad:
        return breakdown, None
    norm = breakdown.weights / breakdown.weights.sum()
    grads = net.backward(cache, [w * g for w, g in zip(norm, out_grads)])
    return breakdown, {k: grads[k] for k in net.params}


def train_step(net: VelocityNet, batch: Batch, opt: OptState, cfg: TrainConfig, bank: FilterBank,
               rng: np.random.Generator, lr: float | None = None) -> LossBreakdown:
    """Draw (tau, eps), compute the loss and its gradient, clip, and apply AdamW."""
    template = dwt_multiscale(batch.target[:1], bank, net.cfg.n_scales)
    template = WaveletPyramid([np.empty((len(batch),) + s.shape[1:]) for s in template.scales], bank.name)
    tau, noise = _draws(rng, template, len(batch))
    breakdown, grads = flow_loss(net, batch, bank, tau, noise, cfg.scale_weights, cfg.loss_eps,
                                 cfg.per_subband_loss, with_grad=True)
    grads, _ = clip_grad_norm(grads, cfg.clip_norm)
    adamw_step(net.params, grads, opt, lr)
    return breakdown


class FrozenDraws:
    """Fixed (tau, noise) per window so repeated evaluations are comparable."""

    def __init__(self, dataset: WindowDataset, windows: Sequence[int], bank: FilterBank, J: int, seed: int):
        self.dataset = dataset
        self.windows = list(windows)
        self.bank = bank
        shape = dataset.batch([0]).current.shape
        self.tau = np.empty(len(self.windows))
        self.noise = []
        for n, w in enumerate(self.windows):
            rng = stream(seed, 2, int(w))
            self.tau[n] = rng.random()
            self.noise.append([rng.standard_normal((1, shape[1], 4, shape[2] >> j, shape[3] >> j))
                               for j in range(1, J + 1)])

    def evaluate(self, net: VelocityNet, cfg: TrainConfig, batch_size: int = 16) -> LossBreakdown:
        totals = None
        count = 0
        for start in range(0, len(self.windows), batch_size):
            sl = slice(start, start + batch_size)
            idx = self.windows[sl]
            batch = self.dataset.batch(idx)
            noise = WaveletPyramid([np.concatenate([nz[j] for nz in self.noise[sl]])
                                    for j in range(net.cfg.n_scales)], self.bank.name)
            b, _ = flow_loss(net, batch, self.bank, self.tau[sl], noise, cfg.scale_weights, cfg.loss_eps,
                             cfg.per_subband_loss)
            part = b.per_scale * len(idx)
            totals = part if totals is None else totals + part
            count += len(idx)
        return total_loss(totals / count, cfg.scale_weights)


@dataclass
class FitResult:
    curve: list[dict]
    best_params: dict
    best_epoch: int
    best_val: float
    final_val: float
    probe_initial: LossBreakdown
    probe_final: LossBreakdown
    steps: int
    step_losses: list = field(default_factory=list)


def _spread(n: int, cap: int) -> list[int]:
    if n <= cap:
        return list(range(n))
    return [int(round(i * (n - 1) / (cap - 1))) for i in range(cap)] if cap > 1 else [0]


def fit(net: VelocityNet, train: WindowDataset, val: WindowDataset, cfg: TrainConfig,
        out_dir=None, checkpoint_meta: dict | None = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs; keep the parameters with the lowest validation loss.

    The learning rate follows :func:`cosine_lr` evaluated at fractional epochs
    (per step). Shuffling, (tau, eps) draws and validation draws are all keyed
    off ``cfg.seed``.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("empty dataset")
    bank = make_filter_bank(cfg.wavelet)
    J = net.cfg.n_scales
    opt = OptState.from_config(net.params, cfg)
    val_draws = FrozenDraws(val, _spread(len(val), cfg.max_val_windows), bank, J, cfg.seed + 1)
    probe = FrozenDraws(train, _spread(len(train), cfg.max_probe_windows), bank, J, cfg.seed + 2)
    probe_initial = probe.evaluate(net, cfg)

    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    curve, step_losses = [], []
    best = (math.inf, -1, None)
    step = 0
    for epoch in range(cfg.epochs):
        perm = stream(cfg.seed, 0, epoch).permutation(len(train))
        acc = np.zeros(J)
        seen = 0
        for k in range(steps_per_epoch):
            idx = perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            lr = cosine_lr(epoch + k / steps_per_epoch, cfg)
            b = train_step(net, train.batch(idx), opt, cfg, bank, stream(cfg.seed, 1, step), lr)
            acc += b.per_scale * len(idx)
            seen += len(idx)
            step_losses.append(b.total)
            step += 1
        train_loss = total_loss(acc / seen, cfg.scale_weights)
        val_loss = val_draws.evaluate(net, cfg)
        row = {"epoch": epoch, "lr": cosine_lr(epoch, cfg), "train_total": train_loss.total,
               "val_total": val_loss.total}
        for j in range(J):
            row[f"l{j + 1}"] = float(train_loss.per_scale[j])
        curve.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss.total, val_loss.total)
        if val_loss.total < best[0]:
            best = (val_loss.total, epoch, {k: v.copy() for k, v in net.params.items()})
    probe_final = probe.evaluate(net, cfg)
    result = FitResult(curve, best[2], best[1], best[0], curve[-1]["val_total"], probe_initial, probe_final,
                       step, step_losses)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_curve(out_dir / "loss.csv", curve)
        meta = dict(checkpoint_meta or {})
        meta.update(step=step, best_epoch=best[1], wavelet=cfg.wavelet, seed=cfg.seed)
        save_checkpoint(out_dir / "checkpoint", VelocityNet(net.cfg, result.best_params), meta)
    return result


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(curve[0].keys()))
        writer.writeheader()
        for row in curve:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
