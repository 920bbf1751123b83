"""Conditional flow matching in wavelet space: paths, losses, sampler, rollout."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .field import Standardizer
from .forecast import EnsembleForecast
from .rng import stream
from .wavelet import FilterBank, WaveletPyramid, dwt_multiscale, idwt_multiscale

log = logging.getLogger(__name__)

LOSS_EPS = 1e-4

# velocity(current_scales, state_scales, tau[B], kappa, context) -> list of per-scale arrays
VelocityField = Callable[..., Sequence[np.ndarray]]


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 50
    seed: int = 0
    ensemble: int = 8

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.ensemble < 1:
            raise ValueError("ensemble size must be >= 1")


@dataclass
class FlowSample:
    tau: np.ndarray
    noise: WaveletPyramid
    target: WaveletPyramid
    interpolant: WaveletPyramid
    velocity: WaveletPyramid


@dataclass
class LossBreakdown:
    per_scale: np.ndarray
    weights: np.ndarray
    total: float

    def as_dict(self) -> dict:
        out = {"total": self.total}
        for j, v in enumerate(self.per_scale, start=1):
            out[f"l{j}"] = float(v)
        return out


def sample_noise(template: WaveletPyramid, seed: int, *path: int) -> WaveletPyramid:
    """Standard normal pyramid; scale j draws from its own stream ``(seed, *path, j)``."""
    return WaveletPyramid(
        [stream(seed, *path, j).standard_normal(s.shape) for j, s in enumerate(template.scales, start=1)],
        template.filter_id,
    )


def _tau_like(tau, arr: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim == 0:
        return tau
    return tau.reshape(tau.shape + (1,) * (arr.ndim - tau.ndim))


def interpolate(target: WaveletPyramid, noise: WaveletPyramid, tau) -> WaveletPyramid:
    """tau * target + (1 - tau) * noise at every scale; tau is a scalar or one value per batch row."""
    tau_arr = np.asarray(tau, dtype=np.float64)
    if np.any(tau_arr < 0) or np.any(tau_arr > 1):
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return target.zip_map(noise, lambda t, e: _tau_like(tau_arr, t) * t + (1.0 - _tau_like(tau_arr, t)) * e)


def target_velocity(target: WaveletPyramid, noise: WaveletPyramid) -> WaveletPyramid:
    return target - noise


def make_flow_sample(target: WaveletPyramid, noise: WaveletPyramid, tau) -> FlowSample:
    return FlowSample(
        tau=np.asarray(tau, dtype=np.float64),
        noise=noise,
        target=target,
        interpolant=interpolate(target, noise, tau),
        velocity=target_velocity(target, noise),
    )


def scale_loss(pred: np.ndarray, target: np.ndarray, eps: float = LOSS_EPS, per_subband: bool = False,
               return_grad: bool = False):
    """Variance-normalized squared error for one scale, arrays (B, C, 4, H_j, W_j).

    Each (b, c) slice contributes <(pred - target)^2> / (Var(target) + eps), with
    averages taken jointly over the sub-band and spatial axes; the result is the
    mean over slices. ``per_subband`` instead forms one ratio per sub-band and
    averages the four.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 5:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}")
    axes = (3, 4) if per_subband else (2, 3, 4)
    n = int(np.prod([pred.shape[a] for a in axes]))
    diff = pred - target
    var = target.var(axis=axes, keepdims=True)
    denom = var + eps
    ratios = (diff**2).mean(axis=axes, keepdims=True) / denom
    loss = float(ratios.mean())
    if not return_grad:
        return loss
    n_ratios = ratios.size
    grad = 2.0 * diff / (n * denom * n_ratios)
    return loss, grad


def total_loss(per_scale, weights=None) -> LossBreakdown:
    per_scale = np.asarray(per_scale, dtype=np.float64)
    if per_scale.ndim != 1 or per_scale.size < 1:
        raise ValueError("need at least one per-scale loss")
    weights = np.ones_like(per_scale) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != per_scale.shape:
        raise ValueError(f"{weights.size} weights for {per_scale.size} scales")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    norm = weights / weights.sum()
    return LossBreakdown(per_scale, weights, float(np.sum(norm * per_scale)))


def euler_sample(net: VelocityField, current: WaveletPyramid, noise: WaveletPyramid, n_steps: int,
                 kappa=None, context=None) -> WaveletPyramid:
    """Integrate dw/dtau = u(w_t, w, tau) from tau = 0 (noise) to 1 with N uniform Euler steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    current.check_compatible(noise)
    J = current.J
    B = current.scales[0].shape[0]
    dtau = 1.0 / n_steps
    state = [s.copy() for s in noise.scales]
    for n in range(n_steps):
        tau = np.full(B, n / n_steps)
        vel = net(current.scales, state, tau, kappa, context)
        if len(vel) != J:
            raise ValueError(f"velocity field returned {len(vel)} scales, expected {J}")
        for j in range(J):
            v = np.asarray(vel[j], dtype=np.float64)
            if v.shape != state[j].shape:
                raise ValueError(f"scale {j + 1}: velocity shape {v.shape} != state {state[j].shape}")
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite velocity at Euler step {n}, tau={n / n_steps:.4f}, "
                                         f"scale {j + 1}")
            state[j] = state[j] + dtau * v
    return WaveletPyramid(state, current.filter_id)


def member_seeds(seed: int, m: int) -> list[int]:
    """Per-member noise seeds derived from one root seed."""
    return [int(np.random.SeedSequence(int(seed), spawn_key=(i,)).generate_state(1)[0]) for i in range(m)]


def rollout(net: VelocityField, initial: np.ndarray, steps: int, cfg: SamplerConfig, bank: FilterBank, J: int,
            kappa=None, standardizer: Standardizer | None = None, seeds: Sequence[int] | None = None,
            truth: np.ndarray | None = None) -> EnsembleForecast:
    """Autoregressive ensemble rollout from L+1 standardized frames (L+1, C, H, W).

    Each step: DWT of the current state, Euler sampling from fresh wavelet
    noise, IDWT back to the grid, then the context window shifts by one.
    Members use noise streams ``(seed_m, step, scale)`` and are run one at a
    time so results do not depend on batching.
    """
    initial = np.asarray(initial, dtype=np.float64)
    if initial.ndim != 4 or initial.shape[0] < 1:
        raise ValueError(f"initial frames must be (L+1, C, H, W), got {initial.shape}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    seeds = list(seeds) if seeds is not None else member_seeds(cfg.seed, cfg.ensemble)
    M = len(seeds)
    L = initial.shape[0] - 1
    out = np.full((M, steps) + initial.shape[1:], np.nan)
    failures: list = [None] * M
    kap = None if kappa is None else np.asarray(kappa, dtype=np.float64).reshape(1, -1)
    for m, seed in enumerate(seeds):
        window = initial.copy()
        for t in range(steps):
            current = dwt_multiscale(window[-1][None], bank, J)
            context = window[:-1][None] if L else None
            noise = sample_noise(current, seed, t)
            try:
                pred = euler_sample(net, current, noise, cfg.n_steps, kap, context)
            except FloatingPointError as err:
                log.warning("member %d aborted at step %d: %s", m, t, err)
                failures[m] = t
                break
            frame = idwt_multiscale(pred, bank)[0]
            if not np.all(np.isfinite(frame)):
                log.warning("member %d produced a non-finite state at step %d", m, t)
                failures[m] = t
                break
            out[m, t] = frame
            window = np.concatenate([window[1:], frame[None]], axis=0)
    meta = {
        "seeds": ",".join(map(str, seeds)),
        "n_steps": cfg.n_steps,
        "ensemble": M,
        "wavelet": bank.name,
        "J": J,
    }
    if standardizer is not None:
        meta["mean"] = ",".join(repr(float(v)) for v in standardizer.mean)
        meta["std"] = ",".join(repr(float(v)) for v in standardizer.std)
    return EnsembleForecast(out, truth, meta, failures)
