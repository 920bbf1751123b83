"""Central finite-difference check of :meth:`VelocityNet.backward`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import stream
from .unet import NetConfig, VelocityNet

# |fd - analytic| / max(|fd|, |analytic|, DENOM_FLOOR); the floor keeps entries whose
# true gradient is zero (e.g. biases feeding a normalization) from dividing FD noise by ~0
DENOM_FLOOR = 1e-6


@dataclass
class GradEntry:
    name: str
    index: tuple
    finite_diff: float
    analytic: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradEntry] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> GradEntry | None:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def n_params(self) -> int:
        return sum(not e.name.startswith("z") for e in self.entries)

    def summary(self) -> str:
        w = self.worst
        status = "PASS" if self.passed else "FAIL"
        where = f"{w.name}{list(w.index)}" if w else "-"
        return (f"{status}: {len(self.entries)} entries ({self.n_params()} parameters), "
                f"max relative error {self.max_rel_error:.3e} at {where} (tol {self.tol:g})")


def rel_error(fd: float, an: float, floor: float = DENOM_FLOOR) -> float:
    return abs(fd - an) / max(abs(fd), abs(an), floor)


def grad_check(cfg: NetConfig, seed: int = 0, n_params: int = 200, n_inputs: int = 20, h: float = 1e-5,
               tol: float = 1e-4, grid: int = 8, batch: int = 2, perturb: float = 0.1) -> GradCheckReport:
    """Compare backward() against central differences of a random linear functional of the outputs.

    Parameters are perturbed away from their initial values first, because the
    zero-initialized heads would otherwise make every upstream gradient zero.
    The analytic gradient comes from the float64 network. The central
    differences are evaluated on an extended-precision copy with the same
    values, so rounding in the reference stays far below the tolerance even
    for entries with tiny gradients.
    """
    rng = stream(seed, 0x6C)
    net = VelocityNet(cfg, seed=seed)
    for name in net.params:
        net.params[name] = net.params[name] + perturb * rng.standard_normal(net.params[name].shape)
    J, C = cfg.n_scales, cfg.n_channels
    shapes = [(batch, C, 4, grid >> j, grid >> j) for j in range(J)]
    current = [rng.standard_normal(s) for s in shapes]
    state = [rng.standard_normal(s) for s in shapes]
    tau = rng.random(batch)
    kappa = rng.standard_normal((batch, cfg.n_kappa)) if cfg.n_kappa else None
    context = rng.standard_normal((batch, cfg.context_len, C, 2 * grid, 2 * grid)) if cfg.context_len else None
    proj = [rng.standard_normal(s) for s in shapes]

    _, cache = net.forward(current, state, tau, kappa, context)
    grads = net.backward(cache, proj)

    ext = VelocityNet(cfg, {k: v.astype(np.longdouble) for k, v in net.params.items()})
    cur_x = [c.astype(np.longdouble) for c in current]
    st_x = [s.astype(np.longdouble) for s in state]

    def objective() -> list[np.ndarray]:
        return ext(cur_x, st_x, tau, kappa, context)

    report = GradCheckReport(tol=tol)
    names = list(net.params)
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        arr = ext.params[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        report.entries.append(_probe(arr, idx, name, grads[name][idx], objective, proj, h))
    # input pyramid entries: state first C channels are the current state, rest the flow state
    for _ in range(n_inputs):
        j = int(rng.integers(J))
        b, c, s, y, x = (int(rng.integers(n)) for n in shapes[j])
        which = int(rng.integers(2))
        arr = (cur_x, st_x)[which][j]
        an = grads[f"z{j + 1}"][b, c + which * C, s, y, x]
        report.entries.append(_probe(arr, (b, c, s, y, x), f"z{j + 1}", an, objective, proj, h))
    return report


def _probe(arr: np.ndarray, idx: tuple, name: str, analytic: float, objective, proj, h: float) -> GradEntry:
    old = arr[idx]
    arr[idx] = old + h
    op = objective()
    arr[idx] = old - h
    om = objective()
    arr[idx] = old
    # difference the outputs before projecting: summing first would cancel two large totals
    fd = float(sum(np.sum((a - b) * p) for a, b, p in zip(op, om, proj))) / (2 * h)
    return GradEntry(name, idx, fd, float(analytic), rel_error(fd, float(analytic)))
