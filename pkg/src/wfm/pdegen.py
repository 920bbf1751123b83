"""Toy PDE trajectories on a periodic grid: heat (exact spectral) and Gray-Scott (explicit FD)."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .field import ParamVector, Standardizer, Trajectory, standardize
from .rng import stream
from .tensorio import read_tensor, write_tensor
from .wavelet import check_dyadic

log = logging.getLogger(__name__)


def _check_grid(grid) -> tuple[int, int]:
    H, W = (int(g) for g in grid)
    if H < 4 or W < 4 or H % 2 or W % 2:
        raise ValueError(f"grid must be even and at least 4x4, got {H}x{W}")
    return H, W


def bandlimited_noise(grid, seed: int, k_max: float | None = None) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian field keeping only modes with |k| <= k_max (default H/8)."""
    H, W = _check_grid(grid)
    k_max = min(H, W) / 8 if k_max is None else k_max
    white = stream(seed, 0xB1D).standard_normal((H, W))
    ky = np.fft.fftfreq(H, 1.0 / H)[:, None]
    kx = np.fft.fftfreq(W, 1.0 / W)[None, :]
    keep = (kx**2 + ky**2 <= k_max**2) & ((kx != 0) | (ky != 0))
    field = np.fft.ifft2(np.fft.fft2(white) * keep).real
    return field / field.std()


def _laplacian(u: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Periodic 5-point Laplacian along the last two axes (rows = y, cols = x)."""
    return ((np.roll(u, 1, -1) - 2 * u + np.roll(u, -1, -1)) / dx**2
            + (np.roll(u, 1, -2) - 2 * u + np.roll(u, -1, -2)) / dy**2)


# ---------------------------------------------------------------- heat

@dataclass(frozen=True)
class HeatSpec:
    """u_t = nu * lap(u) on the unit torus; ``n_steps`` frames spaced ``dt`` apart (frame 0 = initial state)."""

    grid: tuple[int, int] = (32, 32)
    nu: float = 1e-3
    dt: float = 0.01
    n_steps: int = 64
    seed: int = 0
    integrator: str = "spectral"  # or "fd": explicit Euler with the 5-point Laplacian

    def __post_init__(self):
        _check_grid(self.grid)
        if self.nu < 0:
            raise ValueError("diffusivity must be non-negative")
        if not self.dt > 0 or self.n_steps < 1:
            raise ValueError("need dt > 0 and n_steps >= 1")
        if self.integrator not in ("spectral", "fd"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.integrator == "fd":
            H, W = self.grid
            if self.nu * self.dt * (W**2 + H**2) > 0.5:
                raise ValueError("explicit step violates nu*dt*(1/dx^2 + 1/dy^2) <= 1/2")


def heat_decay(grid, nu: float, dt: float) -> np.ndarray:
    """Per-mode factor exp(-nu (2 pi)^2 |k|^2 dt) in numpy FFT layout."""
    H, W = grid
    ky = np.fft.fftfreq(H, 1.0 / H)[:, None]
    kx = np.fft.fftfreq(W, 1.0 / W)[None, :]
    return np.exp(-nu * (2 * np.pi) ** 2 * (kx**2 + ky**2) * dt)


def heat_step(u: np.ndarray, nu: float, dt: float) -> np.ndarray:
    """Advance (..., H, W) fields by ``dt`` exactly in the discrete Fourier basis."""
    decay = heat_decay(u.shape[-2:], nu, dt)
    return np.fft.ifft2(np.fft.fft2(u) * decay).real


def heat_trajectory(spec: HeatSpec, initial: np.ndarray | None = None) -> Trajectory:
    H, W = spec.grid
    u = bandlimited_noise(spec.grid, spec.seed) if initial is None else np.asarray(initial, dtype=np.float64)
    if u.shape != (H, W):
        raise ValueError(f"initial condition shape {u.shape} != grid {spec.grid}")
    frames = np.empty((spec.n_steps, 1, H, W))
    frames[0, 0] = u
    if spec.integrator == "spectral":
        decay = heat_decay(spec.grid, spec.nu, spec.dt)
        u_hat = np.fft.fft2(u)
        for t in range(1, spec.n_steps):
            u_hat = u_hat * decay
            frames[t, 0] = np.fft.ifft2(u_hat).real
    else:
        for t in range(1, spec.n_steps):
            u = u + spec.nu * spec.dt * _laplacian(u, 1.0 / W, 1.0 / H)
            frames[t, 0] = u
    return Trajectory(frames, spec.dt, ParamVector((spec.nu,), ("nu",)))


# ---------------------------------------------------------------- Gray-Scott

@dataclass(frozen=True)
class ReactionDiffusionSpec:
    """Gray-Scott on a periodic grid with unit pixel spacing.

    u_t = Du lap(u) - u v^2 + F (1 - u);  v_t = Dv lap(v) + u v^2 - (F + k) v.
    Frames are stored every ``substeps`` explicit steps.
    """

    grid: tuple[int, int] = (32, 32)
    d_u: float = 0.16
    d_v: float = 0.08
    feed: float = 0.030
    kill: float = 0.060
    dt: float = 1.0
    n_steps: int = 64
    substeps: int = 20
    seed: int = 0

    def __post_init__(self):
        _check_grid(self.grid)
        if not (self.d_u > 0 and self.d_v > 0):
            raise ValueError("diffusivities must be positive")
        if not self.dt > 0 or self.n_steps < 1 or self.substeps < 1:
            raise ValueError("need dt > 0, n_steps >= 1, substeps >= 1")
        bound = max(self.d_u, self.d_v) * self.dt * 2.0
        if bound > 0.5:
            raise ValueError(f"explicit step unstable: D*dt*(1/dx^2 + 1/dy^2) = {bound:.3g} > 1/2")


def grayscott_initial(spec: ReactionDiffusionSpec) -> np.ndarray:
    """u = 1 - v/2, v = clip(noise, 0, 1) / 4 from band-limited noise scaled to unit peak."""
    n = bandlimited_noise(spec.grid, spec.seed)
    p = np.clip(n / np.abs(n).max(), 0.0, 1.0)
    return np.stack([1.0 - 0.5 * p, 0.25 * p])


def grayscott_trajectory(spec: ReactionDiffusionSpec, initial: np.ndarray | None = None) -> Trajectory:
    H, W = spec.grid
    state = grayscott_initial(spec) if initial is None else np.array(initial, dtype=np.float64)
    if state.shape != (2, H, W):
        raise ValueError(f"initial state must be (2, {H}, {W}), got {state.shape}")
    u, v = state
    frames = np.empty((spec.n_steps, 2, H, W))
    frames[0] = state
    for t in range(1, spec.n_steps):
        for _ in range(spec.substeps):
            uvv = u * v * v
            u, v = (u + spec.dt * (spec.d_u * _laplacian(u, 1.0, 1.0) - uvv + spec.feed * (1.0 - u)),
                    v + spec.dt * (spec.d_v * _laplacian(v, 1.0, 1.0) + uvv - (spec.feed + spec.kill) * v))
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise FloatingPointError(f"Gray-Scott state became non-finite at frame {t}")
        frames[t, 0], frames[t, 1] = u, v
    return Trajectory(frames, spec.dt * spec.substeps, ParamVector((spec.feed, spec.kill), ("F", "k")))


# ---------------------------------------------------------------- datasets

def generate(spec) -> Trajectory:
    if isinstance(spec, HeatSpec):
        return heat_trajectory(spec)
    if isinstance(spec, ReactionDiffusionSpec):
        return grayscott_trajectory(spec)
    raise TypeError(f"unknown spec type {type(spec).__name__}")


@dataclass
class Dataset:
    train: list[Trajectory]
    val: list[Trajectory]
    standardizer: Standardizer
    meta: dict

    def standardized(self) -> tuple[list[Trajectory], list[Trajectory]]:
        def apply(trs):
            return [Trajectory(standardize(tr.frames, self.standardizer), tr.dt, tr.params) for tr in trs]
        return apply(self.train), apply(self.val)


def split_counts(n: int, train_frac: float) -> tuple[int, int]:
    if n < 2:
        raise ValueError("need at least 2 trajectories")
    if not 0 < train_frac < 1:
        raise ValueError("train fraction must lie in (0, 1)")
    n_train = min(max(int(round(n * train_frac)), 1), n - 1)
    return n_train, n - n_train


def make_dataset(specs: Sequence, out_dir, train_frac: float = 0.8, scales: int = 3,
                 dtype=np.float32) -> Path:
    """Generate every spec, write ``traj_XXXX.wfmt`` files and ``manifest.txt``.

    The first ``round(n * train_frac)`` trajectories form the train split. The
    standardizer is fitted on the train split exactly as stored on disk, so
    refitting on reloaded data reproduces it bit-for-bit.
    """
    specs = list(specs)
    n_train, _ = split_counts(len(specs), train_frac)
    for spec in specs:
        check_dyadic(*spec.grid, scales)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajs, lines = [], []
    for i, spec in enumerate(specs):
        tr = generate(spec)
        name = f"traj_{i:04d}.wfmt"
        write_tensor(out_dir / name, tr.frames, dtype)
        stored = read_tensor(out_dir / name)
        trajs.append(stored)
        split = "train" if i < n_train else "val"
        kappa = ",".join(repr(v) for v in tr.params.values)
        lines.append(f"traj {name} {split} dt={tr.dt!r} kappa={kappa} names={','.join(tr.params.names)}")
        lines.append(f"spec {name} {type(spec).__name__} " +
                     " ".join(f"{k}={v!r}".replace(" ", "") for k, v in asdict(spec).items()))
        log.info("wrote %s (%s)", name, split)
    std = Standardizer.fit(trajs[:n_train])
    header = [
        f"n_traj={len(specs)}",
        f"n_train={n_train}",
        f"n_val={len(specs) - n_train}",
        f"scales={scales}",
        "mean=" + ",".join(repr(float(v)) for v in std.mean),
        "std=" + ",".join(repr(float(v)) for v in std.std),
    ]
    (out_dir / "manifest.txt").write_text("\n".join(header + lines) + "\n")
    return out_dir


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    meta, train, val = {}, [], []
    for line in manifest.read_text().splitlines():
        if line.startswith("traj "):
            _, name, split, *rest = line.split()
            kv = dict(item.split("=", 1) for item in rest)
            params = ParamVector(_floats(kv["kappa"]), tuple(n for n in kv["names"].split(",") if n))
            tr = Trajectory(read_tensor(directory / name), float(kv["dt"]), params)
            (train if split == "train" else val).append(tr)
        elif line.startswith("spec "):
            continue
        elif "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    if not train or not val:
        raise ValueError(f"{directory}: dataset needs non-empty train and val splits")
    std = Standardizer(np.array(_floats(meta["mean"])), np.array(_floats(meta["std"])))
    return Dataset(train, val, std, meta)
