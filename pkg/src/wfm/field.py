"""Grid value types and per-channel standardization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Field:
    """One physical state, shape (C, H, W), float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"Field needs shape (C, H, W) with all dims >= 1, got {arr.shape}")
        _check_finite(arr, "Field")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ParamVector:
    """Static physical constants (kappa) with names."""

    values: tuple[float, ...] = ()
    names: tuple[str, ...] = ()

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        names = tuple(self.names)
        if len(values) != len(names):
            raise ValueError(f"{len(values)} values but {len(names)} names")
        if not all(np.isfinite(values)):
            raise ValueError("ParamVector values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Trajectory:
    """Frames (T, C, H, W) sampled every ``dt``."""

    frames: np.ndarray
    dt: float
    params: ParamVector = field(default_factory=ParamVector)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4 or min(frames.shape) < 1:
            raise ValueError(f"Trajectory frames need shape (T, C, H, W), got {frames.shape}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        _check_finite(frames, "Trajectory")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, t) -> np.ndarray:
        return self.frames[t]


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError(f"mean/std shapes differ: {mean.shape} vs {std.shape}")
        if np.any(~(std > 0)):
            raise ValueError("standard deviations must be positive")
        _check_finite(mean, "Standardizer mean")
        _check_finite(std, "Standardizer std")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def __len__(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def fit(cls, data: np.ndarray | Sequence[np.ndarray]) -> "Standardizer":
        """Per-channel statistics over every frame and grid point.

        ``data`` is one array or a sequence of arrays shaped (..., C, H, W).
        """
        if isinstance(data, np.ndarray):
            data = [data]
        stacked = [np.asarray(d, dtype=np.float64) for d in data]
        n_channels = stacked[0].shape[-3]
        flat = np.concatenate(
            [np.moveaxis(d, -3, 0).reshape(n_channels, -1) for d in stacked], axis=1
        )
        mean = flat.mean(axis=1)
        std = np.sqrt(((flat - mean[:, None]) ** 2).mean(axis=1))
        return cls(mean, std)

    def _broadcast(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if x.ndim < 3 or x.shape[-3] != len(self):
            raise ValueError(f"expected {len(self)} channels on axis -3, got shape {x.shape}")
        return self.mean[:, None, None], self.std[:, None, None]


def standardize(x, s: Standardizer) -> np.ndarray:
    """(x - mean[c]) / std[c] along the channel axis (-3)."""
    x = np.asarray(x.data if isinstance(x, Field) else x, dtype=np.float64)
    mean, std = s._broadcast(x)
    return (x - mean) / std


def destandardize(x, s: Standardizer) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Field) else x, dtype=np.float64)
    mean, std = s._broadcast(x)
    return x * std + mean
