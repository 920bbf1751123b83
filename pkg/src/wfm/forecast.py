"""Ensemble forecast container and its on-disk layout."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import read_tensor, write_tensor


@dataclass
class EnsembleForecast:
    """``members`` (M, T, C, H, W); ``truth`` (T, C, H, W) when available."""

    members: np.ndarray
    truth: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)
    failure_steps: list = field(default_factory=list)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 5 or self.members.shape[0] < 1:
            raise ValueError(f"members must be (M>=1, T, C, H, W), got {self.members.shape}")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.float64)
            if self.truth.shape != self.members.shape[1:]:
                raise ValueError(f"truth {self.truth.shape} does not match members {self.members.shape}")
        if not self.failure_steps:
            self.failure_steps = [None] * self.members.shape[0]

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def n_steps(self) -> int:
        return self.members.shape[1]

    def ensemble_mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def save(self, directory) -> None:
        """``forecast.wfmt`` (M, T, C, H, W), optional ``truth.wfmt``, and ``manifest.txt``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_tensor(directory / "forecast.wfmt", self.members, np.float64)
        if self.truth is not None:
            write_tensor(directory / "truth.wfmt", self.truth, np.float64)
        lines = [f"shape={'x'.join(map(str, self.members.shape))}"]
        lines.append("failure_steps=" + ",".join("-" if s is None else str(s) for s in self.failure_steps))
        for key in sorted(self.metadata):
            lines.append(f"{key}={self.metadata[key]}")
        (directory / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "EnsembleForecast":
        directory = Path(directory)
        members = read_tensor(directory / "forecast.wfmt")
        if members.ndim != 5:
            raise ValueError(f"{directory}: forecast tensor must have rank 5, got {members.ndim}")
        truth_path = directory / "truth.wfmt"
        truth = read_tensor(truth_path) if truth_path.exists() else None
        meta = {}
        manifest = directory / "manifest.txt"
        if manifest.exists():
            for line in manifest.read_text().splitlines():
                if "=" in line:
                    k, v = line.split("=", 1)
                    meta[k] = v
        failures = [None if s in ("-", "") else int(s) for s in meta.pop("failure_steps", "").split(",") if s]
        meta.pop("shape", None)
        return cls(members, truth, meta, failures if len(failures) == members.shape[0] else [])
