"""Forecast verification: VRMSE, fair CRPS, radial spectra and banded spectral coherence."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .forecast import EnsembleForecast

log = logging.getLogger(__name__)

METRIC_EPS = 1e-6
BAND_NAMES = ("low", "mid", "high")


def vrmse(u, v, eps: float = METRIC_EPS):
    """sqrt(<(u - v)^2> / (Var(u) + eps)) over the two trailing axes; ``u`` is the truth."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim < 2:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    mse = ((u - v) ** 2).mean(axis=(-2, -1))
    var = u.var(axis=(-2, -1))
    out = np.sqrt(mse / (var + eps))
    return float(out) if out.ndim == 0 else out


def crps_fair(u, members):
    """Fair ensemble CRPS averaged over the two trailing axes.

    ``members`` has the ensemble on axis 0. The pair term sums over m < m' and
    is divided by M(M - 1).
    """
    u = np.asarray(u, dtype=np.float64)
    members = np.asarray(members, dtype=np.float64)
    if members.shape[1:] != u.shape or u.ndim < 2:
        raise ValueError(f"members {members.shape} do not match truth {u.shape}")
    M = members.shape[0]
    if M < 2:
        raise ValueError("fair CRPS needs at least 2 ensemble members")
    skill = np.abs(members - u).mean(axis=0)
    # sum_{m<m'} |v_m - v_m'| via the sorted-sample identity sum_i (2i - M + 1) v_(i)
    srt = np.sort(members, axis=0)
    ranks = (2 * np.arange(M) - M + 1).reshape((M,) + (1,) * u.ndim)
    pairs = (ranks * srt).sum(axis=0)
    out = (skill - pairs / (M * (M - 1))).mean(axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- spectra

def dft2(x, method: str = "fft") -> np.ndarray:
    """Unnormalized forward 2-D DFT over the two trailing axes.

    ``"direct"`` multiplies by explicit DFT matrices; ``"fft"`` uses numpy's FFT.
    """
    x = np.asarray(x, dtype=np.float64)
    if method == "fft":
        return np.fft.fft2(x)
    if method != "direct":
        raise ValueError(f"unknown DFT method {method!r}")
    H, W = x.shape[-2:]
    fh = np.exp(-2j * np.pi * np.outer(np.arange(H), np.arange(H)) / H)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(W), np.arange(W)) / W)
    return fh @ x @ fw.T


def ring_index(H: int, W: int) -> np.ndarray:
    """Integer ring of every DFT bin: round(|k| * min(H, W)) with |k| in cycles per pixel."""
    ky = np.fft.fftfreq(H)[:, None]
    kx = np.fft.fftfreq(W)[None, :]
    return np.rint(np.sqrt(kx**2 + ky**2) * min(H, W)).astype(int)


def n_rings(H: int, W: int) -> int:
    return min(H, W) // 2


def _ring_mean(values: np.ndarray, rings: np.ndarray, R: int) -> np.ndarray:
    lead = values.shape[:-2]
    flat = values.reshape(lead + (-1,))
    idx = rings.ravel()
    out = np.empty(lead + (R,))
    for r in range(1, R + 1):
        sel = idx == r
        out[..., r - 1] = flat[..., sel].mean(axis=-1)
    return out


def radial_psd(x, method: str = "fft") -> tuple[np.ndarray, np.ndarray]:
    """(rings 1..R, ring-averaged |X|^2); the zero ring and corner bins beyond R are left out."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    if H < 4 or W < 4:
        raise ValueError(f"spectra need H, W >= 4, got {H}x{W}")
    R = n_rings(H, W)
    power = np.abs(dft2(x, method)) ** 2
    return np.arange(1, R + 1), _ring_mean(power, ring_index(H, W), R)


@dataclass
class CoherenceResult:
    rings: np.ndarray
    gamma: np.ndarray      # clamped to [0, 1]
    raw: np.ndarray        # before clamping
    max_excursion: float   # largest amount raw left [0, 1]


def coherence(u, v, eps: float = METRIC_EPS, method: str = "fft") -> CoherenceResult:
    """gamma(k) = (C_uv + eps) / (sqrt(P_u P_v) + eps) per ring, C_uv the ring mean of |U||V|."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    H, W = u.shape[-2:]
    if H < 4 or W < 4:
        raise ValueError(f"spectra need H, W >= 4, got {H}x{W}")
    R = n_rings(H, W)
    rings = ring_index(H, W)
    U, V = dft2(u, method), dft2(v, method)
    pu = _ring_mean(np.abs(U) ** 2, rings, R)
    pv = _ring_mean(np.abs(V) ** 2, rings, R)
    cuv = _ring_mean(np.abs(U) * np.abs(V), rings, R)
    raw = (cuv + eps) / (np.sqrt(pu * pv) + eps)
    gamma = np.clip(raw, 0.0, 1.0)
    excursion = float(np.max(np.abs(raw - gamma))) if raw.size else 0.0
    if excursion > 1e-9:
        log.warning("coherence left [0, 1] by %.3g before clamping", excursion)
    return CoherenceResult(np.arange(1, R + 1), gamma, raw, excursion)


@dataclass(frozen=True)
class BandSpec:
    """Bands over ring index: band i holds rings r with edges[i] < r <= edges[i+1]."""

    edges: tuple[float, ...]
    names: tuple[str, ...] = BAND_NAMES

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError(f"band edges must be strictly increasing, got {self.edges}")
        if e[0] < 0:
            raise ValueError("band edges must be non-negative")
        names = tuple(self.names)
        if len(names) != len(e) - 1:
            names = tuple(f"band{i}" for i in range(len(e) - 1))
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "names", names)

    @classmethod
    def log_spaced(cls, n_rings_: int, n_bands: int = 3) -> "BandSpec":
        """Equal widths in log k between ring 1 and the last ring; ring 1 joins the first band."""
        if n_rings_ < 1:
            raise ValueError("need at least one ring")
        edges = np.exp(np.linspace(0.0, np.log(n_rings_), n_bands + 1))
        edges[0] = 0.0
        edges[-1] = n_rings_
        return cls(tuple(edges), BAND_NAMES if n_bands == 3 else ())

    def __len__(self) -> int:
        return len(self.edges) - 1

    def members(self, rings: np.ndarray) -> list[np.ndarray]:
        rings = np.asarray(rings)
        out = []
        for i, (lo, hi) in enumerate(zip(self.edges, self.edges[1:])):
            sel = (rings > lo) & (rings <= hi)
            if not sel.any():
                raise ValueError(f"band {self.names[i]} ({lo:g}, {hi:g}] contains no rings")
            out.append(sel)
        return out


def band_rmse(gamma, rings, bands: BandSpec) -> np.ndarray:
    """sqrt(mean over the band's rings of (1 - gamma)^2), one value per band (last axis)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    return np.stack([np.sqrt(((1.0 - gamma[..., sel]) ** 2).mean(axis=-1)) for sel in bands.members(rings)],
                    axis=-1)


def coherence_band_rmse(u, v, bands: BandSpec | None = None, eps: float = METRIC_EPS) -> np.ndarray:
    coh = coherence(u, v, eps)
    if bands is None:
        bands = BandSpec.log_spaced(len(coh.rings))
    return band_rmse(coh.gamma, coh.rings, bands)


# ---------------------------------------------------------------- reports

def parse_windows(text: str, n_steps: int) -> list[tuple[int, int]]:
    """'1:8,9:16' -> [(1, 8), (9, 16)]; lead times are 1-based and inclusive."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        a, sep, b = part.partition(":")
        if not sep:
            raise ValueError(f"window {part!r} must look like a:b")
        out.append((int(a), int(b)))
    check_windows(out, n_steps)
    return out


def check_windows(windows, n_steps: int) -> None:
    for a, b in windows:
        if not 1 <= a <= b <= n_steps:
            raise ValueError(f"window {a}:{b} outside lead times 1..{n_steps}")


@dataclass
class MetricsReport:
    vrmse: np.ndarray              # (T, C)
    crps: np.ndarray | None        # (T, C); None for single-member forecasts
    coherence_rmse: np.ndarray     # (T, n_bands, C)
    bands: BandSpec
    windows: list
    max_excursion: float = 0.0
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self._aggregate()

    def _aggregate(self) -> dict:
        agg = {}
        for a, b in self.windows:
            tag = f"{a}:{b}"
            sl = slice(a - 1, b)
            agg[("vrmse", tag)] = self.vrmse[sl].mean(axis=0)
            if self.crps is not None:
                agg[("crps", tag)] = self.crps[sl].mean(axis=0)
            agg[("coherence_rmse", tag)] = self.coherence_rmse[sl].mean(axis=0)
        return agg

    def rows(self) -> list[dict]:
        """Flat rows: metric, channel, lead (1-based), band, window, value."""
        rows = []
        T, C = self.vrmse.shape
        per_t = [("vrmse", self.vrmse)] + ([("crps", self.crps)] if self.crps is not None else [])
        for name, arr in per_t:
            for c in range(C):
                for t in range(T):
                    rows.append(dict(metric=name, channel=c, lead=t + 1, band="", window="", value=arr[t, c]))
        for c in range(C):
            for i, band in enumerate(self.bands.names):
                for t in range(T):
                    rows.append(dict(metric="coherence_rmse", channel=c, lead=t + 1, band=band, window="",
                                     value=self.coherence_rmse[t, i, c]))
        for (name, tag), arr in self.aggregates.items():
            for c in range(C):
                if name == "coherence_rmse":
                    for i, band in enumerate(self.bands.names):
                        rows.append(dict(metric=name, channel=c, lead="", band=band, window=tag,
                                         value=arr[i, c]))
                else:
                    rows.append(dict(metric=name, channel=c, lead="", band="", window=tag, value=arr[c]))
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["metric", "channel", "lead", "band", "window", "value"])
            writer.writeheader()
            for row in self.rows():
                row = dict(row, value=repr(float(row["value"])))
                writer.writerow(row)

    def write_json(self, path) -> None:
        doc = {
            "bands": {"names": list(self.bands.names), "edges": list(self.bands.edges)},
            "windows": [f"{a}:{b}" for a, b in self.windows],
            "max_coherence_excursion": self.max_excursion,
            "rows": [dict(r, value=float(r["value"])) for r in self.rows()],
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def evaluate(forecast: EnsembleForecast, bands: BandSpec | None = None,
             windows: Sequence[tuple[int, int]] | None = None, per_member_coherence: bool = False,
             eps: float = METRIC_EPS) -> MetricsReport:
    """Score every (lead time, channel) and average over lead-time windows.

    VRMSE and coherence use the ensemble mean unless ``per_member_coherence``,
    which averages band RMSE over members instead. CRPS is skipped for M = 1.
    """
    if forecast.truth is None:
        raise ValueError("forecast has no truth to evaluate against")
    members, truth = forecast.members, forecast.truth
    M, T, C, H, W = members.shape
    if T < 1:
        raise ValueError("forecast has no lead times")
    windows = [(1, T)] if windows is None else list(windows)
    check_windows(windows, T)
    if bands is None:
        bands = BandSpec.log_spaced(n_rings(H, W))
    mean = members.mean(axis=0)
    vr = vrmse(truth, mean, eps)
    cr = crps_fair(truth, members) if M >= 2 else None
    if per_member_coherence:
        coh = coherence(np.broadcast_to(truth, members.shape), members, eps)
    else:
        coh = coherence(truth, mean, eps)
    rm = band_rmse(coh.gamma, coh.rings, bands)  # (..., T, C, n_bands)
    if per_member_coherence:
        rm = rm.mean(axis=0)
    return MetricsReport(np.asarray(vr), None if cr is None else np.asarray(cr), np.moveaxis(rm, -1, 1),
                         bands, windows, coh.max_excursion)


def load_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
