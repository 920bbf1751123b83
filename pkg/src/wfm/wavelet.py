"""Orthonormal Daubechies filter banks and periodic 2-D multi-scale DWT.

Arrays carry any leading batch/channel axes; transforms act on the last two
(H, W). A pyramid stores, for every scale j = 1..J, an array of shape
(..., C, 4, H/2^j, W/2^j) with sub-bands ordered (LL, LH, HL, HH).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import read_tensor, write_tensor

SUBBANDS = ("LL", "LH", "HL", "HH")

# Daubechies low-pass taps (sum = sqrt(2)), 22 significant digits.
_LOWPASS = {
    1: (0.7071067811865475244008, 0.7071067811865475244008),
    2: (
        0.4829629131445341433749,
        0.8365163037378079055753,
        0.2241438680420133810260,
        -0.1294095225512603811744,
    ),
    4: (
        0.2303778133088965008633,
        0.7148465705529156470899,
        0.6308807679298589078817,
        -0.02798376941685985421141,
        -0.1870348117190930840796,
        0.03084138183556076362722,
        0.03288301166688519973541,
        -0.01059740178506903210488,
    ),
    6: (
        0.1115407433501094636213,
        0.4946238903984530856772,
        0.7511339080210953506789,
        0.3152503517091976290860,
        -0.2262646939654398200763,
        -0.1297668675672619355623,
        0.09750160558732304910234,
        0.02752286553030572862554,
        -0.03158203931748602956508,
        0.0005538422011614961392519,
        0.004777257510945510639636,
        -0.001077301085308479564853,
    ),
}

_ALIASES = {"haar": 1, "db1": 1, "db2": 2, "db4": 4, "db6": 6}
WAVELETS = ("haar", "db2", "db4", "db6")


@dataclass(frozen=True)
class FilterBank:
    """Analysis and synthesis filters for one orthonormal wavelet.

    Analysis is a periodic correlation followed by keeping even samples:
    ``a[n] = sum_k lo[k] x[(2n + k) mod N]``.
    """

    name: str
    p: int
    lo_analysis: np.ndarray
    hi_analysis: np.ndarray
    lo_synthesis: np.ndarray
    hi_synthesis: np.ndarray

    @property
    def length(self) -> int:
        return len(self.lo_analysis)


def make_filter_bank(wavelet) -> FilterBank:
    """Build the bank for ``wavelet`` given as an order p in {1,2,4,6} or a name."""
    if isinstance(wavelet, str):
        p = _ALIASES.get(wavelet.lower())
        if p is None:
            raise ValueError(f"unknown wavelet {wavelet!r}; choose from {WAVELETS}")
    else:
        p = int(wavelet)
        if p not in _LOWPASS:
            raise ValueError(f"unsupported Daubechies order p={p}; supported: 1, 2, 4, 6")
    lo = np.array(_LOWPASS[p], dtype=np.float64)
    n = np.arange(lo.size)
    hi = (-1.0) ** n * lo[::-1]
    name = "haar" if p == 1 else f"db{p}"
    return FilterBank(name, p, lo, hi, lo[::-1].copy(), hi[::-1].copy())


def bank_residuals(bank: FilterBank) -> dict[str, float]:
    """Worst-case residuals of the orthonormality and vanishing-moment conditions."""
    lo, hi = bank.lo_analysis, bank.hi_analysis
    L = lo.size
    ortho = 0.0
    for k in range(-(L // 2) + 1, L // 2):
        shift = 2 * k
        ll = lh = hh = 0.0
        for n in range(L):
            m = n + shift
            if 0 <= m < L:
                ll += lo[n] * lo[m]
                lh += lo[n] * hi[m]
                hh += hi[n] * hi[m]
        delta = 1.0 if k == 0 else 0.0
        ortho = max(ortho, abs(ll - delta), abs(lh), abs(hh - delta))
    n = np.arange(L, dtype=np.float64)
    moments = max(abs(np.sum(n**m * hi)) for m in range(bank.p))
    return {
        "length": float(abs(L - 2 * bank.p)),
        "orthonormality": ortho,
        "vanishing_moments": float(moments),
        "lowpass_dc": abs(lo.sum() - np.sqrt(2.0)),
    }


def _validate_tables() -> None:
    for p in _LOWPASS:
        res = bank_residuals(make_filter_bank(p))
        bad = {k: v for k, v in res.items() if v > 1e-10}
        if bad:
            raise RuntimeError(f"db{p} filter table failed validation: {bad}")


_validate_tables()


def _analyze(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # periodic filter + even downsample along the last axis
    n = x.shape[-1]
    base = np.arange(0, n, 2)
    a = np.zeros(x.shape[:-1] + (n // 2,))
    d = np.zeros_like(a)
    for k in range(lo.size):
        xs = x[..., (base + k) % n]
        a += lo[k] * xs
        d += hi[k] * xs
    return a, d


def _synthesize(a: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # adjoint of _analyze
    half = a.shape[-1]
    n = 2 * half
    base = np.arange(0, n, 2)
    out = np.zeros(a.shape[:-1] + (n,))
    for k in range(lo.size):
        out[..., (base + k) % n] += lo[k] * a + hi[k] * d
    return out


def _check_even(shape: tuple[int, ...]) -> None:
    h, w = shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"grid {h}x{w} too small for a DWT level")
    if h % 2 or w % 2:
        raise ValueError(f"grid {h}x{w} has an odd dimension")


def dwt2_level(x: np.ndarray, bank: FilterBank) -> tuple[np.ndarray, np.ndarray]:
    """One separable analysis level.

    Returns ``(approx, details)`` with shapes (..., H/2, W/2) and (..., 3, H/2, W/2),
    details ordered (LH, HL, HH): LH is low-pass along W and high-pass along H.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError("dwt2_level needs at least 2 axes")
    _check_even(x.shape)
    lo, hi = bank.lo_analysis, bank.hi_analysis
    row_lo, row_hi = _analyze(x, lo, hi)  # along W
    ll, lh = (np.swapaxes(t, -1, -2) for t in _analyze(np.swapaxes(row_lo, -1, -2), lo, hi))
    hl, hh = (np.swapaxes(t, -1, -2) for t in _analyze(np.swapaxes(row_hi, -1, -2), lo, hi))
    return ll, np.stack([lh, hl, hh], axis=-3)


def idwt2_level(approx: np.ndarray, details: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Exact inverse of :func:`dwt2_level`."""
    approx = np.asarray(approx, dtype=np.float64)
    details = np.asarray(details, dtype=np.float64)
    if details.shape[:-3] != approx.shape[:-2] or details.shape[-3] != 3 \
            or details.shape[-2:] != approx.shape[-2:]:
        raise ValueError(f"approx {approx.shape} and details {details.shape} do not match")
    lo, hi = bank.lo_analysis, bank.hi_analysis
    lh, hl, hh = details[..., 0, :, :], details[..., 1, :, :], details[..., 2, :, :]
    sw = lambda t: np.swapaxes(t, -1, -2)  # noqa: E731
    row_lo = sw(_synthesize(sw(approx), sw(lh), lo, hi))
    row_hi = sw(_synthesize(sw(hl), sw(hh), lo, hi))
    return _synthesize(row_lo, row_hi, lo, hi)


@dataclass
class WaveletPyramid:
    """Per-scale sub-band tensors; ``scales[j-1]`` has shape (..., C, 4, H_j, W_j).

    Only the coarsest LL slot feeds reconstruction; finer LL slots hold the
    approximation that was decomposed further.
    """

    scales: list[np.ndarray]
    filter_id: str

    @property
    def J(self) -> int:
        return len(self.scales)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [s.shape for s in self.scales]

    def check_compatible(self, other: "WaveletPyramid") -> None:
        if self.filter_id != other.filter_id or self.shapes != other.shapes:
            raise ValueError(
                f"pyramid mismatch: {self.filter_id} {self.shapes} vs {other.filter_id} {other.shapes}"
            )

    def map(self, fn) -> "WaveletPyramid":
        return WaveletPyramid([fn(s) for s in self.scales], self.filter_id)

    def zip_map(self, other: "WaveletPyramid", fn) -> "WaveletPyramid":
        self.check_compatible(other)
        return WaveletPyramid([fn(a, b) for a, b in zip(self.scales, other.scales)], self.filter_id)

    def __add__(self, other):
        return self.zip_map(other, np.add)

    def __sub__(self, other):
        return self.zip_map(other, np.subtract)

    def copy(self) -> "WaveletPyramid":
        return self.map(np.copy)

    def energy(self) -> float:
        """Energy of the coefficients that feed reconstruction."""
        total = 0.0
        for j, s in enumerate(self.scales, start=1):
            bands = s if j == self.J else s[..., 1:, :, :]
            total += float(np.sum(bands**2))
        return total

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(s)) for s in self.scales)


def check_dyadic(h: int, w: int, J: int) -> None:
    if J < 1:
        raise ValueError(f"J must be >= 1, got {J}")
    m = 2**J
    if h % m or w % m:
        raise ValueError(f"grid must be divisible by 2^J = {m}; got {h}x{w}")


def dwt_multiscale(x: np.ndarray, bank: FilterBank, J: int) -> WaveletPyramid:
    """J-level decomposition of a (..., C, H, W) array."""
    x = np.asarray(x, dtype=np.float64)
    check_dyadic(x.shape[-2], x.shape[-1], J)
    scales = []
    approx = x
    for _ in range(J):
        approx, details = dwt2_level(approx, bank)
        scales.append(np.concatenate([approx[..., None, :, :], details], axis=-3))
    return WaveletPyramid(scales, bank.name)


def idwt_multiscale(pyramid: WaveletPyramid, bank: FilterBank) -> np.ndarray:
    if pyramid.filter_id != bank.name:
        raise ValueError(f"pyramid built with {pyramid.filter_id}, got bank {bank.name}")
    approx = pyramid.scales[-1][..., 0, :, :]
    for s in reversed(pyramid.scales):
        if s.shape[-2:] != approx.shape[-2:]:
            raise ValueError(f"scale shape {s.shape} does not match approximation {approx.shape}")
        approx = idwt2_level(approx, s[..., 1:, :, :], bank)
    return approx


def pyramid_template(shape: tuple[int, ...], J: int, filter_id: str) -> WaveletPyramid:
    """Zero pyramid matching a (..., C, H, W) field shape."""
    *lead, h, w = shape
    check_dyadic(h, w, J)
    scales = [np.zeros((*lead, 4, h >> j, w >> j)) for j in range(1, J + 1)]
    return WaveletPyramid(scales, filter_id)


def retained_subbands(pyramid: WaveletPyramid) -> list[tuple[str, np.ndarray]]:
    """(label, coefficients) for every sub-band that feeds reconstruction."""
    out = []
    for j, s in enumerate(pyramid.scales, start=1):
        first = 0 if j == pyramid.J else 1
        for b in range(first, 4):
            out.append((f"{SUBBANDS[b]}{j}", s[..., b, :, :]))
    return out


def pyramid_gaussianity_check(bank: FilterBank, J: int, n_samples: int = 1_000_000, seed: int = 0,
                              grid: int = 256) -> dict:
    """DWT of standard Gaussian pixel noise: per-sub-band mean/variance and cross-correlations.

    ``n_samples`` is the minimum number of coefficients aggregated in every
    retained sub-band (the coarsest bands set the field count). Cross-band
    correlations pair each coarse coefficient with the co-located coefficient
    of the finer band.
    """
    from .rng import stream

    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    per_field = (grid >> J) ** 2
    n_fields = -(-n_samples // per_field)
    chunk = max(1, min(n_fields, (1 << 22) // (grid * grid)))
    labels = None
    sums = sq = cross = None
    count = np.zeros(0)
    done = 0
    rng = stream(seed, 0)
    while done < n_fields:
        b = min(chunk, n_fields - done)
        noise = rng.standard_normal((b, grid, grid))
        bands = retained_subbands(dwt_multiscale(noise, bank, J))
        # co-locate every band on the coarsest grid by strided sampling
        coarse = grid >> J
        flat = []
        for _, arr in bands:
            step = arr.shape[-1] // coarse
            flat.append(arr[..., ::step, ::step].reshape(-1))
        mat = np.stack(flat)
        full = [arr.reshape(-1) for _, arr in bands]
        if labels is None:
            labels = [lab for lab, _ in bands]
            sums = np.zeros(len(bands))
            sq = np.zeros(len(bands))
            count = np.zeros(len(bands))
            cross = np.zeros((len(bands), len(bands)))
            cross_n = 0
        for i, v in enumerate(full):
            sums[i] += v.sum()
            sq[i] += (v**2).sum()
            count[i] += v.size
        cross += mat @ mat.T
        cross_n += mat.shape[1]
        done += b
    mean = sums / count
    var = sq / count - mean**2
    # zero-mean population: correlation from raw second moments on the co-located grid
    second = cross / cross_n
    diag = np.sqrt(np.diag(second))
    corr = second / np.outer(diag, diag)
    off = corr[~np.eye(len(labels), dtype=bool)]
    return {
        "bands": labels,
        "mean": dict(zip(labels, mean)),
        "variance": dict(zip(labels, var)),
        "count": dict(zip(labels, count.astype(int))),
        "correlation": corr,
        "max_abs_cross_correlation": float(np.max(np.abs(off))) if off.size else 0.0,
    }


def save_pyramid(pyramid: WaveletPyramid, directory) -> None:
    """One tensor file per scale plus a plain-text manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"filter_id={pyramid.filter_id}", f"J={pyramid.J}"]
    for j, s in enumerate(pyramid.scales, start=1):
        write_tensor(directory / f"scale_{j}.wfmt", s, np.float64)
        lines.append(f"scale_{j}=" + "x".join(map(str, s.shape)))
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_pyramid(directory) -> WaveletPyramid:
    directory = Path(directory)
    meta = dict(
        line.split("=", 1) for line in (directory / "manifest.txt").read_text().splitlines() if "=" in line
    )
    J = int(meta["J"])
    scales = []
    for j in range(1, J + 1):
        s = read_tensor(directory / f"scale_{j}.wfmt").astype(np.float64)
        expected = tuple(int(v) for v in meta[f"scale_{j}"].split("x"))
        if s.shape != expected:
            raise ValueError(f"scale {j}: file shape {s.shape} != manifest {expected}")
        scales.append(s)
    return WaveletPyramid(scales, meta["filter_id"])
