"""Checkpoints: a plain-text manifest plus one f64 tensor file per parameter."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .net.unet import NetConfig, VelocityNet, param_shapes
from .tensorio import read_tensor, write_tensor

_INT_FIELDS = {f for f, v in NetConfig().to_dict().items() if isinstance(v, int)}


def save_checkpoint(directory, net: VelocityNet, meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"config.{k}={v}" for k, v in net.cfg.to_dict().items()]
    for k in sorted(meta or {}):
        lines.append(f"{k}={meta[k]}")
    for name, arr in net.params.items():
        write_tensor(directory / f"{name}.wfmt", arr, np.float64)
        lines.append(f"param {name} {'x'.join(map(str, arr.shape))}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def read_manifest(directory) -> tuple[NetConfig, dict, list[str]]:
    path = Path(directory) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    cfg_kw, meta, names = {}, {}, []
    for line in path.read_text().splitlines():
        if line.startswith("param "):
            names.append(line.split()[1])
        elif line.startswith("config."):
            k, v = line[len("config."):].split("=", 1)
            cfg_kw[k] = int(v) if k in _INT_FIELDS else float(v)
        elif "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    return NetConfig(**cfg_kw), meta, names


def load_checkpoint(directory) -> tuple[VelocityNet, dict]:
    """Rebuild the network; every tensor is checked against the shapes implied by the config."""
    directory = Path(directory)
    cfg, meta, names = read_manifest(directory)
    expected = param_shapes(cfg)
    if set(names) != set(expected):
        raise ValueError(f"{directory}: parameter list does not match the stored config")
    params = {}
    for name, shape in expected.items():
        arr = read_tensor(directory / f"{name}.wfmt")
        if arr.shape != shape:
            raise ValueError(f"{name}: stored shape {arr.shape} != {shape} implied by config")
        params[name] = arr.astype(np.float64)
    return VelocityNet(cfg, params), meta
