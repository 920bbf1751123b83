"""Multi-scale velocity U-Net with FiLM conditioning and exact gradients.

Scale j's input block [w_j^t, w_j^tau] of shape (B, 2C, 4, H_j, W_j) is folded
to (B, 8C, H_j, W_j). Stem 1 starts the encoder; stems j > 1 are fused by a
1x1 convolution right after the (j-1)-th downsampling. The decoder mirrors
the encoder and emits a (B, C, 4, H_j, W_j) velocity through a
GroupNorm-SiLU-Conv head at every level that matches a wavelet scale.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..rng import stream
from . import autodiff as ad

ParamStore = dict  # name -> np.ndarray, insertion order fixed by NetConfig


@dataclass(frozen=True)
class NetConfig:
    n_channels: int = 1
    n_scales: int = 1
    n_levels: int = 1
    init_dim: int = 64
    blocks_per_level: int = 3
    bottleneck_blocks: int = 2
    embed_dim: int = 256
    cap_factor: int = 8
    context_len: int = 3
    n_kappa: int = 0
    groups: int = 8
    max_period: float = 1e4

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.n_levels < self.n_scales:
            raise ValueError(f"n_levels ({self.n_levels}) must be >= n_scales ({self.n_scales})")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if self.init_dim % self.groups:
            raise ValueError(f"init_dim {self.init_dim} must be a multiple of groups={self.groups}")
        if self.bottleneck_blocks < 2:
            raise ValueError("the bottleneck needs at least two residual blocks")

    @property
    def widths(self) -> list[int]:
        cap = self.cap_factor * self.init_dim
        return [min(self.init_dim * 2**i, cap) for i in range(self.n_levels)]

    @property
    def in_channels(self) -> int:
        return 8 * self.n_channels

    @property
    def out_channels(self) -> int:
        return 4 * self.n_channels

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- parameter layout

def _resblock_shapes(prefix, cin, cout, d):
    shapes = {
        f"{prefix}.gn1.g": (cin,),
        f"{prefix}.gn1.b": (cin,),
        f"{prefix}.conv1.w": (cout, cin, 3, 3),
        f"{prefix}.conv1.b": (cout,),
        f"{prefix}.film.w": (2 * cout, d),
        f"{prefix}.film.b": (2 * cout,),
        f"{prefix}.conv2.w": (cout, cout, 3, 3),
        f"{prefix}.conv2.b": (cout,),
    }
    if cin != cout:
        shapes[f"{prefix}.skip.w"] = (cout, cin, 1, 1)
        shapes[f"{prefix}.skip.b"] = (cout,)
    return shapes


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    d, w = cfg.embed_dim, cfg.widths
    shapes: dict[str, tuple[int, ...]] = {
        "temb.w1": (d, d), "temb.b1": (d,), "temb.w2": (d, d), "temb.b2": (d,),
    }
    if cfg.n_kappa:
        shapes["kappa.w"] = (d, cfg.n_kappa)
        shapes["kappa.b"] = (d,)
    if cfg.context_len:
        for slot in range(cfg.context_len):
            shapes[f"ctx.w{slot}"] = (d, cfg.n_channels)
        shapes["ctx.b"] = (d,)
    for j in range(1, cfg.n_scales + 1):
        shapes[f"stem{j}.w"] = (w[j - 1], cfg.in_channels, 3, 3)
        shapes[f"stem{j}.b"] = (w[j - 1],)
        if j > 1:
            shapes[f"fuse{j}.w"] = (w[j - 1], 2 * w[j - 1], 1, 1)
            shapes[f"fuse{j}.b"] = (w[j - 1],)
    for i in range(cfg.n_levels):
        for b in range(cfg.blocks_per_level):
            shapes.update(_resblock_shapes(f"enc{i}.{b}", w[i], w[i], d))
        if i < cfg.n_levels - 1:
            shapes[f"down{i}.w"] = (w[i + 1], w[i], 3, 3)
            shapes[f"down{i}.b"] = (w[i + 1],)
    for b in range(cfg.bottleneck_blocks):
        shapes.update(_resblock_shapes(f"mid.{b}", w[-1], w[-1], d))
    for i in reversed(range(cfg.n_levels)):
        if i < cfg.n_levels - 1:
            shapes[f"up{i}.w"] = (w[i], w[i + 1], 3, 3)
            shapes[f"up{i}.b"] = (w[i],)
        for b in range(cfg.blocks_per_level):
            shapes.update(_resblock_shapes(f"dec{i}.{b}", 2 * w[i] if b == 0 else w[i], w[i], d))
        if i < cfg.n_scales:
            shapes[f"head{i + 1}.gn.g"] = (w[i],)
            shapes[f"head{i + 1}.gn.b"] = (w[i],)
            shapes[f"head{i + 1}.w"] = (cfg.out_channels, w[i], 3, 3)
            shapes[f"head{i + 1}.b"] = (cfg.out_channels,)
    return shapes


def init_params(cfg: NetConfig, seed: int = 0) -> ParamStore:
    """Fan-in scaled uniform kernels; zero biases, FiLM shifts and output heads."""
    rng = stream(seed, 0xC0FFEE)
    params: ParamStore = {}
    for name, shape in param_shapes(cfg).items():
        leaf_name = name.rsplit(".", 1)[1]
        if name.startswith("head") and leaf_name in ("w", "b"):
            arr = np.zeros(shape)
        elif leaf_name in ("g",):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
            if name.endswith("film.w"):
                arr[shape[0] // 2 :] = 0.0
        params[name] = arr
    return params


def param_count(params: ParamStore) -> int:
    return int(sum(v.size for v in params.values()))


def validate_params(cfg: NetConfig, params: ParamStore) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names differ from config: missing={missing[:5]} extra={extra[:5]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape} != expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValueError(f"{name}: non-finite values")


# ---------------------------------------------------------------- embeddings

def sinusoidal_features(tau, d: int, max_period: float = 1e4, dtype=np.float64) -> np.ndarray:
    """Interleaved (sin, cos) pairs of tau at d/2 geometric frequencies.

    Frequencies run from 1 down to 1/max_period, so tau = 0 maps to (0, 1, 0, 1, ...).
    """
    if d % 2:
        raise ValueError(f"embedding dimension must be even, got {d}")
    tau = np.atleast_1d(np.asarray(tau, dtype=dtype))
    half = d // 2
    freqs = max_period ** (-np.arange(half, dtype=dtype) / max(half - 1, 1))
    arg = tau[:, None] * freqs[None, :]
    out = np.empty((tau.size, d), dtype=dtype)
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


@dataclass
class Cache:
    """Activation graph of one forward pass."""

    order: list
    outputs: list
    params: dict
    inputs: list
    cond: object = None
    extras: dict = field(default_factory=dict)


class VelocityNet:
    """u_theta: (current pyramid, flow state pyramid, tau, kappa, context) -> velocity pyramid."""

    def __init__(self, cfg: NetConfig, params: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params
        validate_params(cfg, self.params)

    @property
    def dtype(self):
        # float64 unless the parameters were promoted to extended precision
        extended = any(v.dtype == np.longdouble for v in self.params.values())
        return np.dtype(np.longdouble) if extended else np.dtype(np.float64)

    # -- conditioning
    def _embed(self, p, tau, kappa, context):
        cfg = self.cfg
        B = tau.shape[0]
        feats = ad.leaf(sinusoidal_features(tau, cfg.embed_dim, cfg.max_period, self.dtype))
        h = ad.silu(ad.linear(feats, p["temb.w1"], p["temb.b1"]))
        c = ad.linear(h, p["temb.w2"], p["temb.b2"])
        if cfg.n_kappa:
            kappa = np.asarray(kappa, dtype=self.dtype).reshape(B, cfg.n_kappa)
            c = ad.add(c, ad.linear(ad.leaf(kappa), p["kappa.w"], p["kappa.b"]))
        if cfg.context_len:
            context = np.asarray(context, dtype=self.dtype)
            if context.ndim != 5 or context.shape[:3] != (B, cfg.context_len, cfg.n_channels):
                raise ValueError(
                    f"context must be (B={B}, L={cfg.context_len}, C={cfg.n_channels}, H, W), "
                    f"got {context.shape}"
                )
            pooled = ad.mean_hw(ad.leaf(context))  # (B, L, C)
            acc = None
            for slot in range(cfg.context_len):
                term = ad.linear(ad.index(pooled, (slice(None), slot)), p[f"ctx.w{slot}"])
                acc = term if acc is None else ad.add(acc, term)
            c = ad.add(c, ad.add(ad.scale(acc, 1.0 / cfg.context_len), p["ctx.b"]))
        return c

    def embed_condition(self, tau, kappa=None, context=None) -> np.ndarray:
        """Conditioning vectors c of shape (B, d)."""
        p = {k: ad.leaf(v, k) for k, v in self.params.items()}
        return self._embed(p, np.atleast_1d(np.asarray(tau, dtype=self.dtype)), kappa, context).value

    # -- blocks
    def _resblock(self, p, prefix, x, cond):
        g = self.cfg.groups
        h = ad.group_norm(x, g, p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"])
        h = ad.conv2d(ad.silu(h), p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
        h = ad.group_norm(h, g)
        h = ad.film(h, ad.linear(cond, p[f"{prefix}.film.w"], p[f"{prefix}.film.b"]))
        h = ad.conv2d(ad.silu(h), p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
        if f"{prefix}.skip.w" in p:
            x = ad.conv2d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
        return ad.add(x, h)

    def forward(self, current, state, tau, kappa=None, context=None):
        """Run the network, keeping activations for :meth:`backward`.

        ``current``/``state`` are lists of per-scale arrays (B, C, 4, H_j, W_j);
        entries beyond ``n_scales`` are ignored. Returns (velocities, cache).
        """
        cfg = self.cfg
        J = cfg.n_scales
        if len(current) < J or len(state) < J:
            raise ValueError(f"network needs {J} scales, got {len(current)} and {len(state)}")
        dtype = self.dtype
        tau = np.atleast_1d(np.asarray(tau, dtype=dtype))
        p = {k: ad.leaf(v, k) for k, v in self.params.items()}

        inputs = []
        for j in range(J):
            a, b = np.asarray(current[j], dtype=dtype), np.asarray(state[j], dtype=dtype)
            if a.shape != b.shape or a.ndim != 5 or a.shape[1] != cfg.n_channels or a.shape[2] != 4:
                raise ValueError(f"scale {j + 1}: expected (B, {cfg.n_channels}, 4, H, W) pairs, "
                                 f"got {a.shape} and {b.shape}")
            if j and a.shape[-2:] != (current[0].shape[-2] >> j, current[0].shape[-1] >> j):
                raise ValueError(f"scale {j + 1} has shape {a.shape}, inconsistent with scale 1")
            inputs.append(ad.leaf(np.concatenate([a, b], axis=1), f"z{j + 1}"))
        B = inputs[0].shape[0]
        if tau.shape != (B,):
            tau = np.broadcast_to(tau, (B,)).copy()

        cond = self._embed(p, tau, kappa, context)
        cond_act = ad.silu(cond)

        def fold(z):
            s = z.shape
            return ad.reshape(z, (s[0], s[1] * s[2], s[3], s[4]))

        h = ad.conv2d(fold(inputs[0]), p["stem1.w"], p["stem1.b"])
        skips = []
        for i in range(cfg.n_levels):
            if i > 0:
                h = ad.conv2d(h, p[f"down{i - 1}.w"], p[f"down{i - 1}.b"], stride=2)
                if i < J:
                    s = ad.conv2d(fold(inputs[i]), p[f"stem{i + 1}.w"], p[f"stem{i + 1}.b"])
                    h = ad.conv2d(ad.concat([h, s]), p[f"fuse{i + 1}.w"], p[f"fuse{i + 1}.b"])
            for b in range(cfg.blocks_per_level):
                h = self._resblock(p, f"enc{i}.{b}", h, cond_act)
            skips.append(h)
        for b in range(cfg.bottleneck_blocks):
            h = self._resblock(p, f"mid.{b}", h, cond_act)

        outputs: list = [None] * J
        for i in reversed(range(cfg.n_levels)):
            if i < cfg.n_levels - 1:
                h = ad.conv2d(ad.upsample_nearest(h), p[f"up{i}.w"], p[f"up{i}.b"])
            h = ad.concat([h, skips[i]])
            for b in range(cfg.blocks_per_level):
                h = self._resblock(p, f"dec{i}.{b}", h, cond_act)
            if i < J:
                o = ad.group_norm(h, cfg.groups, p[f"head{i + 1}.gn.g"], p[f"head{i + 1}.gn.b"])
                o = ad.conv2d(ad.silu(o), p[f"head{i + 1}.w"], p[f"head{i + 1}.b"])
                Bo, _, Hj, Wj = o.shape
                outputs[i] = ad.reshape(o, (Bo, cfg.n_channels, 4, Hj, Wj))

        order = ad.topo_order(outputs)
        values = [o.value for o in outputs]
        for v in values:
            if not np.all(np.isfinite(v)):
                raise FloatingPointError("velocity network produced non-finite activations")
        return values, Cache(order, outputs, p, inputs, cond)

    def backward(self, cache: Cache | None, output_grads) -> dict[str, np.ndarray]:
        """Gradients of sum_j <output_grads[j], u_j> w.r.t. every parameter and input.

        Input gradients are keyed ``"z{j}"`` with the concatenated (B, 2C, 4, H_j, W_j) layout.
        """
        if cache is None:
            raise ValueError("backward called without a forward cache")
        if len(output_grads) != len(cache.outputs):
            raise ValueError(f"expected {len(cache.outputs)} output gradients, got {len(output_grads)}")
        for o, g in zip(cache.outputs, output_grads):
            if np.shape(g) != o.shape:
                raise ValueError(f"gradient shape {np.shape(g)} != output shape {o.shape}")
        ad.backward(cache.order, cache.outputs, output_grads)
        grads = {}
        for name, node in cache.params.items():
            grads[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        for j, node in enumerate(cache.inputs, start=1):
            grads[f"z{j}"] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return grads

    def __call__(self, current, state, tau, kappa=None, context=None) -> list[np.ndarray]:
        values, _ = self.forward(current, state, tau, kappa, context)
        return values

