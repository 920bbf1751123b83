"""``wfm`` command line: data generation, training, rollout, evaluation and diagnostics.

Exit codes: 0 success, 1 internal or check failure, 2 usage/configuration error.
Options may also come from ``--config FILE`` (key=value lines); explicit flags
win over the file, which wins over built-in defaults. Every command that
writes a run directory echoes its resolved options to ``config.txt`` there.
"""
from __future__ import annotations

import argparse
import logging
import resource
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .field import destandardize
from .flow import SamplerConfig, rollout
from .forecast import EnsembleForecast
from .metrics import BandSpec, evaluate, n_rings, parse_windows
from .net.gradcheck import grad_check
from .net.unet import NetConfig, VelocityNet, param_count
from .pdegen import HeatSpec, ReactionDiffusionSpec, load_dataset, make_dataset
from .rng import default_seed
from .tensorio import TensorFormatError, read_tensor
from .trainer import TrainConfig, WindowDataset, fit
from .wavelet import check_dyadic, dwt_multiscale, idwt_multiscale, make_filter_bank, retained_subbands

log = logging.getLogger("wfm")

class UsageError(Exception):
    """Bad flags or inconsistent configuration (exit code 2)."""


# ---------------------------------------------------------------- config handling

def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _echo_keys(args) -> list[str]:
    return sorted(k for k in vars(args) if k not in ("command", "config", "func", "verbose"))


def write_resolved(args, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for k in _echo_keys(args):
        v = getattr(args, k)
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = "x".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _grid(text) -> tuple[int, int]:
    parts = str(text).lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be N or HxW, got {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"grid must be N or HxW, got {text!r}")
    return dims


def _floats(text) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    H, W = args.grid
    try:
        check_dyadic(H, W, args.scales)
    except ValueError as err:
        raise UsageError(str(err)) from None
    if args.traj < 2:
        raise UsageError("need at least 2 trajectories")
    seeds = [args.seed * 100003 + i for i in range(args.traj)]
    if args.system == "heat":
        specs = [HeatSpec((H, W), args.nu, args.dt, args.steps, s) for s in seeds]
    else:
        specs = [ReactionDiffusionSpec((H, W), args.d_u, args.d_v, args.feed, args.kill, args.dt, args.steps,
                                       args.substeps, s) for s in seeds]
    out = Path(args.out)
    write_resolved(args, out)
    make_dataset(specs, out, args.train_frac, args.scales)
    ds = load_dataset(out)
    print(f"wrote {len(ds.train) + len(ds.val)} trajectories ({len(ds.train)} train, {len(ds.val)} val) "
          f"of shape {ds.train[0].frames.shape} to {out}")
    print(f"standardizer mean={ds.meta['mean']} std={ds.meta['std']}")
    return 0


def net_config_from(args, n_channels: int, n_kappa: int) -> NetConfig:
    if args.levels is None:
        args.levels = args.scales
    if args.scales > args.levels:
        raise UsageError(f"--scales {args.scales} needs --levels >= {args.scales}, got {args.levels}")
    try:
        return NetConfig(n_channels=n_channels, n_scales=args.scales, n_levels=args.levels,
                         init_dim=args.init_dim, blocks_per_level=args.blocks, bottleneck_blocks=args.bottleneck,
                         embed_dim=args.embed_dim, context_len=args.context, n_kappa=n_kappa)
    except ValueError as err:
        raise UsageError(str(err)) from None


def train_config_from(args) -> TrainConfig:
    try:
        return TrainConfig(epochs=args.epochs, warmup_epochs=args.warmup, batch_size=args.batch, lr=args.lr,
                           weight_decay=args.weight_decay, clip_norm=args.clip, eta_min=args.eta_min,
                           seed=args.seed, wavelet=args.wavelet,
                           scale_weights=_floats(args.weights) if args.weights else None,
                           per_subband_loss=args.per_subband_loss)
    except ValueError as err:
        raise UsageError(str(err)) from None


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    train, val = ds.standardized()
    T, C, H, W = train[0].frames.shape
    cfg = net_config_from(args, C, len(train[0].params))
    tcfg = train_config_from(args)
    if tcfg.scale_weights is not None and len(tcfg.scale_weights) != cfg.n_scales:
        raise UsageError(f"--weights needs {cfg.n_scales} values")
    try:
        check_dyadic(H, W, cfg.n_levels)
    except ValueError as err:
        raise UsageError(f"{err} (network levels)") from None
    out = Path(args.out)
    write_resolved(args, out)
    net = VelocityNet(cfg, seed=args.seed)
    log.info("network with %d parameters", param_count(net.params))
    meta = {"mean": ds.meta["mean"], "std": ds.meta["std"], "data": Path(args.data).resolve()}
    result = fit(net, WindowDataset(train, cfg.context_len), WindowDataset(val, cfg.context_len), tcfg,
                 out_dir=out, checkpoint_meta=meta)
    print(f"trained {result.steps} steps; best val {result.best_val:.6g} at epoch {result.best_epoch}; "
          f"probe loss {result.probe_initial.total:.4g} -> {result.probe_final.total:.4g}")
    return 0


def _rollout_inputs(args):
    net, meta = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    _, val = ds.standardized()
    if not 0 <= args.traj_index < len(val):
        raise UsageError(f"--traj-index must be in [0, {len(val)})")
    tr = val[args.traj_index]
    T, C, H, W = tr.frames.shape
    cfg = net.cfg
    if C != cfg.n_channels or len(tr.params) != cfg.n_kappa:
        raise UsageError(f"checkpoint expects C={cfg.n_channels}, {cfg.n_kappa} params; "
                         f"data has C={C}, {len(tr.params)} params")
    try:
        check_dyadic(H, W, cfg.n_levels)
    except ValueError as err:
        raise UsageError(str(err)) from None
    wavelet = meta.get("wavelet", "db2")
    if args.wavelet and args.wavelet != wavelet:
        raise UsageError(f"checkpoint was trained with {wavelet}, not {args.wavelet}")
    L = cfg.context_len
    start = args.start
    if start < 0 or start + L + 1 > T:
        raise UsageError(f"--start {start} leaves fewer than {L + 1} initial frames")
    return net, ds, tr, wavelet, start, args.steps


def cmd_rollout(args) -> int:
    net, ds, tr, wavelet, start, steps = _rollout_inputs(args)
    L = net.cfg.context_len
    frames = tr.frames
    first = start + L + 1
    truth = frames[first:first + steps] if first + steps <= len(frames) else None
    cfg = SamplerConfig(args.euler_steps, args.seed, args.members)
    fc = rollout(net, frames[start:first], steps, cfg, make_filter_bank(wavelet), net.cfg.n_scales,
                 kappa=tr.params.as_array() if net.cfg.n_kappa else None, standardizer=ds.standardizer,
                 truth=truth)
    if args.physical:
        fc = EnsembleForecast(destandardize(fc.members, ds.standardizer),
                              None if fc.truth is None else destandardize(fc.truth, ds.standardizer),
                              dict(fc.metadata, units="physical"), fc.failure_steps)
    out = Path(args.out)
    write_resolved(args, out)
    fc.save(out)
    failed = [m for m, s in enumerate(fc.failure_steps) if s is not None]
    print(f"wrote forecast {fc.members.shape} to {out}" + (f"; members failed: {failed}" if failed else ""))
    return 0


def _bands_from(args, H: int, W: int) -> BandSpec:
    if args.band_edges:
        return BandSpec(_floats(args.band_edges))
    return BandSpec.log_spaced(n_rings(H, W))


def cmd_eval(args) -> int:
    try:
        fc = EnsembleForecast.load(args.forecast)
    except (TensorFormatError, ValueError, FileNotFoundError) as err:
        raise UsageError(f"cannot read forecast: {err}") from None
    if fc.truth is None:
        raise UsageError(f"{args.forecast} has no truth.wfmt to evaluate against")
    M, T, C, H, W = fc.members.shape
    try:
        windows = parse_windows(args.windows, T) if args.windows else [(1, T)]
        bands = _bands_from(args, H, W)
        bands.members(np.arange(1, n_rings(H, W) + 1))
    except ValueError as err:
        raise UsageError(str(err)) from None
    report = evaluate(fc, bands, windows, args.per_member_coherence)
    out = Path(args.out)
    write_resolved(args, out)
    report.write_csv(out / "metrics.csv")
    if args.json:
        report.write_json(out / "metrics.json")
    for (name, tag), arr in report.aggregates.items():
        print(f"{name:15s} window {tag:>7s}: " + " ".join(f"{v:.6g}" for v in np.ravel(arr)))
    return 0


def cmd_wavelet_inspect(args) -> int:
    data = read_tensor(args.field).astype(np.float64)
    while data.ndim > 3:
        data = data[args.frame]
    if data.ndim == 2:
        data = data[None]
    C, H, W = data.shape
    try:
        check_dyadic(H, W, args.scales)
    except ValueError as err:
        raise UsageError(str(err)) from None
    bank = make_filter_bank(args.wavelet)
    pyr = dwt_multiscale(data, bank, args.scales)
    recon = idwt_multiscale(pyr, bank)
    err = float(np.max(np.abs(recon - data)))
    total = float(np.sum(data**2))
    print(f"field {C}x{H}x{W}, wavelet {bank.name}, J={args.scales}")
    acc = 0.0
    for label, coeffs in retained_subbands(pyr):
        e = float(np.sum(coeffs**2))
        acc += e
        frac = e / total if total > 0 else 0.0
        print(f"{label:5s} {coeffs.shape[-2]}x{coeffs.shape[-1]} energy fraction {frac:.12f}")
    print(f"energy fractions sum to {acc / total if total > 0 else 1.0:.12f}")
    print(f"reconstruction max error {err:.3e}")
    return 0


def cmd_grad_check(args) -> int:
    try:
        cfg = NetConfig(n_channels=args.channels, n_scales=args.scales,
                        n_levels=args.levels if args.levels is not None else args.scales,
                        init_dim=args.init_dim, blocks_per_level=args.blocks, embed_dim=args.embed_dim,
                        context_len=args.context, n_kappa=args.kappa)
    except ValueError as err:
        raise UsageError(str(err)) from None
    report = grad_check(cfg, seed=args.seed, n_params=args.n_params, h=args.h, tol=args.tol, grid=args.grid)
    print(report.summary())
    w = report.worst
    if w is not None:
        print(f"worst: {w.name} {list(w.index)} finite-difference {w.finite_diff:.10e} "
              f"analytic {w.analytic:.10e}")
    return 0 if report.passed else 1


@dataclass
class ProfileReport:
    wall_s: float
    steps: int
    frames: int
    grid: tuple[int, int]
    peak_mem_mb: float | None = None
    speedup: float | None = None
    baseline: str | None = None

    @property
    def seconds_per_step(self) -> float:
        return self.wall_s / self.steps

    @property
    def steps_per_s(self) -> float:
        return self.steps / self.wall_s

    @property
    def frames_per_s(self) -> float:
        return self.steps_per_s * self.grid[0] * self.grid[1]

    def lines(self) -> list[str]:
        out = [f"wall_s={self.wall_s!r}", f"steps={self.steps}", f"grid={self.grid[0]}x{self.grid[1]}",
               f"seconds_per_step={self.seconds_per_step!r}", f"steps_per_s={self.steps_per_s!r}",
               f"frames_per_s={self.frames_per_s!r}"]
        if self.peak_mem_mb is not None:
            out.append(f"peak_mem_mb={self.peak_mem_mb:.1f}")
        if self.speedup is not None:
            out.append(f"speedup={self.speedup!r}")
            out.append(f"baseline={self.baseline}")
        return out


def speedup(t_baseline: float, t_this: float) -> float:
    return t_baseline / t_this


def read_profile(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    if "wall_s" not in out:
        raise UsageError(f"{path} is not a profile report (no wall_s)")
    return out


def cmd_profile(args) -> int:
    if args.baseline and not Path(args.baseline).exists():
        raise UsageError(f"baseline report {args.baseline} not found")
    net, ds, tr, wavelet, start, steps = _rollout_inputs(args)
    L = net.cfg.context_len
    initial = tr.frames[start:start + L + 1]
    bank = make_filter_bank(wavelet)
    cfg = SamplerConfig(args.euler_steps, args.seed, args.members)
    kappa = tr.params.as_array() if net.cfg.n_kappa else None
    # only the rollout itself is timed; loading and writing are outside the clock
    t0 = time.perf_counter()
    rollout(net, initial, steps, cfg, bank, net.cfg.n_scales, kappa=kappa)
    wall = time.perf_counter() - t0
    H, W = initial.shape[-2:]
    n = args.members * steps
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    report = ProfileReport(wall, n, n, (H, W), peak)
    if args.baseline:
        base = read_profile(args.baseline)
        report.speedup = speedup(float(base["wall_s"]), wall)
        report.baseline = args.baseline
    out = Path(args.out)
    write_resolved(args, out)
    (out / "profile.txt").write_text("\n".join(report.lines()) + "\n")
    print("\n".join(report.lines()))
    return 0


# ---------------------------------------------------------------- parser

def _add_net_flags(p):
    p.add_argument("--scales", type=int, default=1, help="wavelet scales J")
    p.add_argument("--levels", type=int, default=None, help="U-Net levels (default: --scales)")
    p.add_argument("--init-dim", type=int, default=64)
    p.add_argument("--blocks", type=int, default=3, help="residual blocks per level")
    p.add_argument("--bottleneck", type=int, default=2)
    p.add_argument("--embed-dim", type=int, default=256)
    p.add_argument("--context", type=int, default=3, help="context frames L")


def _add_rollout_flags(p):
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=8, help="rollout length T")
    p.add_argument("--members", type=int, default=8, help="ensemble size M")
    p.add_argument("--euler-steps", type=int, default=50, help="Euler steps N")
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--traj-index", type=int, default=0, help="validation trajectory to start from")
    p.add_argument("--start", type=int, default=0, help="first frame of the initial window")
    p.add_argument("--wavelet", default=None, help="assert the checkpoint's wavelet")


REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "rollout": ("checkpoint", "data", "out"),
    "eval": ("forecast", "out"),
    "profile": ("checkpoint", "data", "out"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a toy PDE dataset")
    p.add_argument("--system", choices=("heat", "grayscott"), default="heat")
    p.add_argument("--grid", type=_grid, default=(32, 32))
    p.add_argument("--traj", type=int, default=20)
    p.add_argument("--steps", type=int, default=64, help="frames per trajectory")
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--scales", type=int, default=3, help="grid must be divisible by 2^scales")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--nu", type=float, default=1e-3)
    p.add_argument("--dt", type=float, default=None, help="frame spacing (heat 0.01, Gray-Scott step 1.0)")
    p.add_argument("--d-u", type=float, default=0.16)
    p.add_argument("--d-v", type=float, default=0.08)
    p.add_argument("--feed", type=float, default=0.030)
    p.add_argument("--kill", type=float, default=0.060)
    p.add_argument("--substeps", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a velocity network")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    _add_net_flags(p)
    p.add_argument("--wavelet", choices=("haar", "db2", "db4", "db6"), default="db2")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--eta-min", type=float, default=1e-7)
    p.add_argument("--weights", default=None, help="comma-separated lambda_j (default all 1)")
    p.add_argument("--per-subband-loss", type=_bool, default=False)
    p.add_argument("--seed", type=int, default=default_seed())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="autoregressive ensemble forecast")
    _add_rollout_flags(p)
    p.add_argument("--physical", type=_bool, default=False, help="store de-standardized fields")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="score a forecast against its truth")
    p.add_argument("--forecast", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--windows", default=None, help="lead-time windows, e.g. 1:8,9:16")
    p.add_argument("--band-edges", default=None, help="ring-index band edges, e.g. 0,2,6,16")
    p.add_argument("--per-member-coherence", type=_bool, default=False)
    p.add_argument("--json", type=_bool, default=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("wavelet-inspect", help="energy per wavelet sub-band of a tensor file")
    p.add_argument("field")
    p.add_argument("--wavelet", choices=("haar", "db2", "db4", "db6"), default="db2")
    p.add_argument("--scales", type=int, default=3)
    p.add_argument("--frame", type=int, default=0, help="index into leading axes beyond (C, H, W)")
    p.set_defaults(func=cmd_wavelet_inspect)

    p = sub.add_parser("grad-check", help="finite-difference check of the network gradients")
    p.add_argument("--scales", type=int, default=3)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--init-dim", type=int, default=16)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--context", type=int, default=2)
    p.add_argument("--kappa", type=int, default=1)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--n-params", type=int, default=200)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=default_seed())
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("profile", help="time an ensemble rollout")
    _add_rollout_flags(p)
    p.add_argument("--baseline", default=None, help="profile.txt of a baseline run for speedup")
    p.set_defaults(func=cmd_profile)

    for action in sub.choices.values():
        action.add_argument("--config", default=None, help="key=value file; flags override it")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            values = read_config_file(args.config)
        except OSError as err:
            raise UsageError(f"cannot read config: {err}") from None
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for k, v in values.items():
            if k not in known or k in ("help", "config"):
                raise UsageError(f"unknown config key {k!r} for {args.command}")
            action = known[k]
            try:
                defaults[k] = action.type(v) if action.type else v
            except (argparse.ArgumentTypeError, ValueError) as err:
                raise UsageError(f"config key {k}: {err}") from None
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [d for d in REQUIRED.get(args.command, ()) if getattr(args, d) is None]
    if missing:
        raise UsageError(f"{args.command}: missing " + ", ".join("--" + d.replace("_", "-") for d in missing))
    if args.command == "gen-data" and args.dt is None:
        args.dt = 0.01 if args.system == "heat" else 1.0
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as err:
        print(f"wfm: error: {err}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"wfm: error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, TensorFormatError) as err:
        print(f"wfm: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - report and map to exit 1
        log.exception("internal failure")
        print(f"wfm: internal error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
