"""Command line interface.

    npa train --task morph2d --target disc --out runs/disc
    npa eval  --task classify --checkpoint runs/cls/model.npa1 \
              --mnist-images t10k-images.idx --mnist-labels t10k-labels.idx
    npa bench --sizes 1024,4096,16384,65536
    npa run   --checkpoint runs/disc/model.npa1 --steps 64 --out state.nps1
    npa serve --checkpoint runs/disc/model.npa1 --bind 127.0.0.1:8765

Configuration comes from an optional key=value file (--config) with flags
taking precedence; --print-config dumps the merged result and exits. Exit
codes: 0 success, 2 configuration error, 3 numeric failure during
simulation, 4 i/o or file format error.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import ops
from .config import format_config, make_config
from .engine import StepConfig, load_checkpoint, step
from .errors import FormatError, InputError, NumericError
from .grid import build_grid
from .kernels import KernelParams, poly6
from .mnist import ingest_mnist, sample_point_digit
from .seeds import seed_egg, seed_points, seed_square
from .snapshot import save_snapshot

BENCH_SIZES = (1024, 4096, 16384, 65536)
BENCH_BRUTE_LIMIT = 8192     # brute columns in the table stop here
BENCH_NEIGHBOR_TARGET = 24.0  # mean neighbors the bench clouds aim for

# flags that map one-to-one onto config fields
_CONFIG_FLAGS = ("task", "target", "mnist_images", "mnist_labels",
                 "checkpoint", "eps", "p", "strategy", "hashing",
                 "precision", "seed", "iterations")


def build_parser():
    top = argparse.ArgumentParser(prog="npa", description=__doc__.split("\n")[0])
    sub = top.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--task", choices=("morph2d", "classify"))
        p.add_argument("--target", help="morphogenesis target: disc, ring, or image path")
        p.add_argument("--mnist-images", dest="mnist_images")
        p.add_argument("--mnist-labels", dest="mnist_labels")
        if checkpoint:
            p.add_argument("--checkpoint")
        p.add_argument("--eps", type=float)
        p.add_argument("--p", type=float)
        p.add_argument("--strategy", choices=("particle", "block"))
        p.add_argument("--hashing", choices=("morton", "row_major"))
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--seed", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--print-config", action="store_true",
                       help="dump the merged config and exit")
        return p

    t = common(sub.add_parser("train", help="optimize a rule, write checkpoint + metrics"))
    t.add_argument("--out", help="output directory (default runs/<task>)")

    e = common(sub.add_parser("eval", help="score a checkpoint"))
    e.add_argument("--out", help="rendered image path (morphogenesis)")
    e.add_argument("--steps", type=int, help="rollout depth (default t_max)")

    b = common(sub.add_parser("bench", help="time operators across sizes and layouts"))
    b.add_argument("--sizes", default=",".join(str(n) for n in BENCH_SIZES),
                   help="comma-separated particle counts")
    b.add_argument("--brute-at", dest="brute_at", type=int, default=16384,
                   help="particle count for the brute-force speedup line")

    r = common(sub.add_parser("run", help="headless rollout writing NPS1 snapshots"))
    r.add_argument("--out", required=True, help="snapshot path")
    r.add_argument("--steps", type=int, default=0)
    r.add_argument("--snapshot-every", dest="snapshot_every", type=int, default=0,
                   help="also write numbered snapshots every k steps")
    r.add_argument("--seed-kind", dest="seed_kind",
                   choices=("egg", "square", "digit"),
                   help="initial state (default: egg, or digit for classify)")

    s = common(sub.add_parser("serve", help="live simulation over websockets"),
               checkpoint=False)
    s.add_argument("--checkpoint", action="append",
                   help="model checkpoint; repeat for extra species")
    s.add_argument("--bind", default="127.0.0.1:8765")
    s.add_argument("--steps-per-frame", dest="steps_per_frame", type=int, default=1)
    s.add_argument("--fps", type=float, default=30.0,
                   help="target frames per second")
    s.add_argument("--window", type=float, default=4.0,
                   help="side of the published world window")
    s.add_argument("--float-positions", dest="float_positions",
                   action="store_true",
                   help="send float32 positions instead of quantized u16")
    s.add_argument("--debug", action="store_true",
                   help="append raw states to every frame")
    return top


def load_config(args):
    text = None
    if args.config:
        if not os.path.isfile(args.config):
            raise InputError(f"config file not found: {args.config}")
        with open(args.config) as f:
            text = f.read()
    overrides = {k: getattr(args, k) for k in _CONFIG_FLAGS
                 if getattr(args, k, None) is not None}
    # serve collects repeated --checkpoint flags; the config slot gets the first
    if isinstance(overrides.get("checkpoint"), list):
        overrides["checkpoint"] = overrides["checkpoint"][0]
    return make_config(file_text=text, overrides=overrides,
                       origin=args.config or "<config>")


def _require_file(path, what):
    if not path:
        raise InputError(f"{what} required")
    if not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")


def check_inputs(cfg, need_checkpoint):
    """Referenced files must exist before any work starts."""
    if need_checkpoint:
        _require_file(cfg.checkpoint, "checkpoint")
    if cfg.task == "morph2d" and cfg.target not in ("disc", "ring"):
        _require_file(cfg.target, "target image")
    if cfg.task == "classify":
        _require_file(cfg.mnist_images, "mnist images file")
        _require_file(cfg.mnist_labels, "mnist labels file")


def cmd_train(args):
    cfg = load_config(args)
    check_inputs(cfg, need_checkpoint=False)
    if cfg.checkpoint:
        _require_file(cfg.checkpoint, "checkpoint")
    from . import train as tr
    out_dir = args.out or os.path.join("runs", cfg.task)
    summary = tr.train(cfg, out_dir)
    print(json.dumps(summary))
    return 0


def cmd_eval(args):
    cfg = load_config(args)
    check_inputs(cfg, need_checkpoint=True)
    from . import train as tr
    if cfg.task == "classify":
        res = tr.eval_classification(cfg)
    else:
        res = tr.eval_morphogenesis(cfg, steps=args.steps,
                                    image_path=args.out)
    print(json.dumps(res))
    return 0


def cmd_run(args):
    cfg = load_config(args)
    check_inputs(cfg, need_checkpoint=True)
    net, eps_train = load_checkpoint(cfg.checkpoint, dtype=cfg.dtype)
    kind = args.seed_kind or ("digit" if cfg.task == "classify" else "egg")
    rng = np.random.default_rng([cfg.seed, 1])
    if kind == "egg":
        sysb = seed_egg(rng, cfg.n, net.C, radius=cfg.seed_radius,
                        eps=eps_train, dtype=cfg.dtype)
    elif kind == "square":
        sysb = seed_square(rng, cfg.n, net.C, eps=eps_train, dtype=cfg.dtype)
    else:
        _require_file(cfg.mnist_images, "mnist images file")
        _require_file(cfg.mnist_labels, "mnist labels file")
        images, _ = ingest_mnist(cfg.mnist_images, cfg.mnist_labels)
        i = int(rng.integers(images.shape[0]))
        pts = sample_point_digit(images[i], rng, n_points=cfg.n)
        sysb = seed_points(pts.astype(cfg.dtype), net.C, eps=eps_train,
                           dtype=cfg.dtype)
    scfg = StepConfig(p=cfg.p, dynamic=net.dynamic,
                      eps_run=args.eps if args.eps is not None else None,
                      dx_scale=cfg.dx_scale, strategy=cfg.strategy,
                      hashing=cfg.hashing)
    loop = np.random.default_rng([cfg.seed, 2])
    base, ext = os.path.splitext(args.out)
    written = []
    for t in range(args.steps):
        sysb, _ = step(sysb, net, scfg, loop)
        if args.snapshot_every and (t + 1) % args.snapshot_every == 0 \
                and t + 1 < args.steps:
            p = f"{base}_{t + 1:06d}{ext}"
            save_snapshot(p, sysb.x, sysb.S)
            written.append(p)
    save_snapshot(args.out, sysb.x, sysb.S)
    written.append(args.out)
    print(json.dumps({"steps": args.steps, "snapshots": written}))
    return 0


def cmd_serve(args):
    ckpts = args.checkpoint or []
    if not ckpts:
        raise InputError("serve needs at least one --checkpoint")
    cfg = load_config(args)
    for p in ckpts:
        _require_file(p, "checkpoint")
    from .service import serve_forever
    return serve_forever(cfg, ckpts, args)


def _brute_density(x, mass, eps, chunk=512):
    """Literal O(N^2) density sum, row-chunked to bound the distance matrix."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    par = KernelParams(x.shape[1], eps)
    out = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        r = x[None, :, :] - x[lo:hi, None, :]
        d2 = np.einsum("ijd,ijd->ij", r, r)
        w = np.where(d2 < eps * eps, poly6(r, par), 0.0)
        out[lo:hi] = mass * w.sum(axis=1)
    return out


def _neighbor_counts(x, eps, rng, cap=4096, chunk=256):
    """Exact neighbor counts for a subsample of particles."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    idx = np.arange(n) if n <= cap else rng.choice(n, cap, replace=False)
    counts = np.empty(idx.size, np.int64)
    for lo in range(0, idx.size, chunk):
        hi = min(lo + chunk, idx.size)
        r = x[None, :, :] - x[idx[lo:hi], None, :]
        d2 = np.einsum("ijd,ijd->ij", r, r)
        counts[lo:hi] = (d2 < eps * eps).sum(axis=1) - 1  # drop self
    return counts


def _time(fn, repeats=2):
    fn()  # warm the jit and the caches
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return 1e3 * best


def _bench_cloud(rng, n, eps):
    # side chosen for a constant expected neighbor count across sizes
    side = eps * float(np.sqrt(np.pi * n / BENCH_NEIGHBOR_TARGET))
    return rng.uniform(0.0, side, (1, n, 2))


def bench_report(sizes, brute_at, eps=0.1, seed=0):
    """Time grid build and every operator at each size for both execution
    strategies and both hashings. Returns the report as a dict; the table
    renderer lives in cmd_bench."""
    rng = np.random.default_rng([seed, 8])
    rows = []
    hists = {}
    dev = 0.0
    for n in sizes:
        x = _bench_cloud(rng, n, eps)
        S = rng.standard_normal((1, n, 8))
        mass = 1.0 / n
        cnt = _neighbor_counts(x[0], eps, rng)
        edges = [0, 1, 2, 4, 8, 16, 32, 64, 128, 1 << 30]
        hists[n] = {"sampled": int(cnt.size),
                    "mean": float(cnt.mean()),
                    "max": int(cnt.max()),
                    "buckets": dict(zip(
                        ("0", "1", "2-3", "4-7", "8-15", "16-31", "32-63",
                         "64-127", "128+"),
                        np.histogram(cnt, bins=edges)[0].tolist()))}
        results = {}
        for strategy in ("particle", "block"):
            for hashing in ("morton", "row_major"):
                grid = build_grid(x, eps, hashing_mode=hashing)
                kw = dict(strategy=strategy)
                rho = ops.density(grid, mass, **kw)
                rho_bar = rng.standard_normal(rho.shape)
                st_bar = rng.standard_normal(S.shape)
                g_bar = rng.standard_normal(S.shape + (2,))
                gr_bar = rng.standard_normal(rho.shape + (2,))
                m_bar = rng.standard_normal(rho.shape + (2, 2))
                row = {"n": n, "strategy": strategy, "hashing": hashing,
                       "build": _time(lambda: build_grid(x, eps, hashing_mode=hashing))}
                fwd = {
                    "density": lambda: ops.density(grid, mass, **kw),
                    "smooth": lambda: ops.smooth(grid, S, rho, mass, **kw),
                    "grad0": lambda: ops.grad0(grid, S, rho, mass, **kw),
                    "density_grad": lambda: ops.density_grad(grid, mass, **kw),
                    "moment": lambda: ops.moment(grid, rho, mass, **kw),
                }
                bwd = {
                    "density_bwd": lambda: ops.density_bwd(grid, mass, rho_bar, **kw),
                    "smooth_bwd": lambda: ops.smooth_bwd(grid, S, rho, mass, st_bar, **kw),
                    "grad0_bwd": lambda: ops.grad0_bwd(grid, S, rho, mass, g_bar, **kw),
                    "density_grad_bwd": lambda: ops.density_grad_bwd(grid, mass, gr_bar, **kw),
                    "moment_bwd": lambda: ops.moment_bwd(grid, rho, mass, m_bar, **kw),
                }
                for name, fn in {**fwd, **bwd}.items():
                    row[name] = _time(fn)
                rows.append(row)
                results[(strategy, hashing)] = (
                    rho, ops.smooth(grid, S, rho, mass, **kw),
                    ops.grad0(grid, S, rho, mass, **kw))
        base = results[("particle", "morton")]
        for outs in results.values():
            for a, b in zip(base, outs):
                scale = np.maximum(np.abs(a), 1e-12)
                dev = max(dev, float(np.max(np.abs(a - b) / scale)))
        if n <= BENCH_BRUTE_LIMIT:
            got = _brute_density(x[0], mass, eps)
            scale = np.maximum(np.abs(got), 1e-12)
            dev = max(dev, float(np.max(np.abs(got - base[0][0]) / scale)))

    xb = _bench_cloud(rng, brute_at, eps)
    brute_ms = _time(lambda: _brute_density(xb[0], 1.0 / brute_at, eps), repeats=1)
    grid_ms = _time(lambda: ops.density(build_grid(xb, eps), 1.0 / brute_at),
                    repeats=1)
    return {"rows": rows, "histograms": hists, "max_rel_dev": dev,
            "brute": {"n": brute_at, "brute_ms": brute_ms,
                      "grid_ms": grid_ms,
                      "speedup": brute_ms / max(grid_ms, 1e-9)}}


def cmd_bench(args):
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"bad --sizes value: {args.sizes!r}")
    if not sizes or min(sizes) < 2:
        raise InputError(f"--sizes needs counts >= 2, got {args.sizes!r}")
    rep = bench_report(sizes, args.brute_at)
    ops_order = ["build", "density", "smooth", "grad0", "density_grad",
                 "moment", "density_bwd", "smooth_bwd", "grad0_bwd",
                 "density_grad_bwd", "moment_bwd"]
    head = f"{'n':>6} {'strategy':>8} {'hashing':>9}" + \
        "".join(f"{k:>{max(len(k), 8) + 1}}" for k in ops_order)
    print(head)
    for row in rep["rows"]:
        line = f"{row['n']:>6} {row['strategy']:>8} {row['hashing']:>9}"
        for k in ops_order:
            line += f" {row[k]:>{max(len(k), 8)}.3f}"
        print(line + "  [ms]")
    print()
    for n, h in rep["histograms"].items():
        buckets = " ".join(f"{k}:{v}" for k, v in h["buckets"].items())
        print(f"neighbors n={n}: mean {h['mean']:.1f} max {h['max']} "
              f"({h['sampled']} sampled)  {buckets}")
    br = rep["brute"]
    print(f"brute density at n={br['n']}: {br['brute_ms']:.1f} ms vs "
          f"grid {br['grid_ms']:.1f} ms -> {br['speedup']:.1f}x")
    print(f"max rel deviation across strategies/hashings/brute: "
          f"{rep['max_rel_dev']:.3e}")
    return 0


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
             "run": cmd_run, "serve": cmd_serve}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "print_config", False):
            print(format_config(load_config(args)), end="")
            return 0
        return _COMMANDS[args.command](args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
