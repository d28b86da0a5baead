"""Command-line entry point: params, forward, bench, gradcheck, train-toy, make-scene.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from threadpoolctl import threadpool_limits

from .network import PRESET_NAMES, ConfigError, build_model, forward, load_checkpoint, preset, save_checkpoint
from .pointcloud import FormatError, ParseError, make_batch, make_synthetic_scene, read_any, write_any
from .profiler import ProfileError, emit_report, profile_latency, profile_params
from .serialization import CurveKind
from .train import DivergenceError, make_toy_scene, model_gradcheck, train_toy
from .voxel import voxelize

THREADS_ENV = "LITEPT_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _split(text: str) -> tuple[int, int, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected dx:dy:dz, got {text!r}")
    try:
        return tuple(int(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers in dx:dy:dz, got {text!r}") from None


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _model_flags(p, default="s"):
    p.add_argument("--model", choices=PRESET_NAMES, default=default, help="architecture preset")
    p.add_argument("--curve", choices=[k.value for k in CurveKind], default=None,
                   help="pin one serialization curve for every attention block")
    p.add_argument("--rope-base", type=_positive_float, default=None, help="rotary base frequency (default 100)")
    p.add_argument("--rope-mode", choices=("cartesian", "spherical"), default=None, help="rotary coordinate system")
    p.add_argument("--rope-split", type=_split, default=None, metavar="DX:DY:DZ",
                   help="per-head axis sub-dimensions, each even, summing to the head dim")
    p.add_argument("--no-rope", action="store_true", help="disable the rotary embedding (ablation)")


def _common_flags(p):
    p.add_argument("--seed", type=int, default=0, help="seed for weights and synthetic data")
    p.add_argument("--threads", type=int, default=1,
                   help=f"BLAS thread count (default 1; env {THREADS_ENV} overrides)")
    p.add_argument("--grid-size", type=_positive_float, default=0.02, help="voxel size in metres (default 0.02)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hybridpt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("params", help="per-stage parameter audit")
    _model_flags(p)
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")

    p = sub.add_parser("forward", help="per-point logits for a scene file")
    _model_flags(p)
    _common_flags(p)
    p.add_argument("--input", required=True, help="scene file (.lptc binary or ASCII table)")
    p.add_argument("--out", required=True, help="logits file; .lptc binary or ASCII by extension")
    p.add_argument("--weights", default=None, help="checkpoint to load instead of seeded init")

    p = sub.add_parser("bench", help="per-stage latency breakdown on a synthetic scene")
    _model_flags(p)
    _common_flags(p)
    p.add_argument("--points", type=int, default=100_000, help="raw synthetic points before voxelization")
    p.add_argument("--extent", type=_positive_float, default=None,
                   help="cube side in metres (default scales to keep density near a 2 m, 50k-point scene)")
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", help="end-to-end gradient vs central differences")
    _model_flags(p, default="micro")
    _common_flags(p)
    p.add_argument("--samples", type=int, default=30, help="parameter entries to check")
    p.add_argument("--points", type=int, default=400)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("train-toy", help="overfit a labelled synthetic scene")
    _model_flags(p, default="micro")
    _common_flags(p)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=_positive_float, default=1e-3)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--input", default=None, help="labelled scene file instead of the synthetic slab scene")
    p.add_argument("--out", default=None, help="CSV loss curve destination (default stdout)")
    p.add_argument("--save-weights", default=None, help="checkpoint path for the trained weights")

    p = sub.add_parser("make-scene", help="write a labelled synthetic scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--extent", type=_positive_float, default=2.0, help="cube side in metres")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--grid-size", type=_positive_float, default=None,
                   help="voxelize before writing (stores grid coords in the header)")
    p.add_argument("--out", required=True)
    return ap


def _config(args, in_channels: int | None = None):
    over = {}
    if args.rope_base is not None:
        over["rope_base"] = args.rope_base
    if args.rope_mode is not None:
        over["rope_mode"] = args.rope_mode
    if args.rope_split is not None:
        over["rope_split"] = args.rope_split
    if args.no_rope:
        over["rope_enabled"] = False
    if args.curve is not None:
        over["curve"] = args.curve
    if in_channels is not None:
        over["in_channels"] = in_channels
    return preset(args.model, **over)


def _threads(args) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return max(1, args.threads)


def cmd_params(args) -> int:
    emit_report(profile_params(_config(args)), args.format, args.out)
    return EXIT_OK


def cmd_forward(args) -> int:
    scene = read_any(args.input)
    vox = voxelize(scene, args.grid_size)
    if args.weights:
        weights = load_checkpoint(args.weights)
    else:
        weights = build_model(_config(args, vox.n_channels), args.seed)
    logits = forward(weights, vox).logits.data
    write_any(make_batch(vox.coords, logits, offsets=vox.batch_offsets), args.out)
    print(f"wrote {logits.shape[0]} x {logits.shape[1]} logits to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.points < 1:
        raise UsageError("--points must be >= 1")
    extent = args.extent if args.extent is not None else 2.0 * (args.points / 50_000) ** (1 / 3)
    scene = voxelize(make_synthetic_scene(args.seed, args.points, extent), args.grid_size)
    weights = build_model(_config(args, scene.n_channels), args.seed)
    report = profile_latency(weights, scene, reps=args.reps, warmup=args.warmup, threads=_threads(args))
    report.meta["raw_points"] = args.points
    emit_report(report, args.format, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    scene = make_toy_scene(args.seed, n_points=args.points, n_classes=cfg.num_classes, grid_size=args.grid_size)
    res = model_gradcheck(cfg, args.seed, args.samples, scene=scene)
    ok = res.max_rel_error < args.tol
    print(f"checked {len(res.checked)} parameter entries")
    print(f"max relative error {res.max_rel_error:.3e}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_train_toy(args) -> int:
    if args.input:
        scene = voxelize(read_any(args.input), args.grid_size)
        if scene.labels is None:
            raise ValueError(f"{args.input}: train-toy needs per-point labels")
        n_classes = int(scene.labels.max()) + 1
    else:
        n_classes = args.classes
        scene = make_toy_scene(args.seed, args.points, n_classes, grid_size=args.grid_size)
    cfg = replace(_config(args, scene.n_channels), num_classes=max(n_classes, 1))
    res = train_toy(cfg, scene, steps=args.steps, lr=args.lr, seed=args.seed)
    lines = ["step,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(res.losses)]
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    if args.save_weights:
        save_checkpoint(res.weights, args.save_weights)
    print(f"# points {scene.n_points} final_loss {res.losses[-1]:.6g} accuracy {res.accuracy:.6f}")
    return EXIT_OK


def cmd_make_scene(args) -> int:
    scene = make_synthetic_scene(args.seed, args.points, args.extent, args.classes)
    if args.grid_size is not None:
        scene = voxelize(scene, args.grid_size)
    write_any(scene, args.out)
    print(f"wrote {scene.n_points} points to {args.out}")
    return EXIT_OK


COMMANDS = {"params": cmd_params, "forward": cmd_forward, "bench": cmd_bench, "gradcheck": cmd_gradcheck,
            "train-toy": cmd_train_toy, "make-scene": cmd_make_scene}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = _threads(args) if hasattr(args, "threads") else 1
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (OSError, FormatError, ParseError, ConfigError, ProfileError, DivergenceError, ValueError,
            RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
