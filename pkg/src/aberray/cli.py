"""Command-line interface.

Subcommands cover the pipeline end to end: spot diagrams (trace), PSF
kernels (psf), surrogate fitting and scoring (fit-surrogate,
eval-surrogate), focal-stack rendering (render-stack), classical
depth-from-focus (estimate-depth, eval, error-map), and canned desk-scale
reproductions (repro).

Every run writes a manifest (resolved configuration, seed, version, and
SHA-256 digests of inputs and outputs) next to its outputs, atomically.
Exit codes: 0 success, 2 usage error, 1 runtime error with one
machine-parseable line on stderr. ``ABERRAY_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import images as imageio
from .dff import compute_metrics, estimate_depth, radial_error_map, radial_ratio
from .experiments import domain_gap_experiment, plane_argmax_flip, psf_montage
from .lens import focus_to, load_lens, paraxial_analyze
from .parallel import ParallelMap
from .psf import Frustum, write_psf_dataset
from .raytrace import trace_point
from .render import (
    RgbdImage,
    load_stack_manifest,
    save_stack,
    simulate_stack,
)
from .surrogate import (
    TrainConfig,
    build_grid_model,
    default_test_lattice,
    evaluate_surrogate,
    load_mlp,
    save_mlp,
    train_mlp,
)

log = logging.getLogger("aberray.cli")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, subcommand: str, config: dict, seed,
                   inputs, outputs) -> Path:
    """Atomic run manifest next to the outputs."""
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs if Path(p).is_file()},
    }
    path = out_dir / f"manifest-{subcommand}.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def _resolved(args: argparse.Namespace) -> dict:
    def conv(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, np.ndarray):
            return [float(x) for x in v]
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return {k: conv(v) for k, v in vars(args).items() if k != "func"}


def _common(parser, lens=True, out_dir=True):
    if lens:
        parser.add_argument("--lens", required=True,
                            help="lens file path or builtin name")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    if out_dir:
        parser.add_argument("--out", type=Path, default=Path("."),
                            help="output directory")


def _parse_point(text: str) -> np.ndarray:
    parts = [float(t) for t in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("point must be x,y,z in meters")
    return np.array(parts)


def _provider_from_args(args, lens):
    if args.provider in ("gaussian", "raytraced"):
        return args.provider
    if args.provider == "mlp":
        if not args.model:
            raise ValueError("--provider mlp needs --model FILE")
        return load_mlp(args.model)
    if args.provider == "grid":
        # built on the fly from defaults; kernels reuse the render seed
        log.info("building grid model (20 log-spaced foci, 20 depths, 8x8)")
        return build_grid_model(
            lens, np.geomspace(0.2, 20.0, 20), depths=20, per_plane=(8, 8),
            spp=1024, seed=args.seed, pixel_pitch_mm=args.pitch,
        )
    raise ValueError(f"unknown provider {args.provider}")


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------


def cmd_trace(args) -> int:
    lens = load_lens(args.lens)
    focused = focus_to(lens, args.focus) if args.focus else lens
    spot = trace_point(focused, args.point, spp=args.spp, sampler_seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    csv = args.out / "spot.csv"
    np.savetxt(csv, spot.hits, delimiter=",", header="x_mm,y_mm", comments="")
    write_manifest(args.out, "trace", _resolved(args), args.seed,
                   [args.lens], [csv])
    print(f"{len(spot.hits)}/{spot.emitted_count} rays reached the sensor -> {csv}")
    return 0


def cmd_psf(args) -> int:
    lens = load_lens(args.lens)
    focused = focus_to(lens, args.focus)
    frustum = Frustum.from_lens(lens, depth_norm=args.depth_norm)
    from .psf import normalize_query, raytraced_psfs

    x, y, z = args.point
    query = normalize_query(x, y, z, args.focus, frustum)
    kernels = raytraced_psfs(focused, np.array([[x, y, z]]), args.spp,
                             args.seed, args.pitch, k=args.k)
    spot = trace_point(focused, args.point, spp=args.spp, sampler_seed=args.seed)

    args.out.mkdir(parents=True, exist_ok=True)
    grid_path = args.out / "psf.psfg"
    write_psf_dataset(grid_path, kernels.astype(np.float32),
                      np.array([query.as_input()], dtype=np.float32))
    csv = args.out / "spot.csv"
    np.savetxt(csv, spot.hits, delimiter=",", header="x_mm,y_mm", comments="")
    write_manifest(args.out, "psf", _resolved(args), args.seed,
                   [args.lens], [grid_path, csv])
    print(f"PSF kernel ({args.k}x{args.k}, sum={kernels.sum():.6f}) -> {grid_path}")
    return 0


def cmd_fit_surrogate(args) -> int:
    lens = load_lens(args.lens)
    config = TrainConfig(
        iterations=args.iters,
        batch_points=args.batch,
        seed=args.seed,
        spp_groundtruth=args.spp,
        k=args.k,
        pixel_pitch_mm=args.pitch,
        depth_norm=args.depth_norm,
    )
    pmap = ParallelMap(args.threads)
    t0 = time.perf_counter()
    every = max(1, args.iters // 20)
    model, losses = train_mlp(
        lens, config, pmap=pmap,
        progress=lambda it, loss: (
            log.info("iter %d/%d loss %.3e", it, args.iters, loss)
            if it % every == 0 else None),
    )
    seconds = time.perf_counter() - t0
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_mlp(out_path, model, config)
    loss_path = out_path.with_suffix(".loss.csv")
    np.savetxt(loss_path, losses, delimiter=",", header="loss", comments="")
    write_manifest(out_path.parent, "fit-surrogate", _resolved(args), args.seed,
                   [args.lens], [out_path, loss_path])
    print(f"trained {args.iters} iterations in {seconds:.1f}s -> {out_path}")
    return 0


def cmd_eval_surrogate(args) -> int:
    lens = load_lens(args.lens)
    lattice = default_test_lattice()
    pmap = ParallelMap(args.threads)
    rows = []
    if args.model:
        model = load_mlp(args.model)
        res = evaluate_surrogate(model, lens, lattice, spp=args.spp,
                                 seed=args.seed, pmap=pmap)
        rows.append(("mlp", res))
    if args.grid:
        grid = build_grid_model(lens, np.geomspace(0.2, 20.0, 20), depths=20,
                                per_plane=(8, 8), spp=1024, seed=args.seed,
                                pixel_pitch_mm=args.pitch, pmap=pmap)
        res = evaluate_surrogate(grid, lens, lattice, spp=args.spp,
                                 seed=args.seed, pmap=pmap)
        rows.append(("grid", res))
    if not rows:
        raise ValueError("nothing to evaluate: pass --model and/or --grid")
    print(f"{'method':8s} {'l1':>10s} {'l2':>10s} {'l1/kernel':>12s} "
          f"{'l2/kernel':>12s} {'time(min)':>10s}")
    for name, res in rows:
        print(f"{name:8s} {res.l1:10.3e} {res.l2:10.3e} {res.l1_per_kernel:12.4e} "
              f"{res.l2_per_kernel:12.4e} {res.seconds / 60:10.2f}")
    return 0


def cmd_render_stack(args) -> int:
    lens = load_lens(args.lens)
    rgb = imageio.load_rgb(args.rgb)
    depth = imageio.load_depth(args.depth, args.depth_scale)
    image = RgbdImage(rgb, depth, lens, name=str(args.rgb))
    provider = _provider_from_args(args, lens)
    pmap = ParallelMap(args.threads)
    stack = simulate_stack(image, size=args.stack_size, perturb_frac=args.perturb,
                           seed=args.seed, provider=provider, spp=args.spp,
                           pmap=pmap)
    manifest = save_stack(args.out, stack)
    outputs = [args.out / f for f in json.loads(manifest.read_text())["frames"]]
    write_manifest(args.out, "render-stack", _resolved(args), args.seed,
                   [args.rgb, args.depth], [manifest, *outputs])
    print(f"rendered {stack.size} frames ({stack.psf_source}) -> {manifest}")
    return 0


def cmd_estimate_depth(args) -> int:
    stack = load_stack_manifest(args.stack)
    depth, _ = estimate_depth(stack, temperature=args.temperature,
                              measure=args.measure, window=args.window)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    imageio.write_pfm(out_path, depth)
    write_manifest(out_path.parent, "estimate-depth", _resolved(args), args.seed,
                   [args.stack], [out_path])
    print(f"depth map ({depth.shape[1]}x{depth.shape[0]}, "
          f"{depth.min():.3f}..{depth.max():.3f} m) -> {out_path}")
    return 0


_METRIC_COLS = ("mae", "mse", "rmse", "abs_rel", "sqr_rel",
                "delta1", "delta2", "delta3")


def cmd_eval(args) -> int:
    pred = imageio.read_pfm(args.pred)
    gt = imageio.read_pfm(args.gt)
    m = compute_metrics(pred, gt)
    # and in the normalized [0, 1] depth convention
    lo, hi = 0.2, 20.0
    mn = compute_metrics((np.clip(pred, lo, hi) - lo) / (hi - lo) + 1e-9,
                         (np.clip(gt, lo, hi) - lo) / (hi - lo) + 1e-9)
    header = " ".join(f"{c:>9s}" for c in _METRIC_COLS)
    print(f"{'unit':8s} {header}")
    for label, mm in (("meters", m), ("norm", mn)):
        vals = " ".join(f"{getattr(mm, c):9.4f}" for c in _METRIC_COLS)
        print(f"{label:8s} {vals}")
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(args.csv, "w") as fh:
            fh.write(",".join(_METRIC_COLS) + "\n")
            fh.write(",".join(f"{getattr(m, c):.6f}" for c in _METRIC_COLS) + "\n")
    return 0


def _colormap(x: np.ndarray) -> np.ndarray:
    """Simple blue->cyan->yellow->red map for [0, 1] data."""
    t = np.clip(x, 0.0, 1.0)
    r = np.clip(2.0 * t - 0.5, 0, 1)
    g = np.clip(1.5 - np.abs(2.0 * t - 1.0) * 1.5, 0, 1)
    b = np.clip(1.0 - 2.0 * t, 0, 1)
    return np.stack([r, g, b], axis=2)


def cmd_error_map(args) -> int:
    maps = []
    for pred_path, gt_path in zip(args.pred, args.gt):
        maps.append(imageio.read_pfm(pred_path) - imageio.read_pfm(gt_path))
    mean_map = radial_error_map(maps)
    args.out.mkdir(parents=True, exist_ok=True)
    pfm = args.out / "error_map.pfm"
    png = args.out / "error_map.png"
    imageio.write_pfm(pfm, mean_map)
    peak = float(mean_map.max()) or 1.0
    imageio.save_rgb(png, _colormap(mean_map / peak), encode_srgb=False)
    ratio = radial_ratio(mean_map)
    write_manifest(args.out, "error-map", _resolved(args), args.seed,
                   list(args.pred) + list(args.gt), [pfm, png])
    print(f"mean |error| map -> {pfm} (annulus/center ratio {ratio:.2f})")
    return 0


def cmd_repro(args) -> int:
    lens = load_lens(args.lens)
    args.out.mkdir(parents=True, exist_ok=True)
    pmap = ParallelMap(args.threads)
    if args.what == "fig3":
        mlp = load_mlp(args.model) if args.model else None
        montage = psf_montage(lens, mlp=mlp, seed=args.seed)
        outputs = []
        for method, kernels in montage.items():
            path = args.out / f"fig3_{method}.psfg"
            nd, nf, k, _ = kernels.shape
            queries = np.zeros((nd * nf, 4), dtype=np.float32)
            write_psf_dataset(path, kernels.reshape(-1, k, k).astype(np.float32),
                              queries)
            outputs.append(path)
            print(f"fig3 {method}: {nd} depths x {nf} field positions -> {path}")
        write_manifest(args.out, "repro", _resolved(args), args.seed,
                       [args.lens], outputs)
        return 0
    if args.what == "table1":
        if not args.model:
            raise ValueError("repro table1 needs --model FILE")
        args.grid = True
        args.spp = args.spp or 2048
        args.pitch = 0.05
        return cmd_eval_surrogate(args)
    if args.what == "fig9":
        res = domain_gap_experiment(lens, seed=args.seed, pmap=pmap)
        outputs = []
        for provider, emap in res.mean_error_maps.items():
            pfm = args.out / f"fig9_{provider}.pfm"
            png = args.out / f"fig9_{provider}.png"
            imageio.write_pfm(pfm, emap)
            peak = float(max(m.max() for m in res.mean_error_maps.values()))
            imageio.save_rgb(png, _colormap(emap / peak), encode_srgb=False)
            outputs += [pfm, png]
            print(f"fig9 {provider}: annulus/center ratio {res.ratios[provider]:.2f}")
        center, edge, corner = plane_argmax_flip(lens, pmap=pmap, h=240, w=320)
        print(f"fronto-parallel plane argmax frames: center {center}, "
              f"edge {edge}, corner {corner}")
        write_manifest(args.out, "repro", _resolved(args), args.seed,
                       [args.lens], outputs)
        return 0
    raise ValueError(f"unknown repro target {args.what!r}")


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aberray",
        description="Ray-traced lens simulation, PSF surrogates, focal "
                    "stacks, and depth-from-focus analysis.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("trace", help="spot diagram of a point source")
    _common(p)
    p.add_argument("--point", type=_parse_point, required=True,
                   help="object point x,y,z in meters")
    p.add_argument("--focus", type=float, default=None,
                   help="focus distance in meters (default: as loaded)")
    p.add_argument("--spp", type=int, default=2048)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("psf", help="ray-traced PSF kernel for a point")
    _common(p)
    p.add_argument("--point", type=_parse_point, required=True)
    p.add_argument("--focus", type=float, required=True)
    p.add_argument("--spp", type=int, default=2048)
    p.add_argument("--k", type=int, default=11)
    p.add_argument("--pitch", type=float, default=0.05,
                   help="sensor pixel pitch in mm")
    p.add_argument("--depth-norm", choices=("linear", "inverse"), default="linear")
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("fit-surrogate", help="train the PSF network")
    _common(p, out_dir=False)
    p.add_argument("--iters", type=int, default=50_000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--spp", type=int, default=1024)
    p.add_argument("--k", type=int, default=11)
    p.add_argument("--pitch", type=float, default=0.05)
    p.add_argument("--depth-norm", choices=("linear", "inverse"), default="linear")
    p.add_argument("--out", type=Path, required=True, help="model file (.mlpw)")
    p.set_defaults(func=cmd_fit_surrogate)

    p = sub.add_parser("eval-surrogate", help="score surrogates on the test lattice")
    _common(p, out_dir=False)
    p.add_argument("--model", type=Path, default=None, help=".mlpw model file")
    p.add_argument("--grid", action="store_true",
                   help="also build and score the kernel-grid baseline")
    p.add_argument("--spp", type=int, default=2048)
    p.add_argument("--pitch", type=float, default=0.05)
    p.set_defaults(func=cmd_eval_surrogate)

    p = sub.add_parser("render-stack", help="simulate a focal stack from RGBD")
    _common(p)
    p.add_argument("--rgb", type=Path, required=True)
    p.add_argument("--depth", type=Path, required=True)
    p.add_argument("--depth-scale", type=float, default=None,
                   help="meters per unit for 16-bit PNG depth")
    p.add_argument("--provider", choices=("mlp", "grid", "gaussian", "raytraced"),
                   default="gaussian")
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--stack-size", type=int, default=10)
    p.add_argument("--perturb", type=float, default=0.25)
    p.add_argument("--spp", type=int, default=2048)
    p.add_argument("--pitch", type=float, default=0.05)
    p.set_defaults(func=cmd_render_stack)

    p = sub.add_parser("estimate-depth", help="classical DfF over a stack")
    p.add_argument("--stack", type=Path, required=True, help="stack.json manifest")
    p.add_argument("--measure", choices=("modified_laplacian", "gradient_magnitude"),
                   default="modified_laplacian")
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=Path, required=True, help="output depth .pfm")
    p.set_defaults(func=cmd_estimate_depth)

    p = sub.add_parser("eval", help="depth metrics: predicted vs ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--csv", type=Path, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("error-map", help="mean |depth error| map over scenes")
    p.add_argument("--pred", type=Path, action="append", required=True)
    p.add_argument("--gt", type=Path, action="append", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(func=cmd_error_map)

    p = sub.add_parser("repro", help="desk-scale reproductions (fig3|table1|fig9)")
    _common(p)
    p.add_argument("what", choices=("fig3", "table1", "fig9"))
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--grid", action="store_true")
    p.add_argument("--spp", type=int, default=None)
    p.add_argument("--pitch", type=float, default=0.05)
    p.set_defaults(func=cmd_repro)

    return parser


def run(argv=None) -> int:
    level = os.environ.get("ABERRAY_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # runtime errors: one parseable line on stderr
        payload = {"error": type(exc).__name__, "message": str(exc),
                   "subcommand": getattr(args, "subcommand", None)}
        print(f"aberray-error: {json.dumps(payload)}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
