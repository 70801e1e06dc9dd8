"""Command-line front end for the reconstruction workflow.

Subcommands: simulate, masks, sensmaps, b0map, kfilter, recon, metrics,
lcurve, pipeline.  Exit codes: 0 success, 2 usage, 3 missing input,
4 invalid data/parameters, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import metrics as metricsmod
from . import pipeline
from .core import Dataset, DatasetError, Grid
from .engine import EngineError, MemoryBudgetError
from .kfilter import KFilterError
from .masks import MaskError
from .simulate import SimulateError
from .solver import SolverError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4
EXIT_NUMERICAL = 5


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--threads", type=int, default=None, help="cap internal parallelism")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--memory-budget", type=int, default=None,
                   help="phase-matrix memory budget in bytes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nfsense",
                                     description="non-FFT SENSE reconstruction workflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--phantom", choices=("discs", "shepp-like", "checker"))
    p.add_argument("--coils", type=int)
    p.add_argument("--traj", choices=("spiral", "cartesian"))
    p.add_argument("--undersample", type=int)
    p.add_argument("--noise", type=float, help="raw-signal noise sd per component")
    p.add_argument("--b0-pattern", choices=("zero", "linear", "blob"))
    p.add_argument("--b0-amplitude", type=float)
    _add_common(p)

    p = sub.add_parser("masks", help="compute trusted and reconstruction masks")
    p.add_argument("dataset", type=Path)
    p.add_argument("--bias-degree", type=int, default=3)
    p.add_argument("--dilate", type=int, default=2)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--save-bias", action="store_true")
    p.add_argument("--plot", action="store_true", help="write mask figures next to the data")
    _add_common(p)

    p = sub.add_parser("sensmaps", help="estimate and smooth sensitivity maps")
    p.add_argument("dataset", type=Path)
    p.add_argument("--alpha-s", type=float, default=None)
    p.add_argument("--precond", choices=("ic0", "jacobi", "none"), default="ic0")
    p.add_argument("--plot", action="store_true")
    _add_common(p)

    p = sub.add_parser("b0map", help="fit and smooth the off-resonance map")
    p.add_argument("dataset", type=Path)
    p.add_argument("--alpha-b", type=float, default=None)
    p.add_argument("--plot", action="store_true")
    _add_common(p)

    p = sub.add_parser("kfilter", help="build the k-space filter")
    p.add_argument("dataset", type=Path)
    p.add_argument("--dilate", type=int, default=0)
    p.add_argument("--per-slice", action="store_true")
    p.add_argument("--plot", action="store_true")
    _add_common(p)

    p = sub.add_parser("recon", help="run the CG reconstruction")
    p.add_argument("dataset", type=Path)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--split-block", default="full",
                   help="'full', 'auto', or a block row count")
    p.add_argument("--order", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--zero-b0", action="store_true",
                   help="ignore the B0 map (failure-mode study)")
    p.add_argument("--conjugate-trajectory", action="store_true",
                   help="negate the phase sign convention")
    p.add_argument("--log", type=Path, default=None, help="CG log CSV path")
    p.add_argument("--timing", type=Path, default=None, help="timing CSV path")
    p.add_argument("--plot", action="store_true")
    _add_common(p)

    p = sub.add_parser("metrics", help="SSIM / RMSE between two images")
    p.add_argument("test", type=Path)
    p.add_argument("ref", type=Path)
    p.add_argument("--dataset", type=Path, default=None,
                   help="dataset directory supplying the grid (needed for --ssim)")
    p.add_argument("--mask", type=Path, default=None)
    p.add_argument("--ssim", action="store_true")
    p.add_argument("--rmse", action="store_true")
    p.add_argument("--plot", type=Path, default=None, help="write an SSIM-map figure")
    _add_common(p)

    p = sub.add_parser("lcurve", help="L-curve corner from a CG log CSV")
    p.add_argument("log", type=Path)
    p.add_argument("--out", type=Path, default=None, help="curvature CSV path")
    p.add_argument("--plot", type=Path, default=None, help="L-curve figure path")
    _add_common(p)

    p = sub.add_parser("pipeline", help="masks -> sensmaps -> b0map -> kfilter -> recon")
    p.add_argument("dataset", type=Path)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--split-block", default="full")
    p.add_argument("--order", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--alpha-s", type=float, default=None)
    p.add_argument("--alpha-b", type=float, default=None)
    p.add_argument("--dilate", type=int, default=2)
    p.add_argument("--plot", action="store_true")
    _add_common(p)

    return parser


def _load_raw(path: Path, ds: Dataset | None):
    """Read an image file: a dataset array file (suffix-typed raw binary)."""
    suffix = path.suffix
    dtype = {".c128": np.complex128, ".f64": np.float64, ".u8": np.uint8}.get(suffix)
    if dtype is None:
        raise DatasetError(f"cannot infer dtype from suffix {suffix!r}")
    data = np.fromfile(path, dtype=dtype)
    return data


def _cmd_simulate(args):
    config = {}
    if args.config:
        with open(args.config, "rb") as fh:
            config = tomllib.load(fh)
    # flags win over config-file values
    if args.phantom:
        config.setdefault("phantom", {})["kind"] = args.phantom
    if args.coils:
        config.setdefault("coils", {})["count"] = args.coils
    if args.traj:
        config.setdefault("trajectory", {})["kind"] = args.traj
    if args.undersample:
        config.setdefault("trajectory", {})["undersample"] = args.undersample
    if args.noise is not None:
        config.setdefault("noise", {})["sigma_sd"] = args.noise
    if args.b0_pattern:
        config.setdefault("b0", {})["pattern"] = args.b0_pattern
    if args.b0_amplitude is not None:
        config.setdefault("b0", {})["amplitude"] = args.b0_amplitude
    ds = pipeline.run_simulate(args.out, config, seed=args.seed)
    print(f"simulate: wrote dataset to {ds.path} "
          f"(K={ds.manifest.counts['k_samples']}, coils={ds.manifest.counts['coils']})")
    return EXIT_OK


def _cmd_masks(args):
    ds = Dataset.load(args.dataset)
    pair = pipeline.run_masks(ds, bias_degree=args.bias_degree, dilate=args.dilate,
                              threshold=args.threshold, save_bias=args.save_bias)
    print(f"masks: trusted={int(pair.trusted.sum())} recon={int(pair.recon.sum())} voxels")
    if args.plot:
        from .report import save_map_figure
        save_map_figure(pair.trusted, ds.grid, ds.path / "mask_t.png", "trusted mask", "gray")
        save_map_figure(pair.recon, ds.grid, ds.path / "mask_r.png", "recon mask", "gray")
    return EXIT_OK


def _cmd_sensmaps(args):
    ds = Dataset.load(args.dataset)
    maps = pipeline.run_sensmaps(ds, alpha_s=args.alpha_s, precond=args.precond)
    print(f"sensmaps: wrote {maps.shape[1]} coil maps")
    if args.plot:
        from .report import save_image_figure
        save_image_figure(maps[:, 0], ds.grid, ds.path / "sens_coil0.png", "coil 0 map")
    return EXIT_OK


def _cmd_b0map(args):
    ds = Dataset.load(args.dataset)
    smoothed, field = pipeline.run_b0map(ds, alpha_b=args.alpha_b)
    print(f"b0map: range [{smoothed.min():.1f}, {smoothed.max():.1f}] rad/s")
    if args.plot:
        from .report import save_map_figure
        save_map_figure(smoothed, ds.grid, ds.path / "b0.png", "B0 [rad/s]", "RdBu_r")
        save_map_figure(field.stderr, ds.grid, ds.path / "b0_stderr.png", "fit stderr [rad]")
    return EXIT_OK


def _cmd_kfilter(args):
    ds = Dataset.load(args.dataset)
    filt = pipeline.run_kfilter(ds, dilate=args.dilate, per_slice=args.per_slice)
    frac = filt.mean()
    print(f"kfilter: pass fraction {frac:.3f}")
    if args.plot:
        from .report import save_map_figure
        save_map_figure(filt, ds.grid, ds.path / "kfilter.png", "k-space filter", "gray")
    return EXIT_OK


def _cmd_recon(args):
    ds = Dataset.load(args.dataset)
    image, log = pipeline.run_recon(
        ds, n_iter=args.iters, split_block=args.split_block, order=args.order,
        zero_b0=args.zero_b0, conjugate_trajectory=args.conjugate_trajectory,
        memory_budget_bytes=args.memory_budget,
    )
    res = log.residual_norms[-1] if log.residual_norms else float("nan")
    print(f"recon: {args.iters} iterations, final residual norm {res:.3e}")
    if args.log:
        pipeline.write_cg_log_csv(log, args.log)
    if args.timing:
        pipeline.write_timing_csv(log, args.timing)
    if args.plot:
        from .report import save_convergence_figure, save_image_figure
        save_image_figure(image.values, ds.grid, ds.path / "rho.png", "reconstruction")
        if log.residual_norms:
            save_convergence_figure(log.residual_norms, log.solution_norms,
                                    ds.path / "convergence.png")
    return EXIT_OK


def _cmd_metrics(args):
    ds = Dataset.load(args.dataset) if args.dataset else None
    test = _load_raw(args.test, ds)
    ref = _load_raw(args.ref, ds)
    mask = None
    if args.mask:
        mask = _load_raw(args.mask, ds).astype(bool)
    if not args.ssim and not args.rmse:
        args.rmse = True
    if args.rmse:
        print(f"rmse: {metricsmod.rmse(test, ref, mask):.6e}")
    if args.ssim:
        if ds is None:
            raise DatasetError("--ssim needs --dataset for the grid shape")
        grid = ds.grid
        t2 = np.abs(grid.to_array(test))[:, :, grid.dims[2] // 2]
        r2 = np.abs(grid.to_array(ref))[:, :, grid.dims[2] // 2]
        m2 = grid.to_array(mask)[:, :, grid.dims[2] // 2] if mask is not None else None
        mean, smap = metricsmod.ssim(t2, r2, mask=m2)
        print(f"ssim: {mean:.6f}")
        if args.plot:
            from .report import save_map_figure
            g2 = Grid((smap.shape[0], smap.shape[1], 1), (1.0, 1.0, 1.0))
            save_map_figure(smap.reshape(-1, order="F"), g2, args.plot, "SSIM map")
    return EXIT_OK


def _cmd_lcurve(args):
    _, res, sol = pipeline.read_cg_log_csv(args.log)
    result = metricsmod.lcurve_corner(res, sol)
    flag = "" if result.confident else " (low confidence: curve is nearly straight)"
    print(f"lcurve: corner at iteration {result.corner_iteration}{flag}")
    if args.out:
        import csv
        with open(args.out, "w", newline="") as fh:
            fh.write(pipeline.CSV_SCHEMA_COMMENT + "\n")
            writer = csv.writer(fh)
            writer.writerow(["iter", "curvature"])
            for i, c in enumerate(result.curvature, start=1):
                writer.writerow([i, repr(float(c))])
    if args.plot:
        from .report import save_lcurve_figure
        save_lcurve_figure(res, sol, result.corner_iteration, args.plot)
    return EXIT_OK


def _cmd_pipeline(args):
    ds = Dataset.load(args.dataset)
    stage = "masks"
    try:
        pipeline.run_masks(ds, dilate=args.dilate)
        stage = "sensmaps"
        pipeline.run_sensmaps(ds, alpha_s=args.alpha_s)
        stage = "b0map"
        pipeline.run_b0map(ds, alpha_b=args.alpha_b)
        stage = "kfilter"
        pipeline.run_kfilter(ds)
        stage = "recon"
        image, log = pipeline.run_recon(ds, n_iter=args.iters,
                                        split_block=args.split_block, order=args.order,
                                        memory_budget_bytes=args.memory_budget)
    except Exception as exc:
        raise type(exc)(f"[stage {stage}] {exc}") from exc
    pipeline.write_cg_log_csv(log, ds.path / "cg_log.csv")
    pipeline.write_timing_csv(log, ds.path / "timing.csv")
    if args.plot:
        from .report import save_convergence_figure, save_image_figure
        save_image_figure(image.values, ds.grid, ds.path / "rho.png", "reconstruction")
        save_convergence_figure(log.residual_norms, log.solution_norms,
                                ds.path / "convergence.png")
    print(f"pipeline: reconstruction written to {ds.path / 'rho.c128'}")
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "masks": _cmd_masks,
    "sensmaps": _cmd_sensmaps,
    "b0map": _cmd_b0map,
    "kfilter": _cmd_kfilter,
    "recon": _cmd_recon,
    "metrics": _cmd_metrics,
    "lcurve": _cmd_lcurve,
    "pipeline": _cmd_pipeline,
}


def _limit_threads(n):
    if n is None:
        return
    import os

    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(getattr(args, "threads", None))
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError,) as exc:
        print(f"nfsense {args.command}: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DatasetError as exc:
        missing = "missing" in str(exc).lower() or "no manifest" in str(exc).lower()
        print(f"nfsense {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISSING if missing else EXIT_INVALID
    except (MaskError, KFilterError, SimulateError, ValueError) as exc:
        print(f"nfsense {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except MemoryBudgetError as exc:
        print(f"nfsense {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SolverError, EngineError) as exc:
        print(f"nfsense {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
