"""Dataset-level pipeline stages tying the modules together.

Each stage reads its inputs from a dataset directory and writes its outputs
back, so stages can be run individually or chained (masks -> sensmaps ->
b0map -> kfilter -> recon).
"""

from __future__ import annotations

import csv

import numpy as np

from . import b0map as b0mod
from . import engine, kfilter, masks, sensmaps, simulate
from .core import Dataset, Grid

CSV_SCHEMA_COMMENT = "# nfsense csv schema v1"


def run_simulate(out_path, config: dict, seed: int = 0) -> Dataset:
    """Generate a synthetic dataset (prescan, trajectory, raw signal, truth)."""
    rng = np.random.default_rng(seed)
    gcfg = config.get("grid", {})
    grid = Grid(tuple(gcfg.get("dims", (32, 32, 1))), tuple(gcfg.get("fov_m", (0.22, 0.22, 0.002))))

    pcfg = config.get("phantom", {})
    rho, support = simulate.make_phantom(
        grid, pcfg.get("kind", "discs"), fill=pcfg.get("fill", 0.5),
        smooth_phase=pcfg.get("smooth_phase", False),
    )
    ccfg = config.get("coils", {})
    n_coils = int(ccfg.get("count", 4))
    sens = simulate.synth_coils(grid, n_coils, decay=ccfg.get("decay", 0.6))
    bcfg = config.get("b0", {})
    b0 = simulate.make_b0(grid, bcfg.get("pattern", "zero"), bcfg.get("amplitude", 200.0))

    # prescan: echo-n image per coil with off-resonance phase accrual
    scfg = config.get("prescan", {})
    n_echo = int(scfg.get("echoes", 8))
    dte = float(scfg.get("delta_te_s", 1e-3))
    te0 = float(scfg.get("te0_s", 4e-3))
    te = te0 + dte * np.arange(n_echo)
    prescan = np.empty((n_echo, n_coils, grid.nvox), dtype=complex)
    for n in range(n_echo):
        img = rho * np.exp(1j * b0 * (n * dte))
        prescan[n] = (sens * img[:, None]).T
    pre_noise = float(scfg.get("noise_sd", 0.0))
    if pre_noise > 0:
        prescan += pre_noise * (
            rng.standard_normal(prescan.shape) + 1j * rng.standard_normal(prescan.shape)
        )

    # trajectory and raw signal
    tcfg = config.get("trajectory", {})
    kind = tcfg.get("kind", "spiral")
    ndim = grid.ndim
    k_nyq = np.pi * min(n / f for n, f in zip(grid.dims[:ndim], grid.fov_m[:ndim]))
    if kind == "spiral":
        temporal = simulate.make_spiral(
            int(tcfg.get("samples", 4 * grid.nvox // max(1, int(tcfg.get("undersample", 1))))),
            turns=float(tcfg.get("turns", grid.dims[0] / 2)),
            k_max=float(tcfg.get("kmax_frac", 1.0)) * k_nyq,
            readout_s=float(tcfg.get("readout_s", 0.03)),
            ndim=ndim,
            n_planes=int(tcfg.get("kz_planes", grid.dims[2])),
            kz_max=np.pi * grid.dims[2] / grid.fov_m[2] if ndim == 3 else 0.0,
        )
    elif kind == "cartesian":
        temporal = simulate.make_cartesian(
            grid, undersample=int(tcfg.get("undersample", 1)),
            axis=int(tcfg.get("axis", 1)), readout_s=float(tcfg.get("readout_s", 0.03)),
        )
    else:
        raise simulate.SimulateError(f"unknown trajectory kind {kind!r}")

    order = int(config.get("order", 1))
    spatial, temporal_full = engine.build_bases(
        b0, np.ones(grid.nvox, dtype=bool), grid,
        temporal[:, 0], temporal[:, 1:], order=1,
    )
    if order > 1:
        # append small synthetic higher-order field-term time courses
        from .core import grid_coordinates

        harm = simulate.solid_harmonics(order, grid_coordinates(grid), ndim=ndim)
        extra = harm.shape[1] - (temporal.shape[1] - 1)
        t = temporal[:, 0]
        t_end = t[-1] if t[-1] > 0 else 1.0
        scale = float(config.get("higher_order_scale", 0.05))
        extra_cols = []
        half_fov = min(grid.fov_m[:ndim]) / 2
        for p in range(extra):
            amp = scale * k_nyq / half_fov ** (1 if p < 5 else 2)
            extra_cols.append(amp * np.sin(2 * np.pi * (p + 1) * t / t_end))
        spatial = np.vstack([spatial[0:1], harm.T])
        temporal_full = np.column_stack([temporal, np.column_stack(extra_cols)])

    noise_sd = float(config.get("noise", {}).get("sigma_sd", 0.0))
    sigma = simulate.forward_signal(rho, sens, spatial, temporal_full, noise_sd, rng)

    ds = Dataset.create(
        out_path, grid,
        counts={
            "k_samples": int(sigma.shape[0]), "coils": n_coils,
            "field_terms": int(temporal_full.shape[1] - 1), "echoes": n_echo,
        },
        echo_times_s=te,
    )
    ds.save_array("prescan", prescan, "c128")
    ds.save_array("sigma", sigma, "c128")
    ds.save_array("ktemporal", temporal_full, "f64")
    ds.save_array("phantom", rho, "c128")
    ds.save_array("support_true", support.astype(np.uint8), "u8")
    ds.save_array("b0_true", b0, "f64")
    ds.save_array("sens_true", sens, "c128")
    return ds


def run_masks(ds: Dataset, bias_degree: int = 3, dilate: int = 2,
              threshold: float | None = None, save_bias: bool = False):
    prescan = ds.load_prescan()
    mag = masks.rss_combine(prescan, echo=0)
    bias = masks.estimate_bias_field(mag, ds.grid, degree=bias_degree)
    corrected = mag / bias
    if threshold is None:
        threshold = masks.trusted_threshold(corrected)
    pair = masks.compute_masks(corrected, ds.grid, threshold, dilation_radius=dilate)
    ds.save_array("mask_t", pair.trusted.astype(np.uint8), "u8")
    ds.save_array("mask_r", pair.recon.astype(np.uint8), "u8")
    if save_bias:
        ds.save_array("bias", bias, "f64")
    return pair


def run_sensmaps(ds: Dataset, alpha_s: float | None = None, precond: str = "ic0"):
    prescan = ds.load_prescan()
    pair = ds.load_masks()
    if alpha_s is None:
        alpha_s = sensmaps.default_alpha_s(ds.grid)
    raw = sensmaps.estimate_svd(prescan, pair.trusted)
    maps = sensmaps.recombine(raw, ds.grid, pair.trusted, pair.recon, alpha_s,
                              precond=precond)
    ds.save_array("sens", maps, "c128")
    return maps


def run_b0map(ds: Dataset, alpha_b: float | None = None, precond: str = "ic0"):
    prescan = ds.load_prescan()
    maps = ds.load_array("sens")
    field = b0mod.estimate_b0(prescan, maps)
    if alpha_b is None:
        alpha_b = b0mod.default_alpha_b(ds.grid, field.stderr)
    smoothed = b0mod.smooth_b0(field, ds.grid, alpha_b, precond=precond)
    ds.save_array("b0", smoothed, "f64")
    ds.save_array("b0_stderr", field.stderr, "f64")
    ds.save_array("b0_beta", field.beta, "f64")
    return smoothed, field


def run_kfilter(ds: Dataset, dilate: int = 0, per_slice: bool = False):
    temporal = ds.load_array("ktemporal")
    d = ds.grid.ndim
    k_coords = temporal[:, 1:1 + d]
    filt = kfilter.build_filter(k_coords, ds.grid, per_slice=per_slice)
    if dilate > 0:
        filt = kfilter.dilate_filter(filt, ds.grid, dilate)
    ds.save_array("kfilter", filt, "f64")
    return filt


def infer_order(n_terms: int, ndim: int) -> int:
    table = {2: {2: 1, 8: 2, 15: 3}, 3: {3: 1, 8: 2, 15: 3}}
    try:
        return table[ndim][n_terms]
    except KeyError:
        raise engine.EngineError(
            f"cannot infer harmonic order from {n_terms} field terms on a {ndim}D grid"
        ) from None


def build_encoding_inputs(ds: Dataset, n_iter: int, order: int | None = None,
                          zero_b0: bool = False, conjugate_trajectory: bool = False,
                          use_filter: bool = True,
                          block_starts=None) -> engine.EncodingInputs:
    grid = ds.grid
    sigma = ds.load_array("sigma")
    temporal = ds.load_array("ktemporal")
    mask_r = ds.load_array("mask_r").astype(bool).reshape(-1)
    sens_full = ds.load_array("sens")
    b0 = ds.load_array("b0").reshape(-1)
    if zero_b0:
        b0 = np.zeros_like(b0)
    if order is None:
        order = infer_order(temporal.shape[1] - 1, grid.ndim)
    times = temporal[:, 0]
    terms = temporal[:, 1:]
    if conjugate_trajectory:
        terms = -terms
        b0 = -b0
    spatial, temporal_b = engine.build_bases(b0, mask_r, grid, times, terms, order=order)
    sens_r = sens_full[mask_r]
    j = sensmaps.intensity_correction(sens_full, mask_r)[mask_r]
    filt = ds.load_array("kfilter").reshape(-1) if (use_filter and ds.has_array("kfilter")) else None
    return engine.EncodingInputs(
        sigma=sigma, spatial=spatial, temporal=temporal_b, sens=sens_r,
        intensity=j, kfilter=filt, mask_r=mask_r, grid=grid, n_iter=n_iter,
        block_starts=block_starts,
    )


def run_recon(ds: Dataset, n_iter: int, split_block: str = "full", order: int | None = None,
              zero_b0: bool = False, conjugate_trajectory: bool = False,
              memory_budget_bytes: int | None = None, callback=None):
    inputs = build_encoding_inputs(ds, n_iter, order=order, zero_b0=zero_b0,
                                   conjugate_trajectory=conjugate_trajectory)
    if split_block == "full":
        image, log = engine.recon_full(inputs, memory_budget_bytes, callback=callback)
    else:
        if split_block == "auto":
            budget = memory_budget_bytes or 2**28
            starts = engine.choose_block_starts(inputs.n_samples, inputs.n_voxels, budget)
        else:
            rows = int(split_block)
            starts = np.unique(list(range(0, inputs.n_samples, rows)) + [inputs.n_samples])
        inputs.block_starts = np.asarray(starts, dtype=int)
        image, log = engine.recon_split(inputs, callback=callback)
    ds.save_array("rho", image.values, "c128")
    return image, log


def write_cg_log_csv(log, path):
    with open(path, "w", newline="") as fh:
        fh.write(CSV_SCHEMA_COMMENT + "\n")
        writer = csv.writer(fh)
        writer.writerow(["iter", "res_norm", "sol_norm"])
        for i, (r, s) in enumerate(zip(log.residual_norms, log.solution_norms), start=1):
            writer.writerow([i, repr(r), repr(s)])


def write_timing_csv(log, path):
    with open(path, "w", newline="") as fh:
        fh.write(CSV_SCHEMA_COMMENT + "\n")
        writer = csv.writer(fh)
        writer.writerow(["phase_label", "seconds"])
        for label, sec in log.timings:
            writer.writerow([label, repr(sec)])


def read_cg_log_csv(path):
    iters, res, sol = [], [], []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    for row in rows[1:]:
        iters.append(int(row[0]))
        res.append(float(row[1]))
        sol.append(float(row[2]))
    return np.asarray(iters), np.asarray(res), np.asarray(sol)
