"""Matrix-free SENSE reconstruction engine.

The encoding operator E maps voxel values to coil samples through the phase
matrix P = exp(i*K@R) and the sensitivity maps S.  Two CG drivers are
provided: `recon_full` materializes P once; `recon_split` recomputes blocks
of P once per CG iteration, trading compute for memory.  Both produce the
same result up to floating-point summation order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import Grid, ReconImage
from .kfilter import apply_filter
from .simulate import solid_harmonics


class EngineError(Exception):
    pass


class MemoryBudgetError(EngineError):
    """Full phase matrix would not fit; use the split variant."""


@dataclass
class EncodingInputs:
    """Inputs of the reconstruction: all voxel-indexed arrays are restricted
    to reconstruction-mask voxels (columns of R, rows of S)."""

    sigma: np.ndarray          # (K, Gamma) raw coil samples
    spatial: np.ndarray        # (P+1, L_R) spatial basis, row 0 = B0 [rad/s]
    temporal: np.ndarray       # (K, P+1) temporal basis, col 0 = t [s]
    sens: np.ndarray           # (L_R, Gamma) sensitivity maps
    intensity: np.ndarray      # (L_R,) intensity correction j
    kfilter: np.ndarray | None  # (L,) filter on the full grid, or None
    mask_r: np.ndarray         # (L,) bool, reconstruction support
    grid: Grid
    n_iter: int
    block_starts: np.ndarray | None = None  # split variant, 0-based, ends with K

    def __post_init__(self):
        k, gam = self.sigma.shape
        p1, l_r = self.spatial.shape
        if self.temporal.shape != (k, p1):
            raise EngineError(
                f"temporal basis shape {self.temporal.shape} does not match "
                f"samples {k} / terms {p1}"
            )
        if self.sens.shape != (l_r, gam):
            raise EngineError(
                f"sensitivity shape {self.sens.shape} does not match voxels "
                f"{l_r} / coils {gam}"
            )
        if self.intensity.shape != (l_r,):
            raise EngineError("intensity correction length mismatch")
        self.mask_r = np.asarray(self.mask_r, dtype=bool).reshape(-1)
        if int(self.mask_r.sum()) != l_r:
            raise EngineError("reconstruction mask does not match restricted arrays")
        if self.block_starts is not None:
            ks = np.asarray(self.block_starts, dtype=int)
            if ks[0] != 0 or ks[-1] != k or np.any(np.diff(ks) <= 0):
                raise EngineError(
                    "block starts must increase from 0 to the sample count"
                )
            self.block_starts = ks

    @property
    def n_samples(self) -> int:
        return self.sigma.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.spatial.shape[1]


@dataclass
class CGLog:
    """Per-iteration norms and per-phase wall-clock timings."""

    residual_norms: list = field(default_factory=list)
    solution_norms: list = field(default_factory=list)
    timings: list = field(default_factory=list)  # (phase label, seconds)

    def add_timing(self, label: str, seconds: float):
        self.timings.append((label, seconds))


def phase_block(temporal_rows: np.ndarray, spatial: np.ndarray) -> np.ndarray:
    """P' = exp(i * temporal_rows @ spatial), the phase matrix for a row range."""
    return np.exp(1j * (temporal_rows @ spatial))


def apply_E(p: np.ndarray, sens: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Predicted coil samples P @ (S * p), shape (K, Gamma)."""
    return phase @ (sens * p[:, None])


def apply_EH(sigma: np.ndarray, sens: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Adjoint image sum_coils S* * (P^H sigma), shape (L_R,).

    Computed as conj(colsum((sigma^H P) * S^T)) so P^H is never formed.
    """
    return np.conj(np.sum((sigma.conj().T @ phase) * sens.T, axis=0))


def _finalize(rho_r: np.ndarray, inputs: EncodingInputs, log: CGLog) -> ReconImage:
    t0 = time.perf_counter()
    rho_r = rho_r * inputs.intensity
    full = np.zeros(inputs.mask_r.size, dtype=complex)
    full[inputs.mask_r] = rho_r
    log.add_timing("apply_intensity", time.perf_counter() - t0)
    if inputs.kfilter is not None:
        t0 = time.perf_counter()
        full = apply_filter(full, inputs.kfilter, inputs.grid)
        log.add_timing("apply_kfilter", time.perf_counter() - t0)
    res = log.residual_norms[-1] if log.residual_norms else 0.0
    return ReconImage(values=full, iterations=inputs.n_iter, final_residual=res)


def recon_full(inputs: EncodingInputs, memory_budget_bytes: int | None = None,
               callback=None) -> tuple[ReconImage, CGLog]:
    """CG reconstruction with the phase matrix built once and kept in memory.

    `callback(n, rho_restricted)` is invoked after each iteration, before the
    intensity correction and filtering; used for convergence studies.
    """
    need = inputs.n_samples * inputs.n_voxels * 16
    if memory_budget_bytes is not None and need > memory_budget_bytes:
        raise MemoryBudgetError(
            f"phase matrix needs {need} bytes (> budget {memory_budget_bytes}); "
            "use the split variant"
        )
    log = CGLog()
    if not np.all(np.isfinite(inputs.sigma)):
        raise EngineError("raw data contains non-finite values")

    t0 = time.perf_counter()
    sens = inputs.sens * inputs.intensity[:, None]
    log.add_timing("intensity_correction", time.perf_counter() - t0)

    t0 = time.perf_counter()
    phase = phase_block(inputs.temporal, inputs.spatial)
    log.add_timing("build_phase_matrix", time.perf_counter() - t0)

    t0 = time.perf_counter()
    p = apply_EH(inputs.sigma, sens, phase)
    log.add_timing("initial_adjoint", time.perf_counter() - t0)

    r = p.copy()
    rho = np.zeros_like(p)
    r0 = np.linalg.norm(r)
    for n in range(1, inputs.n_iter + 1):
        if np.linalg.norm(r) <= 1e-15 * r0:
            break  # residual at roundoff level; further iterations divide 0/0
        t0 = time.perf_counter()
        q = apply_EH(apply_E(p, sens, phase), sens, phase)
        alpha = np.vdot(r, r)
        beta = np.vdot(p, q)
        if beta == 0 or not np.isfinite(beta):
            raise EngineError(f"CG breakdown at iteration {n}")
        step = alpha / beta
        rho = rho + step * p
        r = r - step * q
        beta = alpha
        alpha = np.vdot(r, r)
        p = r + (alpha / beta) * p
        log.add_timing(f"cg_iteration_{n}", time.perf_counter() - t0)
        if not np.all(np.isfinite(rho)):
            raise EngineError(f"non-finite iterate at iteration {n}")
        log.residual_norms.append(float(np.sqrt(alpha.real)))
        log.solution_norms.append(float(np.linalg.norm(rho)))
        if callback is not None:
            callback(n, rho)
    return _finalize(rho, inputs, log), log


def recon_split(inputs: EncodingInputs, callback=None) -> tuple[ReconImage, CGLog]:
    """CG reconstruction recomputing phase-matrix blocks once per iteration.

    Mathematically identical to `recon_full`; blocks cover the sample rows
    given by `block_starts`.
    """
    if inputs.block_starts is None:
        raise EngineError("split reconstruction needs block starts")
    log = CGLog()
    if not np.all(np.isfinite(inputs.sigma)):
        raise EngineError("raw data contains non-finite values")
    starts = inputs.block_starts

    t0 = time.perf_counter()
    sens = inputs.sens * inputs.intensity[:, None]
    log.add_timing("intensity_correction", time.perf_counter() - t0)

    # blockwise adjoint of the raw data: accumulate (sigma^H P) per block
    t0 = time.perf_counter()
    sigma_h = inputs.sigma.conj().T  # (Gamma, K)
    acc = np.zeros((sens.shape[1], sens.shape[0]), dtype=complex)  # (Gamma, L_R)
    for m in range(starts.size - 1):
        lo, hi = starts[m], starts[m + 1]
        blk = phase_block(inputs.temporal[lo:hi], inputs.spatial)
        acc += sigma_h[:, lo:hi] @ blk
    p = np.conj(np.sum(acc * sens.T, axis=0))
    log.add_timing("initial_adjoint", time.perf_counter() - t0)

    r = p.copy()
    rho = np.zeros_like(p)
    r0 = np.linalg.norm(r)
    for n in range(1, inputs.n_iter + 1):
        if np.linalg.norm(r) <= 1e-15 * r0:
            break
        t0 = time.perf_counter()
        weighted = sens * p[:, None]  # (L_R, Gamma)
        acc = np.zeros_like(acc)
        for m in range(starts.size - 1):
            lo, hi = starts[m], starts[m + 1]
            blk = phase_block(inputs.temporal[lo:hi], inputs.spatial)
            acc += (blk @ weighted).conj().T @ blk
        q = np.conj(np.sum(acc * sens.T, axis=0))
        alpha = np.vdot(r, r)
        beta = np.vdot(p, q)
        if beta == 0 or not np.isfinite(beta):
            raise EngineError(f"CG breakdown at iteration {n}")
        step = alpha / beta
        rho = rho + step * p
        r = r - step * q
        beta = alpha
        alpha = np.vdot(r, r)
        p = r + (alpha / beta) * p
        log.add_timing(f"cg_iteration_{n}", time.perf_counter() - t0)
        if not np.all(np.isfinite(rho)):
            raise EngineError(f"non-finite iterate at iteration {n}")
        log.residual_norms.append(float(np.sqrt(alpha.real)))
        log.solution_norms.append(float(np.linalg.norm(rho)))
        if callback is not None:
            callback(n, rho)
    return _finalize(rho, inputs, log), log


def choose_block_starts(n_samples: int, n_voxels: int, memory_budget_bytes: int) -> np.ndarray:
    """Largest block row count whose phase block fits the byte budget."""
    per_row = max(n_voxels * 16, 1)
    rows = max(1, min(n_samples, memory_budget_bytes // per_row))
    starts = list(range(0, n_samples, rows)) + [n_samples]
    return np.unique(np.asarray(starts, dtype=int))


def build_bases(b0: np.ndarray, mask_r: np.ndarray, grid: Grid,
                times_s: np.ndarray, field_terms: np.ndarray,
                order: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the spatial and temporal basis matrices of the phase model.

    Spatial basis rows: B0 (rad/s) restricted to mask voxels, then the
    harmonic terms of the requested order evaluated at voxel coordinates
    (meters).  Temporal basis columns: sample times (s), then the measured
    or simulated field-term time courses matching the spatial rows.
    """
    from .core import grid_coordinates

    mask_r = np.asarray(mask_r, dtype=bool).reshape(-1)
    b0 = np.asarray(b0, dtype=float).reshape(-1)
    coords = grid_coordinates(grid)[mask_r]
    ndim = 2 if grid.dims[2] == 1 else 3
    harmonics = solid_harmonics(order, coords, ndim=ndim)  # (L_R, n_terms)
    field_terms = np.asarray(field_terms, dtype=float)
    if field_terms.ndim != 2 or field_terms.shape[1] != harmonics.shape[1]:
        raise EngineError(
            f"trajectory provides {field_terms.shape[1] if field_terms.ndim == 2 else '?'} "
            f"field terms but order {order} needs {harmonics.shape[1]}"
        )
    times_s = np.asarray(times_s, dtype=float).reshape(-1)
    if times_s.size != field_terms.shape[0]:
        raise EngineError("sample time count does not match field terms")
    spatial = np.vstack([b0[mask_r][None, :], harmonics.T])
    temporal = np.column_stack([times_s, field_terms])
    return spatial, temporal
