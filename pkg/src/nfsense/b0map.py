"""Off-resonance (B0) mapping from multi-echo prescan data.

Coil-combined echo images give per-voxel phase evolutions; after temporal
unwrapping a two-regressor linear fit yields the off-resonance slope (rad/s)
and an even/odd echo offset.  The fitted map is then smoothed by an
error-weighted, edge-preserving first-derivative penalty.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp

from .core import FieldMap, Grid, PrescanData
from .solver import NormalEquations, difference_operator, make_preconditioner, pcg_solve


class B0Error(Exception):
    pass


def coil_combine(prescan: PrescanData, maps: np.ndarray) -> np.ndarray:
    """Matched-filter coil combination, one complex image per echo, shape (N, L).

    Per voxel: rho_n = sum_coils S* m / sum_coils |S|^2, zero where the
    denominator vanishes.
    """
    images = prescan.images  # (N, Gamma, L)
    denom = np.sum(np.abs(maps) ** 2, axis=1)  # (L,)
    numer = np.einsum("lg,ngl->nl", maps.conj(), images)
    out = np.zeros_like(numer)
    ok = denom > 0
    out[:, ok] = numer[:, ok] / denom[ok]
    return out


def unwrap_temporal(phases: np.ndarray) -> np.ndarray:
    """Unwrap along the echo axis (axis 0) so consecutive diffs lie in (-pi, pi].

    The first echo's phase is expected to be 0 (subtract it beforehand).
    """
    phases = np.asarray(phases, dtype=float)
    d = np.diff(phases, axis=0)
    d_wrapped = d - 2 * np.pi * np.ceil((d - np.pi) / (2 * np.pi))
    out = np.zeros_like(phases)
    out[0] = phases[0]
    out[1:] = phases[0] + np.cumsum(d_wrapped, axis=0)
    return out


def fit_phase_evolution(unwrapped: np.ndarray, delta_te: float,
                        nyquist_warn_frac: float = 0.9) -> FieldMap:
    """Two-regressor least squares per voxel: slope * n * dTE + offset * mod(n, 2).

    `unwrapped` has shape (N, L) with the first echo at phase 0; no intercept
    is fitted.  The standard error uses the 1/N normalization of the
    residuals.  Slope is returned in rad/s.
    """
    unwrapped = np.asarray(unwrapped, dtype=float)
    n_echo = unwrapped.shape[0]
    if n_echo < 3:
        raise B0Error("phase fit needs at least 3 echoes")
    if delta_te <= 0:
        raise B0Error("echo spacing must be positive")
    n = np.arange(n_echo)
    design = np.column_stack([n * delta_te, n % 2])  # (N, 2)
    coef, *_ = np.linalg.lstsq(design, unwrapped, rcond=None)
    resid = unwrapped - design @ coef
    stderr = np.sqrt(np.sum(resid**2, axis=0) / n_echo)
    b0 = coef[0]
    nyquist = np.pi / delta_te
    worst = np.max(np.abs(b0)) if b0.size else 0.0
    if worst > nyquist_warn_frac * nyquist:
        warnings.warn(
            f"fitted off-resonance reaches {worst:.1f} rad/s, close to the "
            f"temporal-unwrapping limit pi/dTE = {nyquist:.1f} rad/s",
            stacklevel=2,
        )
    return FieldMap(b0=b0, beta=coef[1], stderr=stderr)


def estimate_b0(prescan: PrescanData, maps: np.ndarray) -> FieldMap:
    """Full initial estimate: coil-combine, zero first-echo phase, unwrap, fit."""
    combined = coil_combine(prescan, maps)
    phases = np.angle(combined)
    phases = phases - phases[0]
    # rewrap into (-pi, pi] after the subtraction, then unwrap temporally
    phases = phases - 2 * np.pi * np.ceil((phases - np.pi) / (2 * np.pi))
    unwrapped = unwrap_temporal(phases)
    return fit_phase_evolution(unwrapped, prescan.delta_te)


def default_alpha_b(grid: Grid, stderr: np.ndarray) -> float:
    """Weight normalizing the median error-weighted stencil row to unit size."""
    active = [p for p, n in zip(grid.pitch_m, grid.dims) if n > 1]
    pitch = float(np.mean(active)) if active else grid.pitch_m[0]
    eps = np.asarray(stderr, dtype=float)
    med = float(np.median(eps[eps > 0])) if np.any(eps > 0) else 1.0
    return (pitch / med) ** 2


def smooth_b0(field: FieldMap, grid: Grid, alpha: float, precond: str = "ic0",
              tol: float = 1e-8, max_iter: int = 2000) -> np.ndarray:
    """Edge-preserving smoothing: identity data block plus first-derivative
    blocks weighted sqrt(alpha) * stderr per voxel, solved over the full grid.

    Where the fit was accurate (small stderr) the map stays put; smoothing
    acts only where the estimate is noisy, so real edges survive.
    """
    if alpha < 0:
        raise B0Error("alpha must be nonnegative")
    nvox = grid.nvox
    eye = sp.eye(nvox, format="csr")
    blocks = [(np.ones(nvox), eye)]
    if alpha > 0:
        w = np.sqrt(alpha) * np.asarray(field.stderr, dtype=float).reshape(-1)
        for axis in range(3):
            if grid.dims[axis] > 1:
                blocks.append((w, difference_operator(grid, axis, 1)))
    system = NormalEquations(blocks)
    b = system.rhs(0, np.asarray(field.b0, dtype=float).reshape(-1))
    pc = make_preconditioner(precond, system.matrix)
    x, _, _ = pcg_solve(system.matrix, b, precond=pc, tol=tol, max_iter=max_iter)
    return x
