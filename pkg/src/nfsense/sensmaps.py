"""Coil sensitivity estimation from multi-echo prescan data.

Per-voxel SVD over the coil x echo matrix yields raw estimates on the
trusted mask; a stacked least-squares system (data fidelity on the trusted
mask, second-derivative smoothness over the reconstruction mask) smooths and
extrapolates them.  Magnitude and phase are processed separately and
recombined.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .core import Grid
from .solver import NormalEquations, difference_operator, make_preconditioner, pcg_solve


def default_alpha_s(grid: Grid) -> float:
    """Smoothness weight scaled so the stencil rows are O(1): 1e-2 * pitch^4."""
    active = [p for p, n in zip(grid.pitch_m, grid.dims) if n > 1]
    pitch = float(np.mean(active)) if active else grid.pitch_m[0]
    return 1e-2 * pitch**4


def estimate_svd(prescan, mask_t: np.ndarray) -> np.ndarray:
    """Raw sensitivity estimates, shape (L, Gamma); zero outside the trusted mask.

    For each trusted voxel the coil x echo data matrix is decomposed and the
    first left singular vector, scaled by sigma_1/sqrt(N), gives the coil
    values.  The global phase is anchored so the inner product with the
    first-echo coil vector is real and nonnegative.
    """
    images = prescan.images  # (N, Gamma, L)
    n_echo, n_coil, nvox = images.shape
    mask_t = np.asarray(mask_t, dtype=bool).reshape(-1)
    raw = np.zeros((nvox, n_coil), dtype=complex)
    for l in np.where(mask_t)[0]:
        m = images[:, :, l].T  # coils x echoes
        if not np.any(m):
            continue
        u, s, _ = np.linalg.svd(m, full_matrices=False)
        vec = u[:, 0]
        anchor = np.vdot(vec, m[:, 0])
        if np.abs(anchor) > 0:
            vec = vec * (anchor / np.abs(anchor))
        raw[l] = vec * (s[0] / np.sqrt(n_echo))
    return raw


class SmoothExtrapolator:
    """Solver for the smoothing/extrapolation system on a fixed mask pair.

    Data block: identity rows on trusted voxels.  Smoothness blocks:
    sqrt(alpha) times the second derivative along each axis, supported on the
    reconstruction mask.  Unknowns are restricted to reconstruction-mask
    voxels so the normal equations are positive (semi)definite there.
    """

    def __init__(self, grid: Grid, mask_t, mask_r, alpha: float,
                 precond: str = "ic0", tol: float = 1e-8, max_iter: int = 2000):
        self.grid = grid
        self.mask_t = np.asarray(mask_t, dtype=bool).reshape(-1)
        self.mask_r = np.asarray(mask_r, dtype=bool).reshape(-1)
        if np.any(self.mask_t & ~self.mask_r):
            raise ValueError("trusted mask must be contained in the reconstruction mask")
        self.alpha = float(alpha)
        self.tol = tol
        self.max_iter = max_iter

        nvox = grid.nvox
        r_idx = np.where(self.mask_r)[0]
        self.r_idx = r_idx
        n_r = r_idx.size
        t_local = np.where(self.mask_t[r_idx])[0]
        n_t = t_local.size
        select_t = sp.coo_matrix(
            (np.ones(n_t), (np.arange(n_t), t_local)), shape=(n_t, n_r)
        ).tocsr()
        blocks = [(np.ones(n_t), select_t)]
        if self.alpha > 0:
            axes = [a for a in range(3) if grid.dims[a] > 1]
            for axis in axes:
                d2 = difference_operator(grid, axis, 2, support=self.mask_r)
                d2_r = d2[:, r_idx][r_idx, :]
                blocks.append((np.full(n_r, np.sqrt(self.alpha)), d2_r))
        self.system = NormalEquations(blocks)
        self._precond = make_preconditioner(precond, self.system.matrix)
        self.last_iterations = 0

    def apply(self, raw: np.ndarray) -> np.ndarray:
        """Smooth one full-grid vector; returns a full-grid vector, 0 outside M_R."""
        raw = np.asarray(raw).reshape(-1)
        obs = raw[self.r_idx][np.where(self.mask_t[self.r_idx])[0]]
        b = self.system.rhs(0, obs)
        x, its, _ = pcg_solve(self.system.matrix, b, precond=self._precond,
                              tol=self.tol, max_iter=self.max_iter)
        self.last_iterations = its
        out = np.zeros(self.grid.nvox, dtype=x.dtype)
        out[self.r_idx] = x
        return out


def smooth_extrapolate(raw, grid: Grid, mask_t, mask_r, alpha: float,
                       precond: str = "ic0", tol: float = 1e-8, max_iter: int = 2000):
    """Smooth/extrapolate one vector or a (L, n) stack of vectors."""
    solver = SmoothExtrapolator(grid, mask_t, mask_r, alpha, precond, tol, max_iter)
    raw = np.asarray(raw)
    if raw.ndim == 1:
        return solver.apply(raw)
    out = np.zeros_like(raw, dtype=complex if np.iscomplexobj(raw) else float)
    for k in range(raw.shape[1]):
        out[:, k] = solver.apply(raw[:, k])
    return out


def recombine(raw: np.ndarray, grid: Grid, mask_t, mask_r, alpha: float,
              precond: str = "ic0", tol: float = 1e-8, max_iter: int = 2000) -> np.ndarray:
    """Final maps: smoothed magnitude recombined with the smoothed unit phase.

    Magnitude |raw| and the magnitude-normalized raw/|raw| are smoothed
    independently per coil; the unit component is renormalized after
    smoothing so it carries phase only.  Zero where the smoothed unit map
    vanishes and outside the reconstruction mask.
    """
    raw = np.asarray(raw, dtype=complex)
    nvox, n_coil = raw.shape
    solver = SmoothExtrapolator(grid, mask_t, mask_r, alpha, precond, tol, max_iter)
    mag = np.abs(raw)
    unit = np.zeros_like(raw)
    nz = mag > 0
    unit[nz] = raw[nz] / mag[nz]
    maps = np.zeros_like(raw)
    for lam in range(n_coil):
        sm_mag = solver.apply(mag[:, lam]).real
        sm_unit = solver.apply(unit[:, lam])
        norm = np.abs(sm_unit)
        ok = norm >= 1e-12
        maps[ok, lam] = sm_mag[ok] * sm_unit[ok] / norm[ok]
    mask_r = np.asarray(mask_r, dtype=bool).reshape(-1)
    maps[~mask_r] = 0
    return maps


def intensity_correction(maps: np.ndarray, mask_r) -> np.ndarray:
    """Per-voxel scaling j = 1/sqrt(sum_coils |S|^2) on its support, else 0."""
    mask_r = np.asarray(mask_r, dtype=bool).reshape(-1)
    ssq = np.sum(np.abs(maps) ** 2, axis=1)
    j = np.zeros(maps.shape[0])
    ok = mask_r & (ssq > 0)
    j[ok] = 1.0 / np.sqrt(ssq[ok])
    return j
