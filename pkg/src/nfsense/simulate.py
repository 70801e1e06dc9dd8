"""Synthetic ground truth and brute-force oracles.

Phantoms, smooth coil maps, trajectories, harmonic spatial basis terms, a
loop-based forward signal model and an explicit dense encoding matrix.  The
forward model here deliberately avoids the reconstruction engine's kernels
so the two can be checked against each other.
"""

from __future__ import annotations

import numpy as np

from .core import Grid, grid_coordinates

PHANTOM_KINDS = ("discs", "shepp-like", "checker")


class SimulateError(Exception):
    pass


# --------------------------------------------------------------------------
# spatial basis terms
# --------------------------------------------------------------------------

def solid_harmonics(order: int, coords: np.ndarray, ndim: int = 3,
                    include_constant: bool = False) -> np.ndarray:
    """Harmonic polynomial basis evaluated at coordinates (meters).

    Order 1 gives the linear terms (x, y for 2D grids; x, y, z otherwise),
    order 2 adds {xy, zy, 2z^2-x^2-y^2, zx, x^2-y^2}, order 3 adds the seven
    standard third-order terms.  Every term has zero Laplacian.  Shape:
    (n_points, n_terms); an optional leading constant column represents the
    global (spatially uniform) field term.
    """
    if order not in (1, 2, 3):
        raise SimulateError(f"unsupported order {order}")
    coords = np.asarray(coords, dtype=float)
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    terms = []
    if include_constant:
        terms.append(np.ones_like(x))
    if ndim == 2 and order == 1:
        terms += [x, y]
    else:
        terms += [x, y, z]
    if order >= 2:
        terms += [x * y, z * y, 2 * z**2 - x**2 - y**2, z * x, x**2 - y**2]
    if order >= 3:
        terms += [
            y * (3 * x**2 - y**2),
            x * y * z,
            y * (4 * z**2 - x**2 - y**2),
            z * (2 * z**2 - 3 * x**2 - 3 * y**2),
            x * (4 * z**2 - x**2 - y**2),
            z * (x**2 - y**2),
            x * (x**2 - 3 * y**2),
        ]
    return np.column_stack(terms)


# --------------------------------------------------------------------------
# phantoms, coils, field maps
# --------------------------------------------------------------------------

def make_phantom(grid: Grid, kind: str = "discs", fill: float = 0.5,
                 smooth_phase: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-constant phantom with known support.

    Returns (complex image, support mask), both flat length-L vectors.
    """
    if kind not in PHANTOM_KINDS:
        raise SimulateError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    coords = grid_coordinates(grid)
    x, y = coords[:, 0], coords[:, 1]
    rx, ry = grid.fov_m[0] / 2, grid.fov_m[1] / 2
    img = np.zeros(grid.nvox)

    if kind == "discs":
        discs = [
            (0.0, 0.0, 0.72, 1.0),
            (-0.3, -0.25, 0.28, 0.6),
            (0.32, 0.18, 0.2, 1.5),
            (0.05, 0.35, 0.14, 0.25),
        ]
        for cx, cy, rad, val in discs:
            inside = ((x - cx * rx) / rx) ** 2 + ((y - cy * ry) / ry) ** 2 <= rad**2
            img[inside] = val
        support = img > 0
    elif kind == "shepp-like":
        # (cx, cy, a, b, angle_deg, value) in FOV-half units, additive
        ellipses = [
            (0.0, 0.0, 0.72, 0.88, 0.0, 1.0),
            (0.0, -0.02, 0.64, 0.8, 0.0, -0.6),
            (0.22, 0.0, 0.14, 0.36, -18.0, -0.15),
            (-0.22, 0.0, 0.18, 0.4, 18.0, -0.15),
            (0.0, 0.32, 0.2, 0.22, 0.0, 0.3),
            (0.0, -0.4, 0.05, 0.05, 0.0, 0.3),
        ]
        for cx, cy, a, b, ang, val in ellipses:
            th = np.deg2rad(ang)
            dx = (x / rx - cx) * np.cos(th) + (y / ry - cy) * np.sin(th)
            dy = -(x / rx - cx) * np.sin(th) + (y / ry - cy) * np.cos(th)
            inside = (dx / a) ** 2 + (dy / b) ** 2 <= 1.0
            img[inside] += val
        img = np.clip(img, 0, None)
        outer = (x / rx) ** 2 + (y / (0.88 * ry)) ** 2 <= 0.72**2
        support = outer
    else:  # checker: exactly round(fill * L) bright voxels in alternating order
        ix, iy, iz = grid.multi_index(np.arange(grid.nvox))
        parity = (ix + iy + iz) % 2
        order = np.lexsort((np.arange(grid.nvox), parity))
        n_on = int(round(fill * grid.nvox))
        img[order[:n_on]] = 1.0
        support = np.ones(grid.nvox, dtype=bool)

    out = img.astype(complex)
    if smooth_phase:
        out = out * np.exp(1j * np.pi * (x / rx + 0.5 * y / ry))
    return out, support


def synth_coils(grid: Grid, n_coils: int, decay: float = 0.6) -> np.ndarray:
    """Smooth complex coil maps, shape (L, Gamma), nonzero everywhere.

    Gaussian magnitude bumps centered on points around the FOV perimeter
    with linear phase ramps of coil-dependent direction.
    """
    if n_coils < 1:
        raise SimulateError("need at least one coil")
    coords = grid_coordinates(grid)
    x, y = coords[:, 0], coords[:, 1]
    rx, ry = grid.fov_m[0] / 2, grid.fov_m[1] / 2
    width = decay * min(rx, ry)
    maps = np.zeros((grid.nvox, n_coils), dtype=complex)
    for lam in range(n_coils):
        th = 2 * np.pi * lam / n_coils
        cx, cy = 1.1 * rx * np.cos(th), 1.1 * ry * np.sin(th)
        mag = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width**2))
        ramp = np.pi * (np.cos(th) * x / rx + np.sin(th) * y / ry) * (0.5 + 0.1 * lam)
        maps[:, lam] = mag * np.exp(1j * ramp)
    return maps


def make_b0(grid: Grid, pattern: str = "zero", amplitude: float = 200.0) -> np.ndarray:
    """Synthetic off-resonance map in rad/s: zero, linear ramp, or blob."""
    coords = grid_coordinates(grid)
    x = coords[:, 0]
    rx = grid.fov_m[0] / 2
    if pattern == "zero":
        return np.zeros(grid.nvox)
    if pattern == "linear":
        return amplitude * x / rx
    if pattern == "blob":
        y = coords[:, 1]
        ry = grid.fov_m[1] / 2
        return amplitude * np.exp(-((x / rx - 0.2) ** 2 + (y / ry + 0.1) ** 2) / 0.08)
    raise SimulateError(f"unknown B0 pattern {pattern!r}")


# --------------------------------------------------------------------------
# trajectories (temporal basis matrices: column 0 = time, then field terms)
# --------------------------------------------------------------------------

def make_spiral(n_samples: int, turns: float, k_max: float, readout_s: float = 0.03,
                ndim: int = 2, n_planes: int = 1, kz_max: float = 0.0) -> np.ndarray:
    """Archimedean spiral-out temporal basis, shape (K, d+1).

    k(t) = k_max * (t/T) * (cos, sin)(2*pi*turns*t/T) with uniform sample
    times.  The 3D variant stacks identical spirals across kz planes.
    """
    if n_samples < 2:
        raise SimulateError("need at least 2 samples")
    t = np.linspace(0.0, readout_s, n_samples)
    frac = t / readout_s
    ang = 2 * np.pi * turns * frac
    kx = k_max * frac * np.cos(ang)
    ky = k_max * frac * np.sin(ang)
    if ndim == 2:
        return np.column_stack([t, kx, ky])
    if n_planes < 1:
        raise SimulateError("need at least one kz plane")
    kzs = np.linspace(-kz_max, kz_max, n_planes) if n_planes > 1 else np.array([0.0])
    rows = []
    for kz in kzs:
        rows.append(np.column_stack([t, kx, ky, np.full(n_samples, kz)]))
    return np.vstack(rows)


def make_cartesian(grid: Grid, undersample: int = 1, axis: int = 1,
                   readout_s: float = 0.03) -> np.ndarray:
    """Raster of centered FFT-grid k-points keeping every R-th line along `axis`.

    Returns the temporal basis (K, d+1) with uniform sample times; d = 2 for
    single-slice grids.
    """
    if undersample < 1:
        raise SimulateError("undersampling factor must be >= 1")
    ndim = 2 if grid.dims[2] == 1 else 3
    if not 0 <= axis < ndim:
        raise SimulateError(f"axis {axis} invalid for {ndim}D grid")
    k_axes = []
    for n, fov in zip(grid.dims[:ndim], grid.fov_m[:ndim]):
        dk = 2 * np.pi / fov
        k_axes.append(dk * (np.arange(n) - n // 2))
    k_axes[axis] = k_axes[axis][::undersample]
    # enumerate with the first axis fastest to mirror the voxel ordering
    mesh = np.meshgrid(*k_axes, indexing="ij")
    cols = [m.ravel(order="F") for m in mesh]
    k_pts = np.column_stack(cols)
    t = np.linspace(0.0, readout_s, k_pts.shape[0])
    return np.column_stack([t, k_pts])


# --------------------------------------------------------------------------
# forward model oracles (independent of the engine kernels)
# --------------------------------------------------------------------------

def forward_signal(rho: np.ndarray, sens: np.ndarray, spatial: np.ndarray,
                   temporal: np.ndarray, noise_sd: float = 0.0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Coil samples of the signal model, synthesized sample by sample.

    Explicit loops over samples and basis terms; per-sample sums over voxels.
    Complex Gaussian noise has `noise_sd` per real component.
    """
    rho = np.asarray(rho, dtype=complex).reshape(-1)
    n_samples, n_terms = temporal.shape
    n_coils = sens.shape[1]
    sigma = np.empty((n_samples, n_coils), dtype=complex)
    for kappa in range(n_samples):
        phase = np.zeros(rho.size)
        for p in range(n_terms):
            phase = phase + temporal[kappa, p] * spatial[p]
        basis = np.exp(1j * phase) * rho
        for lam in range(n_coils):
            sigma[kappa, lam] = np.sum(sens[:, lam] * basis)
    if noise_sd > 0:
        if rng is None:
            rng = np.random.default_rng()
        sigma = sigma + noise_sd * (
            rng.standard_normal(sigma.shape) + 1j * rng.standard_normal(sigma.shape)
        )
    return sigma


def dense_encoding_matrix(sens: np.ndarray, spatial: np.ndarray,
                          temporal: np.ndarray, cap: int = 2**24) -> np.ndarray:
    """Explicit encoding matrix, shape (K*Gamma, L); rows ordered coil-major
    with the sample index fastest (row = coil * K + sample), matching the
    column-major flattening of a (K, Gamma) sample matrix.  Test use only.
    """
    n_samples = temporal.shape[0]
    n_vox, n_coils = sens.shape
    if n_samples * n_coils * n_vox > cap:
        raise SimulateError("dense encoding matrix exceeds the oracle size cap")
    phase = np.zeros((n_samples, n_vox))
    for p in range(temporal.shape[1]):
        phase += np.outer(temporal[:, p], spatial[p])
    carrier = np.exp(1j * phase)
    blocks = [carrier * sens[:, lam][None, :] for lam in range(n_coils)]
    return np.vstack(blocks)
