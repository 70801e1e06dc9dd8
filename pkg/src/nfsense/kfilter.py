"""K-space filter: convex-hull membership of Cartesian FFT-grid points.

The 1st-order dynamic field terms are k-space coordinates; Cartesian grid
points outside their convex hull correspond to ill-conditioned image
components and are suppressed.  Membership is tested against the hull
half-space inequalities, which selects the same point set as a
triangulation-based inside test.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .core import Grid


class KFilterError(Exception):
    pass


def kspace_grid_coordinates(grid: Grid) -> np.ndarray:
    """Centered FFT-grid k-coordinates in rad/m, shape (L, 3).

    Axis i takes dk * (m - n//2) with dk = 2*pi/fov; the zero-frequency bin
    sits where fftshift places it.
    """
    axes = []
    for n, fov in zip(grid.dims, grid.fov_m):
        dk = 2 * np.pi / fov
        axes.append(dk * (np.arange(n) - n // 2))
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([grid.to_vec(xx), grid.to_vec(yy), grid.to_vec(zz)])


def _hull_membership(points: np.ndarray, k_coords: np.ndarray) -> np.ndarray:
    try:
        hull = ConvexHull(k_coords)
    except QhullError as exc:
        raise KFilterError(f"degenerate k-space point set: {exc}") from exc
    k_max = np.max(np.abs(k_coords)) or 1.0
    tol = 1e-9 * k_max
    # point is inside iff all half-space inequalities A x + b <= 0 hold
    vals = points @ hull.equations[:, :-1].T + hull.equations[:, -1]
    return np.all(vals <= tol, axis=1)


def build_filter(k_coords: np.ndarray, grid: Grid, per_slice: bool = False) -> np.ndarray:
    """Binary filter (flat, length L): 1 inside/on the hull of k_coords.

    `k_coords` is (K, d) with d = 2 or 3 in rad/m.  With per_slice=True a 2D
    filter is built from the first two coordinates and replicated across kz.
    """
    k_coords = np.asarray(k_coords, dtype=float)
    if k_coords.ndim != 2 or k_coords.shape[1] not in (2, 3):
        raise KFilterError("k-space coordinates must be (K, 2) or (K, 3)")
    d = k_coords.shape[1]
    pts = kspace_grid_coordinates(grid)
    if per_slice or d == 2:
        inside = _hull_membership(pts[:, :2], k_coords[:, :2])
    else:
        inside = _hull_membership(pts, k_coords)
    return inside.astype(float)


def dilate_filter(filt: np.ndarray, grid: Grid, radius: int) -> np.ndarray:
    """Grow a binary filter by a discrete ball; used for filter-extent studies."""
    if radius <= 0:
        return np.asarray(filt, dtype=float).copy()
    arr = grid.to_array(np.asarray(filt) > 0.5)
    ndim = 2 if grid.dims[2] == 1 else 3
    grids = np.ogrid[tuple(slice(-radius, radius + 1) for _ in range(ndim))]
    ball = sum(g**2 for g in grids) <= radius**2
    if ndim == 2:
        out = np.zeros(grid.dims, dtype=bool)
        out[:, :, 0] = ndimage.binary_dilation(arr[:, :, 0], structure=ball)
    else:
        out = ndimage.binary_dilation(arr, structure=ball)
    return grid.to_vec(out).astype(float)


def apply_filter(image: np.ndarray, filt: np.ndarray, grid: Grid) -> np.ndarray:
    """IFFT(FFT(image) * filter) with DC-at-center k-space indexing.

    `image` and `filt` are flat length-L vectors; the filter grid uses the
    same centered coordinates as `build_filter`.
    """
    image = np.asarray(image).reshape(-1)
    filt = np.asarray(filt, dtype=float).reshape(-1)
    if image.size != grid.nvox or filt.size != grid.nvox:
        raise KFilterError("image/filter length does not match the grid")
    img = grid.to_array(image.astype(complex))
    kspace = np.fft.fftshift(np.fft.fftn(img))
    kspace *= grid.to_array(filt)
    out = np.fft.ifftn(np.fft.ifftshift(kspace))
    return grid.to_vec(out)
