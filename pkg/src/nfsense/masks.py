"""Trusted / reconstruction mask computation from prescan magnitude data.

Pipeline: RSS coil combination of the shortest-TE echo, multiplicative bias
correction by a log-domain polynomial fit, histogram-minimum thresholding,
then morphology (largest component, hole filling, slight dilation).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import Grid, MaskPair, PrescanData


class MaskError(Exception):
    pass


def rss_combine(prescan: PrescanData, echo: int = 0) -> np.ndarray:
    """Root-sum-of-squares coil combination of one echo; flat magnitude vector."""
    if not (0 <= echo < prescan.n_echoes):
        raise IndexError(f"echo {echo} out of range")
    return np.sqrt(np.sum(np.abs(prescan.images[echo]) ** 2, axis=0))


def _poly_design(grid: Grid, degree: int) -> np.ndarray:
    """Monomial design matrix of total degree <= degree on normalized coords."""
    from .core import grid_coordinates

    coords = grid_coordinates(grid)
    # normalize each axis to [-1, 1] to keep the fit well conditioned
    norm = np.array([max(f / 2.0, 1e-30) for f in grid.fov_m])
    u = coords / norm
    terms = []
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            for c in range(degree + 1 - a - b):
                if grid.dims[2] == 1 and c > 0:
                    continue
                terms.append(u[:, 0] ** a * u[:, 1] ** b * u[:, 2] ** c)
    return np.column_stack(terms)


def estimate_bias_field(mag: np.ndarray, grid: Grid, rough_mask: np.ndarray | None = None,
                        degree: int = 3) -> np.ndarray:
    """Smooth multiplicative intensity field from a log-domain polynomial fit.

    Least-squares fit of log(mag) over rough_mask (default mag > 0.1 * max),
    exponentiated and normalized to mean 1 over the mask.
    """
    mag = np.asarray(mag, dtype=float).reshape(-1)
    if rough_mask is None:
        rough_mask = mag > 0.1 * mag.max()
    rough_mask = np.asarray(rough_mask, dtype=bool).reshape(-1) & (mag > 0)
    design = _poly_design(grid, degree)
    if rough_mask.sum() < design.shape[1]:
        raise MaskError(
            f"rough mask has {int(rough_mask.sum())} voxels but the degree-{degree} "
            f"fit needs {design.shape[1]}"
        )
    coef, *_ = np.linalg.lstsq(design[rough_mask], np.log(mag[rough_mask]), rcond=None)
    bias = np.exp(design @ coef)
    bias /= bias[rough_mask].mean()
    return bias


def trusted_threshold(mag_corrected: np.ndarray, bins: int = 256, smooth_width: int = 5) -> float:
    """Intensity threshold at the global minimum of the log-magnitude histogram.

    The histogram of log(mag) over positive voxels is smoothed by a moving
    average, and the minimum is taken strictly between the two highest local
    maxima.  Raises MaskError when the histogram has no interior minimum.
    """
    mag = np.asarray(mag_corrected, dtype=float).reshape(-1)
    pos = mag[mag > 0]
    if pos.size == 0:
        raise MaskError("no positive voxels")
    logm = np.log(pos)
    counts, edges = np.histogram(logm, bins=bins)
    kernel = np.ones(smooth_width) / smooth_width
    smoothed = np.convolve(counts.astype(float), kernel, mode="same")
    centers = 0.5 * (edges[:-1] + edges[1:])

    interior = smoothed[1:-1]
    is_max = (interior >= smoothed[:-2]) & (interior >= smoothed[2:]) & (interior > 0)
    peaks = np.where(is_max)[0] + 1
    # collapse plateaus to a single representative bin
    if peaks.size:
        keep = [peaks[0]]
        prev = peaks[0]
        for p in peaks[1:]:
            if p > prev + 1 or smoothed[p] != smoothed[prev]:
                keep.append(p)
            prev = p
        peaks = np.array(keep)
    if peaks.size < 2:
        raise MaskError(
            "log-magnitude histogram is unimodal; pass an explicit threshold "
            "(--threshold) instead"
        )
    top2 = peaks[np.argsort(smoothed[peaks])[-2:]]
    lo, hi = int(top2.min()), int(top2.max())
    if hi - lo < 2:
        raise MaskError("histogram maxima are adjacent; no interior minimum")
    seg = smoothed[lo + 1:hi]
    kmin = lo + 1 + int(np.argmin(seg))
    return float(np.exp(centers[kmin]))


def _ball(radius: int, ndim: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1,) * ndim, dtype=bool)
    grids = np.ogrid[tuple(slice(-radius, radius + 1) for _ in range(ndim))]
    dist2 = sum(g**2 for g in grids)
    return dist2 <= radius**2


def compute_masks(mag_corrected: np.ndarray, grid: Grid, threshold: float,
                  dilation_radius: int = 2) -> MaskPair:
    """Threshold, keep the largest component, fill holes, dilate.

    trusted = mag > threshold; recon = dilate(fill(largest_component(trusted))).
    """
    if threshold <= 0:
        raise MaskError("threshold must be positive")
    mag = np.asarray(mag_corrected, dtype=float).reshape(-1)
    trusted = mag > threshold
    if not trusted.any():
        raise MaskError("trusted mask is empty; lower the threshold")
    tgrid = grid.to_array(trusted)
    ndim = 2 if grid.dims[2] == 1 else 3
    view = tgrid[:, :, 0] if ndim == 2 else tgrid

    # 8/26-connected components, 4/6-connected complement for hole filling
    structure = ndimage.generate_binary_structure(ndim, ndim)
    labels, nlab = ndimage.label(view, structure=structure)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, nlab + 1))
    largest = labels == (1 + int(np.argmax(sizes)))
    filled = ndimage.binary_fill_holes(largest)
    if dilation_radius > 0:
        recon_view = ndimage.binary_dilation(filled, structure=_ball(dilation_radius, ndim))
    else:
        recon_view = filled

    rgrid = np.zeros(grid.dims, dtype=bool)
    if ndim == 2:
        rgrid[:, :, 0] = recon_view
    else:
        rgrid[...] = recon_view
    recon = grid.to_vec(rgrid)
    # isolated bright voxels outside the main component are untrusted too,
    # keeping trusted a subset of recon
    return MaskPair(trusted=trusted & recon, recon=recon)
