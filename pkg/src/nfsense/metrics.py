"""Image-quality and stopping diagnostics: SSIM, relative RMSE, L-curve corner."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Truncated, normalized 2D Gaussian window."""
    half = (size - 1) / 2.0
    ax = np.arange(size) - half
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(test: np.ndarray, ref: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, mask: np.ndarray | None = None):
    """Mean SSIM and SSIM map between two real 2D images.

    Gaussian-weighted local statistics over all windows that fit fully inside
    the image; dynamic range is max(ref) - min(ref).  With a mask, the mean
    is taken over valid windows centered on masked pixels.
    Returns (mean_ssim, ssim_map) where the map covers the valid region.
    """
    test = np.asarray(test, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if test.shape != ref.shape:
        raise ValueError(f"shape mismatch {test.shape} vs {ref.shape}")
    if test.ndim != 2:
        raise ValueError("ssim expects 2D images")
    if test.shape[0] < window or test.shape[1] < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    drange = float(ref.max() - ref.min())
    if drange == 0:
        raise ValueError("reference image is constant")
    c1 = (k1 * drange) ** 2
    c2 = (k2 * drange) ** 2
    kern = gaussian_window(window, sigma)

    def local(img_windows):
        return np.tensordot(img_windows, kern, axes=([2, 3], [0, 1]))

    wt = sliding_window_view(test, (window, window))
    wr = sliding_window_view(ref, (window, window))
    mu1 = local(wt)
    mu2 = local(wr)
    e11 = local(wt * wt)
    e22 = local(wr * wr)
    e12 = local(wt * wr)
    v1 = e11 - mu1**2
    v2 = e22 - mu2**2
    cov = e12 - mu1 * mu2
    smap = ((2 * mu1 * mu2 + c1) * (2 * cov + c2)) / ((mu1**2 + mu2**2 + c1) * (v1 + v2 + c2))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        half = (window - 1) // 2
        sel = mask[half:half + smap.shape[0], half:half + smap.shape[1]]
        if not sel.any():
            raise ValueError("mask covers no valid windows")
        return float(smap[sel].mean()), smap
    return float(smap.mean()), smap


def rmse(test: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Relative RMSE: ||test - ref|| / ||ref|| over the mask."""
    test = np.asarray(test).reshape(-1)
    ref = np.asarray(ref).reshape(-1)
    if test.shape != ref.shape:
        raise ValueError("shape mismatch")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if not mask.any():
            raise ValueError("empty mask")
        test, ref = test[mask], ref[mask]
    denom = np.sqrt(np.mean(np.abs(ref) ** 2))
    if denom == 0:
        raise ValueError("reference is zero on the mask")
    return float(np.sqrt(np.mean(np.abs(test - ref) ** 2)) / denom)


@dataclass
class LCurveResult:
    corner_iteration: int      # 1-based CG iteration index
    curvature: np.ndarray      # per logged point, 0 where undefined
    confident: bool


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    half = width // 2
    padded = np.concatenate([np.full(half, x[0]), x, np.full(half, x[-1])])
    kern = np.ones(width) / width
    return np.convolve(padded, kern, mode="valid")


def lcurve_corner(residual_norms, solution_norms, smooth_width: int = 5,
                  confidence_threshold: float = 1e-3) -> LCurveResult:
    """Point of maximum curvature of the L-curve (log residual vs log solution).

    Both norm series are smoothed by a moving average before discrete
    curvature is computed via central differences.  A near-straight curve is
    flagged as low confidence; the reconstruction never auto-stops on this.
    """
    res = np.asarray(residual_norms, dtype=float)
    sol = np.asarray(solution_norms, dtype=float)
    if res.size != sol.size:
        raise ValueError("norm series lengths differ")
    if res.size < 5:
        raise ValueError("need at least 5 logged iterations")
    if np.any(res <= 0) or np.any(sol <= 0):
        raise ValueError("norms must be positive for the log-log curve")
    x = _moving_average(np.log(res), smooth_width)
    y = _moving_average(np.log(sol), smooth_width)
    dx = np.gradient(x)
    dy = np.gradient(y)
    ddx = np.gradient(dx)
    ddy = np.gradient(dy)
    denom = (dx**2 + dy**2) ** 1.5
    curvature = np.zeros_like(x)
    ok = denom > 0
    curvature[ok] = (dx[ok] * ddy[ok] - dy[ok] * ddx[ok]) / denom[ok]
    mag = np.abs(curvature)
    idx = int(np.argmax(mag))
    return LCurveResult(
        corner_iteration=idx + 1,
        curvature=curvature,
        confident=bool(mag[idx] >= confidence_threshold),
    )
