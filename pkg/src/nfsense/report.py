"""Figure rendering for CLI reports.

Each report writer takes already-computed data and a target path; figures
are rendered headlessly and saved next to the corresponding CSV output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import Grid


def save_convergence_figure(residual_norms, solution_norms, path):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    it = np.arange(1, len(residual_norms) + 1)
    axes[0].semilogy(it, residual_norms, "-o", ms=3)
    axes[0].set_xlabel("CG iteration")
    axes[0].set_ylabel("residual norm")
    axes[1].plot(it, solution_norms, "-o", ms=3, color="tab:orange")
    axes[1].set_xlabel("CG iteration")
    axes[1].set_ylabel("solution norm")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_lcurve_figure(residual_norms, solution_norms, corner_iteration, path):
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.loglog(residual_norms, solution_norms, "-o", ms=3)
    i = corner_iteration - 1
    if 0 <= i < len(residual_norms):
        ax.plot(residual_norms[i], solution_norms[i], "r*", ms=14,
                label=f"corner (iteration {corner_iteration})")
        ax.legend()
    ax.set_xlabel("residual norm")
    ax.set_ylabel("solution norm")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_image_figure(values, grid: Grid, path, title: str = "", slice_index=None):
    """Magnitude/phase panel of a complex grid vector (central slice for 3D)."""
    arr = grid.to_array(np.asarray(values))
    if slice_index is None:
        slice_index = grid.dims[2] // 2
    sl = arr[:, :, slice_index]
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    im0 = axes[0].imshow(np.abs(sl).T, origin="lower", cmap="gray")
    axes[0].set_title("magnitude")
    fig.colorbar(im0, ax=axes[0], fraction=0.046)
    im1 = axes[1].imshow(np.angle(sl).T, origin="lower", cmap="twilight",
                         vmin=-np.pi, vmax=np.pi)
    axes[1].set_title("phase")
    fig.colorbar(im1, ax=axes[1], fraction=0.046)
    if title:
        fig.suptitle(title)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_map_figure(values, grid: Grid, path, title: str = "", cmap: str = "viridis",
                    slice_index=None):
    """Single-panel real map (mask, bias, B0, filter)."""
    arr = grid.to_array(np.asarray(values, dtype=float))
    if slice_index is None:
        slice_index = grid.dims[2] // 2
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(arr[:, :, slice_index].T, origin="lower", cmap=cmap)
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
