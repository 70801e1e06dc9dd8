"""Non-FFT SENSE MRI reconstruction toolkit.

Matrix-free conjugate-gradient reconstruction for arbitrary trajectories,
off-resonance and higher-order encoding fields, plus the prescan workflow
(masks, sensitivity maps, B0 maps, k-space filter) feeding it.
"""

from .core import (
    Dataset,
    DatasetError,
    FieldMap,
    Grid,
    MaskPair,
    PrescanData,
    ReconImage,
    grid_coordinates,
)
from .engine import (
    CGLog,
    EncodingInputs,
    apply_E,
    apply_EH,
    build_bases,
    phase_block,
    recon_full,
    recon_split,
)
from .metrics import lcurve_corner, rmse, ssim

__all__ = [
    "CGLog",
    "Dataset",
    "DatasetError",
    "EncodingInputs",
    "FieldMap",
    "Grid",
    "MaskPair",
    "PrescanData",
    "ReconImage",
    "apply_E",
    "apply_EH",
    "build_bases",
    "grid_coordinates",
    "lcurve_corner",
    "phase_block",
    "recon_full",
    "recon_split",
    "rmse",
    "ssim",
]

__version__ = "0.1.0"
