"""Domain types, voxel-grid geometry and dataset persistence.

All grid-shaped quantities are handled as flat vectors of length L using a
single linear voxel ordering: x fastest, then y, then z
(l = ix + nx*(iy + ny*iz)).  Helpers on :class:`Grid` convert between this
vector form and (nx, ny, nz) arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(Exception):
    """Base class for dataset/manifest problems."""


class ManifestMissingError(DatasetError):
    pass


class FileMissingError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


class UnknownDtypeError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# dtype tag -> (numpy dtype, file suffix)
DTYPES = {
    "f64": np.dtype("<f8"),
    "f32": np.dtype("<f4"),
    "c128": np.dtype("<c16"),
    "c64": np.dtype("<c8"),
    "u8": np.dtype("u1"),
}
_SUFFIX = {"f64": ".f64", "f32": ".f32", "c128": ".c128", "c64": ".c64", "u8": ".u8"}


@dataclass(frozen=True)
class Grid:
    """Voxel grid: integer extents and physical field of view in meters."""

    dims: tuple[int, int, int]
    fov_m: tuple[float, float, float]

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise ValueError(f"grid extents must be >= 1, got {self.dims}")
        if any(f <= 0 for f in self.fov_m):
            raise ValueError(f"FOV extents must be > 0, got {self.fov_m}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "fov_m", tuple(float(f) for f in self.fov_m))

    @property
    def nvox(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def ndim(self) -> int:
        return 2 if self.dims[2] == 1 else 3

    @property
    def pitch_m(self) -> tuple[float, float, float]:
        return tuple(f / n for f, n in zip(self.fov_m, self.dims))

    def to_array(self, vec: np.ndarray) -> np.ndarray:
        """Flat vector (x fastest) -> (nx, ny, nz) array."""
        return np.asarray(vec).reshape(self.dims, order="F")

    def to_vec(self, arr: np.ndarray) -> np.ndarray:
        """(nx, ny, nz) array -> flat vector (x fastest)."""
        return np.asarray(arr).ravel(order="F")

    def linear_index(self, ix, iy, iz) -> np.ndarray:
        nx, ny, _ = self.dims
        return np.asarray(ix) + nx * (np.asarray(iy) + ny * np.asarray(iz))

    def multi_index(self, l) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nx, ny, _ = self.dims
        l = np.asarray(l)
        return l % nx, (l // nx) % ny, l // (nx * ny)


def grid_coordinates(grid: Grid) -> np.ndarray:
    """Centered voxel-center coordinates in meters, shape (L, 3).

    Axis i takes values pitch*(m - (n-1)/2) for m = 0..n-1, so a single
    voxel sits at the origin and every axis has zero mean.
    """
    axes = []
    for n, fov in zip(grid.dims, grid.fov_m):
        pitch = fov / n
        axes.append(pitch * (np.arange(n) - (n - 1) / 2.0))
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([grid.to_vec(xx), grid.to_vec(yy), grid.to_vec(zz)])


@dataclass
class PrescanData:
    """Multi-echo, multi-coil prescan images, shape (N, Gamma, L)."""

    images: np.ndarray
    te_s: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=complex)
        self.te_s = np.asarray(self.te_s, dtype=float)
        if self.images.ndim != 3:
            raise ValueError("prescan images must have shape (echoes, coils, voxels)")
        n = self.images.shape[0]
        if n < 2:
            raise ValueError("prescan needs at least 2 echoes")
        if self.te_s.shape != (n,):
            raise ValueError("echo time count does not match image count")
        d = np.diff(self.te_s)
        if np.any(d <= 0):
            raise ValueError("echo times must be strictly increasing")
        if not np.allclose(d, d[0], rtol=1e-9, atol=0):
            raise ValueError("echo spacing must be uniform")

    @property
    def n_echoes(self) -> int:
        return self.images.shape[0]

    @property
    def n_coils(self) -> int:
        return self.images.shape[1]

    @property
    def delta_te(self) -> float:
        return float(self.te_s[1] - self.te_s[0])


@dataclass
class MaskPair:
    """Trusted mask (map estimation) and reconstruction mask (unknown support)."""

    trusted: np.ndarray
    recon: np.ndarray

    def __post_init__(self):
        self.trusted = np.asarray(self.trusted, dtype=bool)
        self.recon = np.asarray(self.recon, dtype=bool)
        if self.trusted.shape != self.recon.shape:
            raise ValueError("mask shapes differ")


@dataclass
class FieldMap:
    """Off-resonance map in rad/s plus even/odd offset and fit standard error."""

    b0: np.ndarray
    beta: np.ndarray
    stderr: np.ndarray

    def __post_init__(self):
        self.b0 = np.asarray(self.b0, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if np.any(self.stderr < 0):
            raise ValueError("standard error must be nonnegative")


@dataclass
class ReconImage:
    """Reconstructed complex image (flat, length L) plus CG metadata."""

    values: np.ndarray
    iterations: int = 0
    final_residual: float = 0.0


# --------------------------------------------------------------------------
# dataset persistence: manifest.json + raw little-endian binaries
# --------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    version: int
    grid: Grid
    counts: dict
    echo_times_s: list
    arrays: dict = field(default_factory=dict)
    byte_order: str = "little"
    element_order: str = "x-fastest"

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "grid": {"dims": list(self.grid.dims), "fov_m": list(self.grid.fov_m)},
            "counts": dict(self.counts),
            "echo_times_s": [float(t) for t in self.echo_times_s],
            "byte_order": self.byte_order,
            "element_order": self.element_order,
            "arrays": self.arrays,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        version = doc.get("version")
        if version != MANIFEST_VERSION:
            raise VersionError(f"unsupported manifest version {version!r}")
        g = doc["grid"]
        return cls(
            version=version,
            grid=Grid(tuple(g["dims"]), tuple(g["fov_m"])),
            counts=dict(doc.get("counts", {})),
            echo_times_s=list(doc.get("echo_times_s", [])),
            arrays=dict(doc.get("arrays", {})),
            byte_order=doc.get("byte_order", "little"),
            element_order=doc.get("element_order", "x-fastest"),
        )


class Dataset:
    """A dataset directory: manifest plus raw binary arrays, loaded lazily."""

    def __init__(self, path, manifest: DatasetManifest):
        self.path = Path(path)
        self.manifest = manifest

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, path, grid: Grid, counts=None, echo_times_s=()) -> "Dataset":
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        manifest = DatasetManifest(
            version=MANIFEST_VERSION,
            grid=grid,
            counts=dict(counts or {}),
            echo_times_s=list(echo_times_s),
        )
        ds = cls(path, manifest)
        ds.write_manifest()
        return ds

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        mpath = path / MANIFEST_NAME
        if not mpath.is_file():
            raise ManifestMissingError(f"no {MANIFEST_NAME} in {path}")
        with open(mpath, encoding="utf-8") as fh:
            doc = json.load(fh)
        manifest = DatasetManifest.from_json(doc)
        ds = cls(path, manifest)
        for name, entry in manifest.arrays.items():
            ds._check_entry(name, entry)
        return ds

    def _check_entry(self, name, entry):
        tag = entry["dtype"]
        if tag not in DTYPES:
            raise UnknownDtypeError(f"array {name!r}: unknown dtype tag {tag!r}")
        fpath = self.path / entry["file"]
        if not fpath.is_file():
            raise FileMissingError(f"array {name!r}: missing file {entry['file']}")
        expect = int(np.prod(entry["shape"])) * DTYPES[tag].itemsize
        actual = fpath.stat().st_size
        if actual != expect:
            raise SizeMismatchError(
                f"array {name!r}: file {entry['file']} has {actual} bytes, "
                f"shape {entry['shape']} implies {expect}"
            )

    def write_manifest(self):
        with open(self.path / MANIFEST_NAME, "w", encoding="utf-8") as fh:
            json.dump(self.manifest.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    # -- array I/O ---------------------------------------------------------

    def save_array(self, name: str, array: np.ndarray, dtype_tag: str | None = None):
        """Write one array as raw little-endian binary and update the manifest.

        Complex data is stored as interleaved (re, im) pairs, which is the
        native layout of little-endian numpy complex dtypes.
        """
        array = np.asarray(array)
        if dtype_tag is None:
            if np.iscomplexobj(array):
                dtype_tag = "c128"
            elif array.dtype == np.uint8 or array.dtype == bool:
                dtype_tag = "u8"
            else:
                dtype_tag = "f64"
        if dtype_tag not in DTYPES:
            raise UnknownDtypeError(f"unknown dtype tag {dtype_tag!r}")
        if dtype_tag != "u8" and not np.all(np.isfinite(array)):
            raise ValueError(f"array {name!r} contains non-finite values")
        data = np.ascontiguousarray(array.astype(DTYPES[dtype_tag]))
        fname = name + _SUFFIX[dtype_tag]
        with open(self.path / fname, "wb") as fh:
            fh.write(data.tobytes())
        self.manifest.arrays[name] = {
            "file": fname,
            "dtype": dtype_tag,
            "shape": list(array.shape),
        }
        self.write_manifest()

    def load_array(self, name: str) -> np.ndarray:
        entry = self.manifest.arrays.get(name)
        if entry is None:
            raise FileMissingError(f"dataset has no array {name!r}")
        self._check_entry(name, entry)
        dtype = DTYPES[entry["dtype"]]
        data = np.fromfile(self.path / entry["file"], dtype=dtype)
        return data.reshape(entry["shape"])

    def has_array(self, name: str) -> bool:
        return name in self.manifest.arrays

    # -- typed accessors for the standard pipeline arrays ------------------

    def load_prescan(self) -> PrescanData:
        return PrescanData(self.load_array("prescan"), np.asarray(self.manifest.echo_times_s))

    def load_masks(self) -> MaskPair:
        return MaskPair(
            self.load_array("mask_t").astype(bool),
            self.load_array("mask_r").astype(bool),
        )

    @property
    def grid(self) -> Grid:
        return self.manifest.grid
