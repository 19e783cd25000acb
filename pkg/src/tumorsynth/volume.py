"""Volume containers and grid geometry.

Volumes are immutable after construction (the backing numpy arrays are
marked read-only) and use x-fastest memory ordering so that the raw
buffer matches the on-disk layout of the file format in `nifti.py`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, InitVar

import numpy as np

from .errors import DataError

# Fail-fast bound on total voxel count, to reject corrupt headers.
DEFAULT_VOXEL_CAP = 512 ** 3

# Complete label vocabulary: 0 background, 1 necrotic/non-enhancing core,
# 2 edema, 4 enhancing tumor, 5 CSF, 6 gray matter, 7 white matter,
# 8 glial matter.  3 is intentionally unused.
ALLOWED_LABELS = (0, 1, 2, 4, 5, 6, 7, 8)
TUMOR_LABELS = (1, 2, 4)
HEALTHY_LABELS = (5, 6, 7, 8)

MODALITIES = ("t1", "t1ce", "t2", "flair")


@dataclass(frozen=True)
class GridGeometry:
    """Regular 3D grid: voxel counts, spacing in mm, world origin in mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    voxel_cap: InitVar[int] = DEFAULT_VOXEL_CAP

    def __post_init__(self, voxel_cap: int) -> None:
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise DataError("geometry requires 3 dims, 3 spacings, 3 origin components")
        if any(d < 1 for d in dims):
            raise DataError(f"all dims must be >= 1, got {dims}")
        if any(s <= 0 for s in spacing):
            raise DataError(f"all spacings must be > 0, got {spacing}")
        n = dims[0] * dims[1] * dims[2]
        if n > voxel_cap:
            raise DataError(f"voxel count {n} exceeds cap {voxel_cap}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        sx, sy, sz = self.spacing
        return sx * sy * sz


def _as_volume_array(values: np.ndarray, geometry: GridGeometry, dtype) -> np.ndarray:
    arr = np.asfortranarray(values, dtype=dtype)
    if arr.shape != tuple(geometry.dims):
        if arr.size != geometry.voxel_count:
            raise DataError(
                f"value count {arr.size} does not match geometry {geometry.dims}"
            )
        arr = arr.reshape(geometry.dims, order="F")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """Dense float32 intensity volume on a regular grid."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = _as_volume_array(self.values, self.geometry, np.float32)
        if not np.all(np.isfinite(arr)):
            raise DataError("scalar volume contains non-finite values")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class LabelVolume:
    """Dense uint8 class-label volume restricted to the allowed label set."""

    geometry: GridGeometry
    labels: np.ndarray

    def __post_init__(self) -> None:
        src = np.asarray(self.labels)
        if np.issubdtype(src.dtype, np.floating):
            if not np.all(src == np.round(src)):
                raise DataError("label volume contains non-integer values")
        arr = _as_volume_array(src, self.geometry, np.uint8)
        present = np.unique(arr)
        bad = sorted(set(present.tolist()) - set(ALLOWED_LABELS))
        if bad:
            raise DataError(f"labels outside allowed set {ALLOWED_LABELS}: {bad}")
        object.__setattr__(self, "labels", arr)


@dataclass(frozen=True)
class MultimodalCase:
    """One dataset instance: four modality volumes plus a label volume,
    all sharing one geometry."""

    id: str
    t1: ScalarVolume
    t1ce: ScalarVolume
    t2: ScalarVolume
    flair: ScalarVolume
    seg: LabelVolume
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        geoms = [self.t1.geometry, self.t1ce.geometry, self.t2.geometry,
                 self.flair.geometry, self.seg.geometry]
        if any(g != geoms[0] for g in geoms[1:]):
            raise DataError(f"case {self.id!r}: modality/label geometries differ")

    @property
    def geometry(self) -> GridGeometry:
        return self.t1.geometry

    def modality(self, name: str) -> ScalarVolume:
        if name not in MODALITIES:
            raise DataError(f"unknown modality {name!r}")
        return getattr(self, name)


def interp_trilinear(values: np.ndarray, x: np.ndarray, y: np.ndarray,
                     z: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a 3D array at continuous voxel coordinates.

    Coordinates outside [0, dim-1] clamp to the boundary value.  Gathered
    values are promoted to float64 before blending.
    """
    nx, ny, nz = values.shape
    x = np.clip(x, 0.0, nx - 1.0)
    y = np.clip(y, 0.0, ny - 1.0)
    z = np.clip(z, 0.0, nz - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    z0 = np.floor(z).astype(np.intp)
    x0 = np.minimum(x0, nx - 2) if nx > 1 else np.zeros_like(x0)
    y0 = np.minimum(y0, ny - 2) if ny > 1 else np.zeros_like(y0)
    z0 = np.minimum(z0, nz - 2) if nz > 1 else np.zeros_like(z0)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = (x - x0).astype(np.float64)
    fy = (y - y0).astype(np.float64)
    fz = (z - z0).astype(np.float64)

    v = values.astype(np.float64, copy=False)
    c000 = v[x0, y0, z0]
    c100 = v[x1, y0, z0]
    c010 = v[x0, y1, z0]
    c110 = v[x1, y1, z0]
    c001 = v[x0, y0, z1]
    c101 = v[x1, y0, z1]
    c011 = v[x0, y1, z1]
    c111 = v[x1, y1, z1]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def interp_nearest(values: np.ndarray, x: np.ndarray, y: np.ndarray,
                   z: np.ndarray) -> np.ndarray:
    """Nearest-neighbor lookup with clamping, for label volumes."""
    nx, ny, nz = values.shape
    xi = np.clip(np.rint(x), 0, nx - 1).astype(np.intp)
    yi = np.clip(np.rint(y), 0, ny - 1).astype(np.intp)
    zi = np.clip(np.rint(z), 0, nz - 1).astype(np.intp)
    return values[xi, yi, zi]


def sample_trilinear(vol: ScalarVolume, point) -> float:
    """Sample a scalar volume at one continuous voxel coordinate."""
    x, y, z = (np.asarray([c], dtype=np.float64) for c in point)
    return float(interp_trilinear(vol.values, x, y, z)[0])


def brain_mask(seg: LabelVolume) -> np.ndarray:
    """Boolean mask, true wherever the label is nonzero."""
    return seg.labels != 0
