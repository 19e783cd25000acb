"""Diffeomorphic registration and atlas label fusion.

The transform model is a stationary velocity field whose exponential
(computed by scaling and squaring) is a diffeomorphism; the driving
force is the classic intensity-difference (demons) update with Gaussian
fluid/diffusion regularization, run over a multiresolution pyramid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, NumericalError
from .volume import (
    GridGeometry,
    HEALTHY_LABELS,
    LabelVolume,
    ScalarVolume,
    TUMOR_LABELS,
    interp_nearest,
    interp_trilinear,
)

log = logging.getLogger(__name__)

_HEALTHY_SET = (0,) + HEALTHY_LABELS


@dataclass(frozen=True)
class VelocityField:
    """Stationary velocity field, components in voxel units."""

    geometry: GridGeometry
    vx: ScalarVolume
    vy: ScalarVolume
    vz: ScalarVolume
    max_magnitude: float = field(init=False)

    def __post_init__(self) -> None:
        for comp in (self.vx, self.vy, self.vz):
            if comp.geometry != self.geometry:
                raise DataError("velocity component geometry mismatch")
        mag = np.sqrt(
            self.vx.values.astype(np.float64) ** 2
            + self.vy.values.astype(np.float64) ** 2
            + self.vz.values.astype(np.float64) ** 2
        )
        object.__setattr__(self, "max_magnitude", float(mag.max(initial=0.0)))

    @classmethod
    def from_arrays(cls, geom: GridGeometry, vx, vy, vz) -> "VelocityField":
        return cls(geom, ScalarVolume(geom, np.asarray(vx, dtype=np.float32)),
                   ScalarVolume(geom, np.asarray(vy, dtype=np.float32)),
                   ScalarVolume(geom, np.asarray(vz, dtype=np.float32)))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.vx.values.astype(np.float64),
                self.vy.values.astype(np.float64),
                self.vz.values.astype(np.float64))


@dataclass(frozen=True)
class DeformationField:
    """Displacement field in voxels, with its minimum interior Jacobian
    determinant cached as a diffeomorphy diagnostic."""

    geometry: GridGeometry
    dx: ScalarVolume
    dy: ScalarVolume
    dz: ScalarVolume
    min_jacobian: float

    @classmethod
    def from_arrays(cls, geom: GridGeometry, dx, dy, dz) -> "DeformationField":
        mj = min_jacobian_determinant(dx, dy, dz)
        return cls(geom, ScalarVolume(geom, np.asarray(dx, dtype=np.float32)),
                   ScalarVolume(geom, np.asarray(dy, dtype=np.float32)),
                   ScalarVolume(geom, np.asarray(dz, dtype=np.float32)), mj)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.dx.values.astype(np.float64),
                self.dy.values.astype(np.float64),
                self.dz.values.astype(np.float64))


@dataclass(frozen=True)
class RegistrationParams:
    levels: int = 3
    iters_per_level: tuple[int, ...] = (100, 75, 50)  # coarse -> fine
    sigma_fluid: float = 1.0    # smoothing of the update field, voxels
    sigma_diff: float = 1.5     # smoothing of the velocity field, voxels
    force_epsilon: float = 1e-6
    max_step: float = 1.0       # per-iteration update cap, voxels

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise DataError("levels must be >= 1")
        if len(self.iters_per_level) != self.levels:
            raise DataError("iters_per_level length must equal levels")
        if self.sigma_fluid < 0 or self.sigma_diff < 0:
            raise DataError("smoothing sigmas must be >= 0")
        if self.force_epsilon <= 0 or self.max_step <= 0:
            raise DataError("force_epsilon and max_step must be > 0")


@dataclass(frozen=True)
class RegistrationResult:
    velocity: VelocityField
    similarity_initial: float   # masked MSE before registration
    similarity_final: float     # masked MSE after registration
    min_jacobian: float
    iterations_run: int


@dataclass(frozen=True)
class Atlas:
    """Healthy prelabeled template: a T1 image plus tissue labels."""

    id: str
    t1: ScalarVolume
    labels: LabelVolume

    def __post_init__(self) -> None:
        if self.t1.geometry != self.labels.geometry:
            raise DataError(f"atlas {self.id!r}: image/label geometry mismatch")
        present = set(np.unique(self.labels.labels).tolist())
        if not present <= set(_HEALTHY_SET):
            raise DataError(f"atlas {self.id!r} carries non-healthy labels")


def _identity_coords(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )


def _sample_field(comp: np.ndarray, xs, ys, zs) -> np.ndarray:
    return interp_trilinear(comp, xs, ys, zs)


def _exponentiate_arrays(vx, vy, vz) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scaling and squaring of a stationary velocity field."""
    vmax = float(np.sqrt(vx * vx + vy * vy + vz * vz).max(initial=0.0))
    if vmax == 0.0:
        return vx.copy(), vy.copy(), vz.copy()
    squarings = max(0, math.ceil(math.log2(vmax / 0.5)))
    scale = 1.0 / (1 << squarings)
    dx, dy, dz = vx * scale, vy * scale, vz * scale
    base = _identity_coords(dx.shape)
    for _ in range(squarings):
        xs = base[0] + dx
        ys = base[1] + dy
        zs = base[2] + dz
        dx = dx + _sample_field(dx, xs, ys, zs)
        dy = dy + _sample_field(dy, xs, ys, zs)
        dz = dz + _sample_field(dz, xs, ys, zs)
    return dx, dy, dz


def min_jacobian_determinant(dx, dy, dz) -> float:
    """Minimum det(I + grad d) over the grid interior, central differences."""
    if min(dx.shape) < 3:
        raise DataError("jacobian diagnostic needs at least 3 voxels per axis")
    gx = np.gradient(np.asarray(dx, dtype=np.float64))
    gy = np.gradient(np.asarray(dy, dtype=np.float64))
    gz = np.gradient(np.asarray(dz, dtype=np.float64))
    a11, a12, a13 = 1.0 + gx[0], gx[1], gx[2]
    a21, a22, a23 = gy[0], 1.0 + gy[1], gy[2]
    a31, a32, a33 = gz[0], gz[1], 1.0 + gz[2]
    det = (a11 * (a22 * a33 - a23 * a32)
           - a12 * (a21 * a33 - a23 * a31)
           + a13 * (a21 * a32 - a22 * a31))
    interior = det[1:-1, 1:-1, 1:-1]
    return float(interior.min())


def exponentiate(v: VelocityField) -> DeformationField:
    """Exponentiate a velocity field into a diffeomorphic deformation."""
    dx, dy, dz = _exponentiate_arrays(*v.arrays())
    if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))
            and np.all(np.isfinite(dz))):
        raise NumericalError("field exponentiation produced non-finite values")
    return DeformationField.from_arrays(v.geometry, dx, dy, dz)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Deformation of outer applied after inner: (outer o inner)(x)."""
    if outer.geometry != inner.geometry:
        raise DataError("cannot compose deformations on different geometries")
    ox, oy, oz = outer.arrays()
    ix, iy, iz = inner.arrays()
    base = _identity_coords(ix.shape)
    xs, ys, zs = base[0] + ix, base[1] + iy, base[2] + iz
    dx = ix + _sample_field(ox, xs, ys, zs)
    dy = iy + _sample_field(oy, xs, ys, zs)
    dz = iz + _sample_field(oz, xs, ys, zs)
    return DeformationField.from_arrays(outer.geometry, dx, dy, dz)


def warp(vol: ScalarVolume | LabelVolume, phi: DeformationField,
         interp: str = "linear") -> ScalarVolume | LabelVolume:
    """Resample a volume through a deformation: output(x) = input(x + phi(x))."""
    if vol.geometry != phi.geometry:
        raise DataError("volume and deformation geometries differ")
    if interp not in ("linear", "nearest"):
        raise DataError(f"unknown interpolation {interp!r}")
    if isinstance(vol, LabelVolume) and interp == "linear":
        raise DataError("linear interpolation would invent labels; use nearest")
    dx, dy, dz = phi.arrays()
    base = _identity_coords(dx.shape)
    xs, ys, zs = base[0] + dx, base[1] + dy, base[2] + dz
    if isinstance(vol, LabelVolume):
        out = interp_nearest(vol.labels, xs, ys, zs)
        return LabelVolume(vol.geometry, out)
    out = interp_trilinear(vol.values, xs, ys, zs)
    return ScalarVolume(vol.geometry, out.astype(np.float32))


def _force_arrays(fixed, moving_w, valid, eps, max_step):
    """Demons update pulling the warped moving image toward the fixed one."""
    diff = fixed - moving_w
    gx, gy, gz = np.gradient(moving_w)
    denom = gx * gx + gy * gy + gz * gz + diff * diff + eps
    ux = diff * gx / denom
    uy = diff * gy / denom
    uz = diff * gz / denom
    ux[~valid] = 0.0
    uy[~valid] = 0.0
    uz[~valid] = 0.0
    norm = np.sqrt(ux * ux + uy * uy + uz * uz)
    over = norm > max_step
    if np.any(over):
        f = max_step / norm[over]
        ux[over] *= f
        uy[over] *= f
        uz[over] *= f
    return ux, uy, uz


def demons_force(fixed: ScalarVolume, warped_moving: ScalarVolume,
                 valid_mask: np.ndarray, eps: float = 1e-6,
                 max_step: float = 1.0) -> VelocityField:
    """Per-voxel update field from normalized intensity residuals."""
    if fixed.geometry != warped_moving.geometry:
        raise DataError("fixed/moving geometry mismatch")
    ux, uy, uz = _force_arrays(
        fixed.values.astype(np.float64),
        warped_moving.values.astype(np.float64),
        np.asarray(valid_mask, dtype=bool), eps, max_step,
    )
    return VelocityField.from_arrays(fixed.geometry, ux, uy, uz)


def _downsample2(arr: np.ndarray) -> np.ndarray:
    """Factor-2 block averaging; odd extents replicate the last slice."""
    pads = [(0, s % 2) for s in arr.shape]
    if any(p[1] for p in pads):
        arr = np.pad(arr, pads, mode="edge")
    nx, ny, nz = arr.shape
    return arr.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(1, 3, 5))


def _upsample2(arr: np.ndarray, target_shape) -> np.ndarray:
    """Trilinear upsampling aligned to block centers (coarse voxel c sits
    at fine coordinate 2c + 0.5)."""
    xs = (np.arange(target_shape[0], dtype=np.float64) - 0.5) / 2.0
    ys = (np.arange(target_shape[1], dtype=np.float64) - 0.5) / 2.0
    zs = (np.arange(target_shape[2], dtype=np.float64) - 0.5) / 2.0
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return interp_trilinear(arr, gx, gy, gz)


def _smooth(comp: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return comp
    return ndimage.gaussian_filter(comp, sigma=sigma, mode="constant", cval=0.0)


def normalize_intensity(values: np.ndarray, mask: np.ndarray | None = None,
                        p_lo: float = 1.0, p_hi: float = 99.0) -> np.ndarray:
    """Rescale the 1st-99th percentile window to [0, 1], clipping outside."""
    vals = np.asarray(values, dtype=np.float64)
    sample = vals[mask] if mask is not None else vals.ravel()
    if sample.size == 0:
        return np.zeros_like(vals)
    lo, hi = np.percentile(sample, [p_lo, p_hi])
    if hi <= lo:
        return np.zeros_like(vals)
    return np.clip((vals - lo) / (hi - lo), 0.0, 1.0)


def _masked_mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    if not np.any(mask):
        return 0.0
    d = a[mask] - b[mask]
    return float(np.mean(d * d))


def register(fixed: ScalarVolume, moving: ScalarVolume,
             exclude_mask: np.ndarray | None = None,
             params: RegistrationParams = RegistrationParams(),
             support_mask: np.ndarray | None = None) -> RegistrationResult:
    """Estimate the velocity field warping `moving` onto `fixed`.

    exclude_mask marks voxels the similarity force must ignore (the
    tumor region); support_mask restricts the force to the brain.  Both
    default to the trivial mask.
    """
    if fixed.geometry != moving.geometry:
        raise DataError("fixed and moving volumes must share a geometry")
    geom = fixed.geometry
    dims = geom.dims

    support = (np.ones(dims, dtype=bool) if support_mask is None
               else np.asarray(support_mask, dtype=bool))
    exclude = (np.zeros(dims, dtype=bool) if exclude_mask is None
               else np.asarray(exclude_mask, dtype=bool))
    valid_fine = support & ~exclude

    f_fine = normalize_intensity(fixed.values, support if support_mask is not None else None)
    m_fine = normalize_intensity(moving.values, support if support_mask is not None else None)

    # Image/mask pyramids, finest first.
    imgs_f, imgs_m, valids = [f_fine], [m_fine], [valid_fine]
    for _ in range(params.levels - 1):
        imgs_f.append(_downsample2(imgs_f[-1]))
        imgs_m.append(_downsample2(imgs_m[-1]))
        valids.append(_downsample2(valids[-1].astype(np.float64)) > 0.5)

    similarity_initial = _masked_mse(f_fine, m_fine, valid_fine)

    vx = vy = vz = None
    iterations = 0
    for level in range(params.levels - 1, -1, -1):
        f = imgs_f[level]
        m = imgs_m[level]
        valid = valids[level]
        if vx is None:
            vx = np.zeros(f.shape, dtype=np.float64)
            vy = np.zeros(f.shape, dtype=np.float64)
            vz = np.zeros(f.shape, dtype=np.float64)
        else:
            vx = 2.0 * _upsample2(vx, f.shape)
            vy = 2.0 * _upsample2(vy, f.shape)
            vz = 2.0 * _upsample2(vz, f.shape)
        base = _identity_coords(f.shape)
        n_iters = params.iters_per_level[params.levels - 1 - level]
        for _ in range(n_iters):
            dx, dy, dz = _exponentiate_arrays(vx, vy, vz)
            m_w = interp_trilinear(m, base[0] + dx, base[1] + dy, base[2] + dz)
            ux, uy, uz = _force_arrays(f, m_w, valid, params.force_epsilon,
                                       params.max_step)
            vx = _smooth(vx + _smooth(ux, params.sigma_fluid), params.sigma_diff)
            vy = _smooth(vy + _smooth(uy, params.sigma_fluid), params.sigma_diff)
            vz = _smooth(vz + _smooth(uz, params.sigma_fluid), params.sigma_diff)
            iterations += 1
        if not (np.all(np.isfinite(vx)) and np.all(np.isfinite(vy))
                and np.all(np.isfinite(vz))):
            raise NumericalError("registration produced a non-finite velocity field")

    dx, dy, dz = _exponentiate_arrays(vx, vy, vz)
    base = _identity_coords(f_fine.shape)
    m_w = interp_trilinear(m_fine, base[0] + dx, base[1] + dy, base[2] + dz)
    similarity_final = _masked_mse(f_fine, m_w, valid_fine)
    velocity = VelocityField.from_arrays(geom, vx, vy, vz)
    mj = min_jacobian_determinant(dx, dy, dz)
    return RegistrationResult(
        velocity=velocity,
        similarity_initial=similarity_initial,
        similarity_final=similarity_final,
        min_jacobian=mj,
        iterations_run=iterations,
    )


def fuse_labels(warped_atlas_labels: list[LabelVolume],
                similarities: list[float]) -> LabelVolume:
    """Majority vote over warped atlas labels.

    Ties go to the label voted by the atlas with the lowest (best)
    similarity; remaining ties resolve to the smallest label, which
    keeps fusion invariant under permutations of the atlas list.
    """
    if not warped_atlas_labels:
        raise DataError("fuse_labels requires at least one atlas")
    if len(similarities) != len(warped_atlas_labels):
        raise DataError("one similarity per atlas label map required")
    geom = warped_atlas_labels[0].geometry
    cand = np.array(_HEALTHY_SET, dtype=np.uint8)
    lab_to_idx = np.full(256, -1, dtype=np.intp)
    lab_to_idx[cand] = np.arange(len(cand))

    n_vox = geom.voxel_count
    counts = np.zeros((len(cand), n_vox), dtype=np.int32)
    minsim = np.full((len(cand), n_vox), np.inf)
    cols = np.arange(n_vox)
    for lv, sim in zip(warped_atlas_labels, similarities):
        if lv.geometry != geom:
            raise DataError("warped atlas label maps must share a geometry")
        flat = lv.labels.ravel(order="F")
        idx = lab_to_idx[flat]
        if np.any(idx < 0):
            raise DataError("atlas labels must be healthy-only for fusion")
        counts[idx, cols] += 1
        minsim[idx, cols] = np.minimum(minsim[idx, cols], float(sim))

    max_counts = counts.max(axis=0)
    score = np.where(counts == max_counts, minsim, np.inf)
    winner = score.argmin(axis=0)
    fused = cand[winner].reshape(geom.dims, order="F")
    return LabelVolume(geom, fused)


def _enrich_impl(case, atlases: list[Atlas], params: RegistrationParams):
    if not atlases:
        raise DataError("enrichment requires at least one atlas")
    seg = case.seg.labels
    tumor = np.isin(seg, TUMOR_LABELS)
    if not np.any(tumor):
        log.warning("case %s has no tumor labels; nothing to exclude", case.id)
    struct = ndimage.generate_binary_structure(3, 1)
    exclude = ndimage.binary_dilation(tumor, structure=struct, iterations=2)
    support = (case.t1.values > 0) | (seg != 0)

    warped_labels: list[LabelVolume] = []
    sims: list[float] = []
    reports: list[dict] = []
    for atlas in atlases:
        if atlas.t1.geometry != case.geometry:
            raise DataError(f"atlas {atlas.id!r} geometry differs from case")
        try:
            res = register(case.t1, atlas.t1, exclude, params, support)
            phi = exponentiate(res.velocity)
            warped = warp(atlas.labels, phi, interp="nearest")
        except (NumericalError, DataError) as exc:
            log.warning("atlas %s failed to register: %s", atlas.id, exc)
            reports.append({"atlas": atlas.id, "status": "failed",
                            "error": str(exc)})
            continue
        warped_labels.append(warped)
        sims.append(res.similarity_final)
        reports.append({
            "atlas": atlas.id,
            "status": "ok",
            "similarity_initial": res.similarity_initial,
            "similarity_final": res.similarity_final,
            "min_jacobian": res.min_jacobian,
            "iterations": res.iterations_run,
        })
    if not warped_labels:
        raise DataError("registration failed for every atlas")

    fused = fuse_labels(warped_labels, sims)
    out = np.zeros(case.geometry.dims, dtype=np.uint8)
    out[support] = fused.labels[support]
    out[tumor] = seg[tumor]
    return LabelVolume(case.geometry, out), reports


def enrich_case(case, atlases: list[Atlas],
                params: RegistrationParams = RegistrationParams()) -> LabelVolume:
    """Extend a case's tumor-only segmentation with fused healthy labels.

    Tumor voxels pass through untouched; healthy labels come from
    majority-fused warped atlases; everything outside the brain stays 0.
    """
    labels, _ = _enrich_impl(case, atlases, params)
    return labels


def enrich_case_with_report(case, atlases: list[Atlas],
                            params: RegistrationParams = RegistrationParams()):
    """enrich_case plus the per-atlas registration report for the CLI."""
    return _enrich_impl(case, atlases, params)
