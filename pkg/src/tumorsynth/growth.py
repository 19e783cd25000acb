"""Multispecies reaction-diffusion tumor growth.

Three coupled cell populations evolve on an atlas brain: proliferative
(p) and infiltrative (i) cells diffuse through tissue and convert into
each other, while crowding-induced hypoxia transfers both into an
immobile necrotic fraction (n).  The solver is explicit, conservative
in flux form, and fully deterministic; all internal arithmetic runs in
float64 regardless of the float32 volume containers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, fields, replace

import numpy as np

from .errors import DataError, NumericalError
from .volume import GridGeometry, LabelVolume, ScalarVolume

# Cap on dt relative to the fastest reaction rate.  Keeps the explicit
# reaction update inside the regime where concentrations provably stay
# in [0, 1] and the necrotic fraction never loses mass.
REACTION_DT_FACTOR = 0.2

# A dt requiring more diffusion substeps than this cannot be integrated
# in sensible time and is reported as a numerical failure.
MAX_DIFFUSION_SUBSTEPS = 100_000

# Sampling ranges used by the dataset pipeline and by randomized
# property tests.  These bracket the defaults; they are configuration
# bounds, not biological ground truth.
PARAM_RANGES = {
    "d_w": (0.02, 0.3),
    "kappa_gw": (0.05, 1.0),
    "kappa_i": (1.0, 8.0),
    "rho_p": (0.02, 0.25),
    "rho_i": (0.01, 0.12),
    "alpha_pi": (0.0, 0.15),
    "beta_ip": (0.0, 0.04),
    "gamma": (0.0, 0.25),
    "c_h": (0.5, 0.95),
    "sigma_h": (0.02, 0.2),
    "seed_sigma": (2.0, 5.0),
    "seed_amplitude": (0.3, 0.8),
    "t_final": (60.0, 200.0),
    "tau_p": (0.3, 0.5),
    "tau_i": (0.01, 0.05),
    "tau_n": (0.3, 0.6),
}


@dataclass(frozen=True)
class GrowthParams:
    """Growth-model parameters.  Rates are per day, lengths in mm."""

    d_w: float = 0.13           # white-matter diffusivity of p, mm^2/day
    kappa_gw: float = 0.1       # gray/white diffusivity ratio
    kappa_i: float = 5.0        # infiltrative diffusivity multiplier
    rho_p: float = 0.1          # logistic growth rate of p
    rho_i: float = 0.05         # logistic growth rate of i
    alpha_pi: float = 0.05      # p -> i conversion rate
    beta_ip: float = 0.01       # i -> p conversion rate
    gamma: float = 0.1          # necrosis rate under hypoxia
    c_h: float = 0.9            # crowding threshold triggering necrosis
    sigma_h: float = 0.05       # smoothness of the necrosis switch
    seed_center: tuple[float, float, float] = (0.0, 0.0, 0.0)  # voxel coords
    seed_sigma: float = 3.0     # mm
    seed_amplitude: float = 0.8
    t_final: float = 300.0      # days
    cfl_safety: float = 0.9
    tau_p: float = 0.4          # enhancing-tumor threshold on p
    tau_i: float = 0.02         # edema threshold on i
    tau_n: float = 0.5          # necrotic-core threshold on n

    def __post_init__(self) -> None:
        for name in ("d_w", "rho_p", "rho_i", "alpha_pi", "beta_ip", "gamma"):
            if getattr(self, name) < 0:
                raise DataError(f"growth parameter {name} must be >= 0")
        if not 0 < self.c_h < 1:
            raise DataError("c_h must lie in (0, 1)")
        if self.sigma_h <= 0:
            raise DataError("sigma_h must be > 0")
        if not 0 < self.kappa_gw <= 1:
            raise DataError("kappa_gw must lie in (0, 1]")
        if self.kappa_i < 1:
            raise DataError("kappa_i must be >= 1")
        if self.seed_sigma <= 0:
            raise DataError("seed_sigma must be > 0")
        if not 0 <= self.seed_amplitude <= 1:
            raise DataError("seed_amplitude must lie in [0, 1]")
        if self.t_final <= 0:
            raise DataError("t_final must be > 0")
        if not 0 < self.cfl_safety < 1:
            raise DataError("cfl_safety must lie in (0, 1)")
        for name in ("tau_p", "tau_i", "tau_n"):
            if not 0 < getattr(self, name) < 1:
                raise DataError(f"threshold {name} must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seed_center"] = list(self.seed_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GrowthParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown growth parameters: {sorted(unknown)}")
        kwargs = dict(d)
        if "seed_center" in kwargs:
            kwargs["seed_center"] = tuple(float(c) for c in kwargs["seed_center"])
        return cls(**kwargs)

    def with_updates(self, **kwargs) -> "GrowthParams":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class SpeciesState:
    """Proliferative/infiltrative/necrotic volume fractions at time t."""

    p: ScalarVolume
    i: ScalarVolume
    n: ScalarVolume
    t: float = 0.0

    def __post_init__(self) -> None:
        if self.t < 0:
            raise DataError("state time must be >= 0")
        if not (self.p.geometry == self.i.geometry == self.n.geometry):
            raise DataError("species fields must share one geometry")
        for name in ("p", "i", "n"):
            if np.any(getattr(self, name).values < 0):
                raise DataError(f"species {name} has negative values")
        total = (self.p.values.astype(np.float64) + self.i.values + self.n.values)
        if total.max(initial=0.0) > 1.0 + 1e-6:
            raise DataError("species fractions sum above 1 + 1e-6")

    @property
    def geometry(self) -> GridGeometry:
        return self.p.geometry


@dataclass(frozen=True)
class TissueCoefficients:
    """Per-voxel diffusivities and growth permissiveness."""

    diff_p: ScalarVolume
    diff_i: ScalarVolume
    growth_scale: ScalarVolume


@dataclass(frozen=True)
class GrowthResult:
    final: SpeciesState
    tumor_labels: LabelVolume
    mass_series: list  # (t, mass_p, mass_i, mass_n) in (days, mm^3)


# Per-voxel diffusivity multiplier by label.  CSF (5) and background (0)
# are barriers; gray matter (6) is slower; tumor-bearing voxels behave
# like white matter so regrowth over existing lesions stays possible.
_DIFF_FACTOR_BY_LABEL = {0: 0.0, 1: 1.0, 2: 1.0, 4: 1.0, 5: 0.0,
                         6: None, 7: 1.0, 8: 1.0}


def derive_tissue_coefficients(labels: LabelVolume,
                               params: GrowthParams) -> TissueCoefficients:
    """Map tissue labels to diffusivity and growth-permissiveness fields."""
    lut = np.zeros(256, dtype=np.float64)
    for lab, fac in _DIFF_FACTOR_BY_LABEL.items():
        lut[lab] = params.kappa_gw if fac is None else fac
    diff_p = lut[labels.labels] * params.d_w
    diff_i = diff_p * params.kappa_i
    growth_scale = (diff_p > 0).astype(np.float32)
    geom = labels.geometry
    return TissueCoefficients(
        diff_p=ScalarVolume(geom, diff_p.astype(np.float32)),
        diff_i=ScalarVolume(geom, diff_i.astype(np.float32)),
        growth_scale=ScalarVolume(geom, growth_scale),
    )


def seed_tumor(geom: GridGeometry, params: GrowthParams) -> SpeciesState:
    """Gaussian proliferative seed centered at seed_center (voxel coords)."""
    center = params.seed_center
    for c, d in zip(center, geom.dims):
        if not 0 <= c <= d - 1:
            raise DataError(f"seed center {center} outside grid {geom.dims}")
    axes = [
        (np.arange(geom.dims[a], dtype=np.float64) - center[a]) * geom.spacing[a]
        for a in range(3)
    ]
    r2 = (axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2
          + axes[2][None, None, :] ** 2)
    p = params.seed_amplitude * np.exp(-r2 / (2.0 * params.seed_sigma ** 2))
    p[p < 1e-6] = 0.0
    zero = np.zeros(geom.dims, dtype=np.float32)
    return SpeciesState(
        p=ScalarVolume(geom, p.astype(np.float32)),
        i=ScalarVolume(geom, zero),
        n=ScalarVolume(geom, zero.copy()),
        t=0.0,
    )


def _face_diffusivities(diff: np.ndarray) -> list[np.ndarray]:
    """Harmonic-mean diffusivity on the interior faces of each axis.

    The harmonic mean vanishes when either side vanishes, which makes
    brain/CSF and brain/background interfaces exact no-flux boundaries.
    """
    faces = []
    for axis in range(3):
        lo = np.moveaxis(diff, axis, 0)[:-1]
        hi = np.moveaxis(diff, axis, 0)[1:]
        s = lo + hi
        face = np.zeros_like(s)
        nz = s > 0
        face[nz] = 2.0 * lo[nz] * hi[nz] / s[nz]
        faces.append(np.moveaxis(face, 0, axis))
    return faces


def _stable_dt(spacing, d_max: float, cfl_safety: float) -> float:
    h_min = min(spacing)
    if d_max <= 0:
        return math.inf
    return cfl_safety * h_min * h_min / (6.0 * d_max)


def _diffuse(s: np.ndarray, faces: list[np.ndarray], spacing, dt: float,
             substeps: int) -> np.ndarray:
    """Conservative flux-form diffusion with no-flux outer boundaries."""
    sub_dt = dt / substeps
    for _ in range(substeps):
        ds = np.zeros_like(s)
        for axis in range(3):
            h = spacing[axis]
            sv = np.moveaxis(s, axis, 0)
            flux = faces[axis] if axis == 0 else np.moveaxis(faces[axis], axis, 0)
            flux = flux * (sv[1:] - sv[:-1]) / h
            dv = np.moveaxis(ds, axis, 0)
            dv[:-1] += (sub_dt / h) * flux
            dv[1:] -= (sub_dt / h) * flux
        s = s + ds
    return s


def _react(p: np.ndarray, i: np.ndarray, n: np.ndarray, gs: np.ndarray,
           params: GrowthParams, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Explicit reaction update; all right-hand sides use the old state."""
    c = p + i + n
    h_switch = 0.5 * (1.0 + np.tanh((c - params.c_h) / params.sigma_h))
    decay = params.gamma * h_switch
    room = 1.0 - c
    dp = params.rho_p * gs * p * room - params.alpha_pi * p + params.beta_ip * i - decay * p
    di = params.rho_i * gs * i * room + params.alpha_pi * p - params.beta_ip * i - decay * i
    dn = decay * (p + i)
    return p + dt * dp, i + dt * di, n + dt * dn


def _clip(p: np.ndarray, i: np.ndarray, n: np.ndarray):
    """Clamp negatives to zero; where the sum exceeds one, rescale the
    mobile species into the room left by the necrotic fraction.

    Rescaling p and i (preserving their ratio) instead of all three
    keeps the necrotic field non-decreasing when diffusion pushes mass
    into a saturated core.
    """
    np.maximum(p, 0.0, out=p)
    np.maximum(i, 0.0, out=i)
    np.maximum(n, 0.0, out=n)
    np.minimum(n, 1.0, out=n)
    c = p + i + n
    over = c > 1.0
    if np.any(over):
        room = 1.0 - n[over]
        mobile = p[over] + i[over]
        f = np.where(mobile > 0, room / np.where(mobile > 0, mobile, 1.0), 0.0)
        p[over] *= f
        i[over] *= f
    return p, i, n


def _check_finite(arrays, dt: float, d_max: float) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(
                f"non-finite species value produced (dt={dt}, D_max={d_max}); "
                "the time step is unstable"
            )


def step(state: SpeciesState, coeffs: TissueCoefficients, params: GrowthParams,
         dt: float) -> SpeciesState:
    """Advance the state by dt: sub-stepped diffusion, reaction, clip."""
    if dt <= 0:
        raise DataError("dt must be > 0")
    geom = state.geometry
    p = state.p.values.astype(np.float64)
    i = state.i.values.astype(np.float64)
    n = state.n.values.astype(np.float64)
    gs = coeffs.growth_scale.values.astype(np.float64)
    dp = coeffs.diff_p.values.astype(np.float64)
    di = coeffs.diff_i.values.astype(np.float64)
    d_max = max(dp.max(initial=0.0), di.max(initial=0.0))
    dt_stable = _stable_dt(geom.spacing, d_max, params.cfl_safety)
    if math.isfinite(dt_stable):
        if not math.isfinite(dt) or dt / dt_stable > MAX_DIFFUSION_SUBSTEPS:
            raise NumericalError(
                f"dt={dt} needs more than {MAX_DIFFUSION_SUBSTEPS} diffusion "
                f"substeps at D_max={d_max}; refusing to integrate"
            )
        substeps = max(1, math.ceil(dt / dt_stable))
    else:
        substeps = 1

    if d_max > 0:
        p = _diffuse(p, _face_diffusivities(dp), geom.spacing, dt, substeps)
        i = _diffuse(i, _face_diffusivities(di), geom.spacing, dt, substeps)
    p, i, n = _react(p, i, n, gs, params, dt)
    p, i, n = _clip(p, i, n)
    _check_finite((p, i, n), dt, d_max)

    return SpeciesState(
        p=ScalarVolume(geom, p.astype(np.float32)),
        i=ScalarVolume(geom, i.astype(np.float32)),
        n=ScalarVolume(geom, n.astype(np.float32)),
        t=state.t + dt,
    )


def species_to_labels(state: SpeciesState, params: GrowthParams) -> LabelVolume:
    """Threshold the species fields into tumor labels.

    Priority per voxel: necrotic core (1) over enhancing (4) over
    edema (2); voxels below all thresholds stay background.
    """
    labels = np.zeros(state.geometry.dims, dtype=np.uint8)
    labels[state.i.values >= params.tau_i] = 2
    labels[state.p.values >= params.tau_p] = 4
    labels[state.n.values >= params.tau_n] = 1
    return LabelVolume(state.geometry, labels)


def simulate(labels: LabelVolume, params: GrowthParams,
             record_every: int = 10, snapshot_hook=None) -> GrowthResult:
    """Run the growth model from t=0 to t_final on an atlas label map.

    The time step honors both the diffusion stability bound and a cap
    of REACTION_DT_FACTOR over the fastest reaction rate; the reaction
    update then provably keeps fractions inside [0, 1], leaving the
    clip to absorb only the saturation overshoot of diffusion into
    necrotic cores.

    snapshot_hook, when given, is called as hook(t, p, i, n) with the
    internal float64 fields at every recording point; the arrays must
    be treated as read-only.
    """
    geom = labels.geometry
    coeffs = derive_tissue_coefficients(labels, params)
    seed_vox = tuple(int(round(c)) for c in params.seed_center)
    for c, d in zip(seed_vox, geom.dims):
        if not 0 <= c < d:
            raise DataError(f"seed center {params.seed_center} outside grid")
    if coeffs.diff_p.values[seed_vox] <= 0:
        raise DataError(
            f"seed voxel {seed_vox} lies in zero-diffusivity tissue "
            f"(label {labels.labels[seed_vox]})"
        )

    dp = coeffs.diff_p.values.astype(np.float64)
    di = coeffs.diff_i.values.astype(np.float64)
    gs = coeffs.growth_scale.values.astype(np.float64)
    d_max = max(dp.max(initial=0.0), di.max(initial=0.0))
    dt_diff = _stable_dt(geom.spacing, d_max, params.cfl_safety)
    rate_max = max(params.rho_p, params.rho_i, params.alpha_pi,
                   params.beta_ip, params.gamma)
    dt_react = REACTION_DT_FACTOR / rate_max if rate_max > 0 else math.inf
    dt_cap = min(dt_diff, dt_react, params.t_final)
    n_steps = max(1, math.ceil(params.t_final / dt_cap - 1e-12))
    dt = params.t_final / n_steps

    faces_p = _face_diffusivities(dp)
    faces_i = _face_diffusivities(di)

    state0 = seed_tumor(geom, params)
    p = state0.p.values.astype(np.float64)
    i = state0.i.values.astype(np.float64)
    n = state0.n.values.astype(np.float64)

    vv = geom.voxel_volume
    mass_series = [(0.0, p.sum() * vv, i.sum() * vv, n.sum() * vv)]
    if snapshot_hook is not None:
        snapshot_hook(0.0, p, i, n)
    for k in range(1, n_steps + 1):
        if d_max > 0:
            p = _diffuse(p, faces_p, geom.spacing, dt, 1)
            i = _diffuse(i, faces_i, geom.spacing, dt, 1)
        p, i, n = _react(p, i, n, gs, params, dt)
        p, i, n = _clip(p, i, n)
        _check_finite((p, i, n), dt, d_max)
        if k % record_every == 0 or k == n_steps:
            t = k * dt
            mass_series.append((t, p.sum() * vv, i.sum() * vv, n.sum() * vv))
            if snapshot_hook is not None:
                snapshot_hook(t, p, i, n)

    final = SpeciesState(
        p=ScalarVolume(geom, p.astype(np.float32)),
        i=ScalarVolume(geom, i.astype(np.float32)),
        n=ScalarVolume(geom, n.astype(np.float32)),
        t=params.t_final,
    )
    return GrowthResult(
        final=final,
        tumor_labels=species_to_labels(final, params),
        mass_series=mass_series,
    )
