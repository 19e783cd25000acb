"""Synthetic MR intensity generation from extended label maps.

Each tissue class carries a per-modality Gaussian intensity model;
partial-volume mixing, additive noise, and a smooth multiplicative bias
field produce the raw (deliberately unrealistic) synthetic images that
the adaptation stage later matches to a real reference distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .rng import RNG_ALGORITHM, make_rng
from .volume import (
    ALLOWED_LABELS,
    LabelVolume,
    MODALITIES,
    MultimodalCase,
    ScalarVolume,
)

MODEL_LABELS = tuple(l for l in ALLOWED_LABELS if l != 0)


@dataclass(frozen=True)
class IntensityModel:
    """(label, modality) -> (mean, std) in arbitrary MR units.

    Background is fixed at 0 and carries no entry.
    """

    table: dict

    def __post_init__(self) -> None:
        missing = [(l, m) for l in MODEL_LABELS for m in MODALITIES
                   if (l, m) not in self.table]
        if missing:
            raise DataError(f"intensity model is missing entries for {missing}")
        for key, (mean, std) in self.table.items():
            if std < 0:
                raise DataError(f"negative std for {key}")

    def mean_std(self, label: int, modality: str) -> tuple[float, float]:
        return self.table[(label, modality)]

    def to_json(self, path) -> None:
        payload = {f"{l}/{m}": {"mean": float(mu), "std": float(sd)}
                   for (l, m), (mu, sd) in sorted(self.table.items())}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "IntensityModel":
        payload = json.loads(Path(path).read_text())
        table = {}
        for key, entry in payload.items():
            lab_s, mod = key.split("/")
            table[(int(lab_s), mod)] = (float(entry["mean"]), float(entry["std"]))
        return cls(table)


@dataclass(frozen=True)
class SynthParams:
    pv_sigma: float = 0.7        # partial-volume smoothing of indicators, voxels
    noise_std_frac: float = 0.5  # noise std as a fraction of class std
    bias_amplitude: float = 0.2  # multiplicative bias range
    bias_sigma: float = 16.0     # bias smoothness, voxels
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("pv_sigma", "noise_std_frac", "bias_amplitude", "bias_sigma"):
            if getattr(self, name) < 0:
                raise DataError(f"synthesis parameter {name} must be >= 0")


def estimate_intensity_model(cases: list[MultimodalCase]) -> IntensityModel:
    """Per-class, per-modality mean/std over every voxel carrying the class.

    Raises if any (label, modality) pair is unobserved across the corpus.
    """
    if not cases:
        raise DataError("cannot estimate an intensity model from zero cases")
    sums = {(l, m): 0.0 for l in MODEL_LABELS for m in MODALITIES}
    sq_sums = dict(sums)
    counts = {l: 0 for l in MODEL_LABELS}
    for case in cases:
        seg = case.seg.labels
        for lab in MODEL_LABELS:
            mask = seg == lab
            k = int(mask.sum())
            if k == 0:
                continue
            counts[lab] += k
            for m in MODALITIES:
                vals = case.modality(m).values[mask].astype(np.float64)
                sums[(lab, m)] += float(vals.sum())
                sq_sums[(lab, m)] += float((vals * vals).sum())
    missing = [l for l in MODEL_LABELS if counts[l] == 0]
    if missing:
        raise DataError(
            f"labels never observed in the corpus: {missing}; "
            "every (label, modality) pair needs at least one voxel"
        )
    table = {}
    for lab in MODEL_LABELS:
        k = counts[lab]
        for m in MODALITIES:
            mean = sums[(lab, m)] / k
            var = max(sq_sums[(lab, m)] / k - mean * mean, 0.0)
            table[(lab, m)] = (mean, float(np.sqrt(var)))
    return IntensityModel(table)


def _partial_volume_weights(seg: np.ndarray, labels_present, pv_sigma: float,
                            brain: np.ndarray) -> dict[int, np.ndarray]:
    """Smoothed, per-voxel-normalized label indicator fields over the brain."""
    weights = {}
    total = np.zeros(seg.shape, dtype=np.float64)
    for lab in labels_present:
        ind = (seg == lab).astype(np.float64)
        if pv_sigma > 0:
            ind = ndimage.gaussian_filter(ind, sigma=pv_sigma, mode="nearest")
        weights[lab] = ind
        total += ind
    total[~brain] = 1.0  # avoid 0/0; background is zeroed later anyway
    total[total == 0] = 1.0
    for lab in labels_present:
        weights[lab] = weights[lab] / total
    return weights


def synthesize(labels: LabelVolume, species, model: IntensityModel,
               params: SynthParams, case_id: str = "synthetic") -> MultimodalCase:
    """Render four modality volumes from an extended label map.

    `species` is accepted for interface compatibility with the growth
    stage but intensities depend on the labels alone.  Fully
    deterministic under a fixed rng_seed; the noise-free component does
    not depend on the seed.
    """
    geom = labels.geometry
    if species is not None and species.geometry != geom:
        raise DataError("species fields and labels must share a geometry")
    seg = labels.labels
    brain = seg != 0
    present = [int(l) for l in np.unique(seg) if l != 0]
    weights = _partial_volume_weights(seg, present, params.pv_sigma, brain)

    rng = make_rng(params.rng_seed)
    volumes = {}
    # Draw order is fixed: per modality (t1, t1ce, t2, flair), the noise
    # field first, then the bias field.
    for m in MODALITIES:
        mean_field = np.zeros(geom.dims, dtype=np.float64)
        std_field = np.zeros(geom.dims, dtype=np.float64)
        for lab in present:
            mu, sd = model.mean_std(lab, m)
            mean_field += weights[lab] * mu
            std_field += weights[lab] * sd
        img = mean_field
        noise = rng.standard_normal(geom.dims)
        if params.noise_std_frac > 0:
            img = img + noise * std_field * params.noise_std_frac
        bias_raw = rng.standard_normal(geom.dims)
        if params.bias_amplitude > 0:
            b = ndimage.gaussian_filter(bias_raw, sigma=params.bias_sigma,
                                        mode="nearest")
            peak = np.abs(b).max()
            if peak > 0:
                b = b / peak
            img = img * (1.0 + params.bias_amplitude * b)
        img[~brain] = 0.0
        volumes[m] = ScalarVolume(geom, img.astype(np.float32))

    meta = {
        "id": case_id,
        "rng_algorithm": RNG_ALGORITHM,
        "rng_seed": int(params.rng_seed),
        "synthesis": {
            "pv_sigma": params.pv_sigma,
            "noise_std_frac": params.noise_std_frac,
            "bias_amplitude": params.bias_amplitude,
            "bias_sigma": params.bias_sigma,
        },
    }
    return MultimodalCase(id=case_id, seg=labels, meta=meta, **volumes)
