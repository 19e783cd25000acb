"""Segmentation evaluation: Dice over composite tumor regions and
class-imbalance statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .volume import ALLOWED_LABELS, HEALTHY_LABELS, LabelVolume, TUMOR_LABELS


@dataclass(frozen=True)
class RegionSpec:
    """A named set of labels evaluated as one region."""

    name: str
    members: frozenset

    def __post_init__(self) -> None:
        if not self.members:
            raise DataError(f"region {self.name!r} has no member labels")
        object.__setattr__(self, "members", frozenset(int(m) for m in self.members))


# Composite regions following the challenge convention: enhancing tumor,
# whole tumor, tumor core.
ET = RegionSpec("ET", frozenset({4}))
WT = RegionSpec("WT", frozenset({1, 2, 4}))
TC = RegionSpec("TC", frozenset({1, 4}))
COMPOSITE_REGIONS = (ET, WT, TC)


def per_class_region(label: int) -> RegionSpec:
    if label not in ALLOWED_LABELS or label == 0:
        raise DataError(f"no per-class region for label {label}")
    return RegionSpec(f"label-{label}", frozenset({label}))


def dice(pred: LabelVolume, truth: LabelVolume, region: RegionSpec) -> float:
    """Dice overlap of a region; defined as 1.0 when both sides are empty."""
    if pred.geometry != truth.geometry:
        raise DataError("pred and truth geometries differ")
    members = np.array(sorted(region.members), dtype=np.uint8)
    a = np.isin(pred.labels, members)
    b = np.isin(truth.labels, members)
    na = int(a.sum())
    nb = int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


@dataclass(frozen=True)
class ImbalanceReport:
    """Voxel counts per label plus the frequency ratios that quantify
    class imbalance.

    foreground_ratio: max/min count over nonzero labels present.
    class_ratio: max/min count over all labels present, background
    included; this is the quantity that label enrichment reduces, since
    unlabeled healthy tissue otherwise inflates the background class.
    Ratios are None when fewer than one class is present.
    """

    counts: dict
    foreground_ratio: float | None
    class_ratio: float | None
    tumor_to_healthy: float | None

    def to_dict(self) -> dict:
        return {
            "counts": {str(k): int(v) for k, v in sorted(self.counts.items())},
            "foreground_ratio": self.foreground_ratio,
            "class_ratio": self.class_ratio,
            "tumor_to_healthy": self.tumor_to_healthy,
        }


def class_frequencies(seg: LabelVolume) -> ImbalanceReport:
    """Exact per-label counts; absent labels report 0 and are excluded
    from every ratio."""
    binc = np.bincount(seg.labels.ravel(order="K"), minlength=256)
    counts = {lab: int(binc[lab]) for lab in ALLOWED_LABELS}

    fg = [counts[lab] for lab in ALLOWED_LABELS if lab != 0 and counts[lab] > 0]
    foreground_ratio = (max(fg) / min(fg)) if fg else None

    present = [c for c in counts.values() if c > 0]
    class_ratio = (max(present) / min(present)) if len(present) > 1 else None

    tumor = sum(counts[lab] for lab in TUMOR_LABELS)
    healthy = sum(counts[lab] for lab in HEALTHY_LABELS)
    tumor_to_healthy = (tumor / healthy) if healthy > 0 else None

    return ImbalanceReport(
        counts=counts,
        foreground_ratio=foreground_ratio,
        class_ratio=class_ratio,
        tumor_to_healthy=tumor_to_healthy,
    )


def tumor_only(seg: LabelVolume) -> LabelVolume:
    """Project an extended label map back to tumor-only labels."""
    labels = np.where(np.isin(seg.labels, np.array(TUMOR_LABELS, dtype=np.uint8)),
                      seg.labels, 0).astype(np.uint8)
    return LabelVolume(seg.geometry, labels)
