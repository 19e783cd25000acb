"""Intensity-distribution adaptation by monotone quantile matching.

A reference distribution is a per-modality quantile table pooled over a
real (or stand-in) corpus; adaptation transfers each brain voxel of a
synthetic case through the source-to-reference quantile map, then
reports the Wasserstein-1 distance to the reference before and after.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError
from .volume import MODALITIES, MultimodalCase, ScalarVolume, brain_mask

QUANTILE_COUNT = 1024
REPORT_BINS = 256


class BinnedHistogram(NamedTuple):
    """Bin counts plus the shared edge array that defines the binning."""

    counts: np.ndarray
    edges: np.ndarray


@dataclass(frozen=True)
class ReferenceDistribution:
    """Per-modality sorted quantile tables of brain-mask intensities."""

    quantiles: dict  # modality -> np.ndarray of QUANTILE_COUNT values
    corpus_size: int = 0

    def __post_init__(self) -> None:
        tables = {}
        for m in MODALITIES:
            if m not in self.quantiles:
                raise DataError(f"reference distribution missing modality {m}")
            q = np.asarray(self.quantiles[m], dtype=np.float64)
            if q.ndim != 1 or q.size < 2:
                raise DataError("quantile tables need at least 2 entries")
            if np.any(np.diff(q) < 0):
                raise DataError(f"quantile table for {m} is not non-decreasing")
            tables[m] = q
        object.__setattr__(self, "quantiles", tables)

    def to_json(self, path) -> None:
        payload = {
            "corpus_size": self.corpus_size,
            "quantiles": {m: [float(v) for v in q]
                          for m, q in sorted(self.quantiles.items())},
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "ReferenceDistribution":
        payload = json.loads(Path(path).read_text())
        return cls(
            quantiles={m: np.asarray(q, dtype=np.float64)
                       for m, q in payload["quantiles"].items()},
            corpus_size=int(payload.get("corpus_size", 0)),
        )


@dataclass(frozen=True)
class AdaptationReport:
    """Wasserstein-1 distance to the reference, per modality."""

    wasserstein1_before: dict
    wasserstein1_after: dict
    bins: int = REPORT_BINS
    degenerate_modalities: tuple = ()

    def to_dict(self) -> dict:
        return {
            "bins": self.bins,
            "wasserstein1_before": {m: float(v) for m, v
                                    in sorted(self.wasserstein1_before.items())},
            "wasserstein1_after": {m: float(v) for m, v
                                   in sorted(self.wasserstein1_after.items())},
            "degenerate_modalities": list(self.degenerate_modalities),
        }


def build_reference(cases: list[MultimodalCase],
                    n_quantiles: int = QUANTILE_COUNT) -> ReferenceDistribution:
    """Pool brain intensities per modality and tabulate evenly spaced
    quantiles (linear interpolation between order statistics)."""
    if not cases:
        raise DataError("reference corpus is empty")
    levels = np.linspace(0.0, 1.0, n_quantiles)
    quantiles = {}
    for m in MODALITIES:
        pooled = []
        for case in cases:
            mask = brain_mask(case.seg)
            if not np.any(mask):
                raise DataError(f"case {case.id!r} has an empty brain mask")
            pooled.append(case.modality(m).values[mask].astype(np.float64))
        quantiles[m] = np.quantile(np.concatenate(pooled), levels)
    return ReferenceDistribution(quantiles=quantiles, corpus_size=len(cases))


def _histogram(values: np.ndarray, lo: float, hi: float,
               bins: int) -> BinnedHistogram:
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return BinnedHistogram(counts.astype(np.float64), edges)


def wasserstein1(hist_a: BinnedHistogram, hist_b: BinnedHistogram) -> float:
    """W1 between two histograms on identical binning: the area between
    their normalized CDFs."""
    a = np.asarray(hist_a.counts, dtype=np.float64)
    b = np.asarray(hist_b.counts, dtype=np.float64)
    if a.shape != b.shape or not np.array_equal(hist_a.edges, hist_b.edges):
        raise DataError("histograms are on mismatched binnings")
    if a.sum() == 0 or b.sum() == 0:
        raise DataError("histograms must be nonempty")
    cdf_a = np.cumsum(a) / a.sum()
    cdf_b = np.cumsum(b) / b.sum()
    widths = np.diff(np.asarray(hist_a.edges, dtype=np.float64))
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def _quantile_map(values: np.ndarray, src_q: np.ndarray,
                  ref_q: np.ndarray) -> np.ndarray:
    """Monotone quantile-to-quantile transfer of a value array.

    Flat stretches in the source table (repeated values) collapse to
    their mean rank so the map stays a well-defined function.
    """
    n = src_q.size
    levels = np.linspace(0.0, 1.0, n)
    uniq, start = np.unique(src_q, return_index=True)
    counts = np.diff(np.append(start, n))
    # mean of the consecutive rank block belonging to each unique value
    mean_rank = (levels[start] + levels[start + counts - 1]) / 2.0
    ranks = np.interp(values, uniq, mean_rank)
    return np.interp(ranks, levels, ref_q)


def adapt(case: MultimodalCase,
          ref: ReferenceDistribution) -> tuple[MultimodalCase, AdaptationReport]:
    """Match each modality's brain-intensity distribution to the reference.

    Background voxels pass through bit-identical.  A modality with zero
    intensity spread maps through identity and is flagged in the report.
    """
    mask = brain_mask(case.seg)
    if not np.any(mask):
        raise DataError(f"case {case.id!r} has an empty brain mask")
    n_q = next(iter(ref.quantiles.values())).size
    levels = np.linspace(0.0, 1.0, n_q)

    out_vols = {}
    w_before = {}
    w_after = {}
    degenerate = []
    for m in MODALITIES:
        vals = case.modality(m).values
        src = vals[mask].astype(np.float64)
        src_q = np.quantile(src, levels)
        ref_q = ref.quantiles[m]
        if src_q[-1] <= src_q[0]:
            degenerate.append(m)
            mapped = src
        else:
            mapped = _quantile_map(src, src_q, ref_q)

        lo = float(min(src.min(), mapped.min(), ref_q[0]))
        hi = float(max(src.max(), mapped.max(), ref_q[-1]))
        if hi <= lo:
            hi = lo + 1.0
        h_ref = _histogram(ref_q, lo, hi, REPORT_BINS)
        w_before[m] = wasserstein1(_histogram(src, lo, hi, REPORT_BINS), h_ref)
        w_after[m] = wasserstein1(_histogram(mapped, lo, hi, REPORT_BINS), h_ref)

        new_vals = vals.astype(np.float32).copy()
        new_vals[mask] = mapped.astype(np.float32)
        out_vols[m] = ScalarVolume(case.geometry, new_vals)

    report = AdaptationReport(
        wasserstein1_before=w_before,
        wasserstein1_after=w_after,
        degenerate_modalities=tuple(degenerate),
    )
    meta = dict(case.meta)
    meta["adaptation"] = report.to_dict()
    adapted = MultimodalCase(id=case.id, seg=case.seg, meta=meta, **out_vols)
    return adapted, report
