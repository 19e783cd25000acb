"""Figure rendering for the reporting subcommands.

Every report path that emits delimited/JSON output also drops a PNG
next to it; all rendering goes through the Agg backend so the CLI works
headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .volume import MODALITIES, brain_mask

_SPECIES_STYLE = (
    ("proliferative", "tab:red"),
    ("infiltrative", "tab:orange"),
    ("necrotic", "tab:gray"),
)


def plot_mass_series(mass_series, path) -> None:
    """Species masses over time, one curve per species."""
    data = np.asarray(mass_series, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for k, (label, color) in enumerate(_SPECIES_STYLE):
        ax.plot(data[:, 0], data[:, k + 1], color=color, label=label)
    ax.plot(data[:, 0], data[:, 1:4].sum(axis=1), color="k",
            linestyle="--", linewidth=1, label="total")
    ax.set_xlabel("time (days)")
    ax.set_ylabel("mass (mm$^3$)")
    ax.legend(frameon=False)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_intensity_comparison(cases: dict, path, reference=None,
                              bins: int = 128) -> None:
    """Brain-intensity histograms per modality for a set of named cases
    (e.g. raw vs adapted), optionally with the reference overlaid."""
    fig, axes = plt.subplots(1, len(MODALITIES), figsize=(3.2 * len(MODALITIES), 3.0),
                             sharey=True)
    for ax, m in zip(np.atleast_1d(axes), MODALITIES):
        for name, case in cases.items():
            vals = case.modality(m).values[brain_mask(case.seg)]
            ax.hist(vals, bins=bins, density=True, histtype="step", label=name)
        if reference is not None:
            ax.hist(reference.quantiles[m], bins=bins, density=True,
                    histtype="step", linestyle="--", color="k", label="reference")
        ax.set_title(m)
        ax.set_xlabel("intensity")
    np.atleast_1d(axes)[0].set_ylabel("density")
    np.atleast_1d(axes)[0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_class_counts(counts: dict, path) -> None:
    """Bar chart of voxel counts per label, log scale."""
    labels = [k for k, v in sorted(counts.items()) if v > 0]
    values = [counts[k] for k in labels]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.bar([str(l) for l in labels], values, color="tab:blue")
    ax.set_yscale("log")
    ax.set_xlabel("label")
    ax.set_ylabel("voxels")
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
