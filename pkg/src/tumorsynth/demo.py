"""Self-contained demo assets: spherical-shell atlas brains, a plausible
intensity model, and a shifted-range reference corpus standing in for
real scanner data.

Run `python -m tumorsynth.demo OUTDIR` to materialize everything the
`generate` subcommand needs for an end-to-end run.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .adaptation import build_reference
from .nifti import write_case, write_json, write_volume
from .registration import Atlas
from .rng import make_rng, mix_seed
from .synthesis import IntensityModel, SynthParams, synthesize
from .volume import GridGeometry, LabelVolume

# Per-tissue intensity means/stds in arbitrary units, qualitatively
# following the usual contrast patterns (CSF dark on T1 and FLAIR,
# bright on T2; enhancing tumor bright on T1ce; edema bright on FLAIR).
_DEMO_TABLE = {
    ("t1", 1): (45, 8), ("t1", 2): (85, 8), ("t1", 4): (110, 9),
    ("t1", 5): (55, 6), ("t1", 6): (95, 6), ("t1", 7): (125, 7), ("t1", 8): (105, 6),
    ("t1ce", 1): (40, 8), ("t1ce", 2): (90, 8), ("t1ce", 4): (200, 12),
    ("t1ce", 5): (55, 6), ("t1ce", 6): (95, 6), ("t1ce", 7): (125, 7), ("t1ce", 8): (105, 6),
    ("t2", 1): (130, 10), ("t2", 2): (165, 10), ("t2", 4): (115, 9),
    ("t2", 5): (190, 8), ("t2", 6): (105, 6), ("t2", 7): (75, 6), ("t2", 8): (95, 6),
    ("flair", 1): (100, 9), ("flair", 2): (175, 10), ("flair", 4): (125, 9),
    ("flair", 5): (35, 6), ("flair", 6): (115, 6), ("flair", 7): (85, 6), ("flair", 8): (100, 6),
}

# Fraction of the brain radius taken by each concentric tissue zone.
_R_VENTRICLE = 0.15
_R_GLIAL = 0.50
_R_WHITE = 0.80
_R_GRAY = 0.92


def demo_intensity_model(scale: float = 1.0, offset: float = 0.0) -> IntensityModel:
    table = {(lab, mod): (mu * scale + offset, sd * scale)
             for (mod, lab), (mu, sd) in _DEMO_TABLE.items()}
    return IntensityModel(table)


def make_brain_labels(dims, center, radius, axis_scales=(1.0, 1.0, 1.0),
                      spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    """Concentric-shell brain anatomy: ventricle and outer CSF, a glial
    band, white matter, and a cortical gray shell."""
    geom = GridGeometry(tuple(dims), tuple(spacing))
    ax = [(np.arange(dims[a], dtype=np.float64) - center[a]) * axis_scales[a]
          for a in range(3)]
    r = np.sqrt(ax[0][:, None, None] ** 2 + ax[1][None, :, None] ** 2
                + ax[2][None, None, :] ** 2)
    labels = np.zeros(dims, dtype=np.uint8)
    labels[r < radius] = 5                       # CSF rim (overwritten inward)
    labels[r < _R_GRAY * radius] = 6             # cortical gray
    labels[r < _R_WHITE * radius] = 7            # white matter
    labels[r < _R_GLIAL * radius] = 8            # glial band
    labels[r < _R_VENTRICLE * radius] = 5        # ventricle
    return LabelVolume(geom, labels)


def make_demo_atlas(atlas_id: str, dims=(64, 64, 64), seed: int = 0) -> Atlas:
    """One spherical atlas with mild per-id shape jitter and a rendered T1."""
    rng = make_rng(seed)
    center = [(d - 1) / 2.0 + float(rng.uniform(-1.5, 1.5)) for d in dims]
    radius = 0.42 * min(dims) * float(rng.uniform(0.95, 1.05))
    axis_scales = tuple(float(rng.uniform(0.95, 1.05)) for _ in range(3))
    labels = make_brain_labels(dims, center, radius, axis_scales)
    model = demo_intensity_model()
    synth = SynthParams(pv_sigma=0.7, noise_std_frac=0.1, bias_amplitude=0.05,
                        bias_sigma=12.0, rng_seed=mix_seed(seed, 99))
    rendered = synthesize(labels, None, model, synth, case_id=atlas_id)
    return Atlas(id=atlas_id, t1=rendered.t1, labels=labels)


def make_reference_case(case_id: str, dims=(64, 64, 64), seed: int = 0):
    """A healthy case in a shifted intensity range, emulating real
    scanner units disjoint from the raw synthetic range."""
    atlas = make_demo_atlas(case_id, dims, seed)
    model = demo_intensity_model(scale=3.0, offset=300.0)
    synth = SynthParams(pv_sigma=0.7, noise_std_frac=0.3, bias_amplitude=0.1,
                        bias_sigma=12.0, rng_seed=mix_seed(seed, 7))
    return synthesize(atlas.labels, None, model, synth, case_id=case_id)


# Moderate growth ranges for the demo config: tumors reach roughly a
# tenth of the brain volume, keep all three tumor classes visible, and
# leave the stable time step large enough for quick end-to-end runs.
DEMO_GROWTH_RANGES = {
    "d_w": [0.06, 0.12],
    "kappa_gw": [0.1, 0.5],
    "kappa_i": [2.0, 3.0],
    "rho_p": [0.1, 0.16],
    "rho_i": [0.02, 0.05],
    "alpha_pi": [0.01, 0.04],
    "beta_ip": [0.0, 0.015],
    "gamma": [0.04, 0.08],
    "c_h": [0.7, 0.9],
    "sigma_h": [0.03, 0.1],
    "seed_sigma": [2.5, 4.0],
    "seed_amplitude": [0.55, 0.8],
    "t_final": [35.0, 55.0],
    "tau_p": [0.32, 0.42],
    "tau_i": [0.015, 0.03],
    "tau_n": [0.35, 0.5],
}


def demo_growth_ranges(dims=(64, 64, 64)) -> dict:
    """DEMO_GROWTH_RANGES with the horizon scaled to the brain size, so
    tumors occupy a similar brain fraction at any grid extent."""
    scale = min(dims) / 64.0
    ranges = {k: list(v) for k, v in DEMO_GROWTH_RANGES.items()}
    ranges["t_final"] = [max(5.0, v * scale) for v in ranges["t_final"]]
    if scale < 1.0:
        ranges["seed_sigma"] = [max(1.5, v * scale) for v in ranges["seed_sigma"]]
    return ranges


def write_demo_assets(out_dir, dims=(64, 64, 64), n_atlases: int = 3,
                      n_reference: int = 2, seed: int = 1234) -> Path:
    """Materialize atlases, the intensity model, a reference corpus and
    its quantile tables, plus a ready-to-run generate config."""
    out_dir = Path(out_dir)
    atlas_dir = out_dir / "atlases"
    for k in range(n_atlases):
        atlas = make_demo_atlas(f"atlas_{k:02d}", dims, seed=mix_seed(seed, k))
        sub = atlas_dir / atlas.id
        sub.mkdir(parents=True, exist_ok=True)
        write_volume(atlas.t1, sub / "t1.nii")
        write_volume(atlas.labels, sub / "labels.nii")

    ref_dir = out_dir / "reference"
    ref_cases = []
    for k in range(n_reference):
        case = make_reference_case(f"ref_{k:02d}", dims,
                                   seed=mix_seed(seed, 1000 + k))
        write_case(case, ref_dir / case.id)
        ref_cases.append(case)

    model = demo_intensity_model()
    model.to_json(out_dir / "intensity_model.json")
    reference = build_reference(ref_cases)
    reference.to_json(out_dir / "reference_dist.json")

    config = {
        "atlas_dir": str(atlas_dir),
        "intensity_model": str(out_dir / "intensity_model.json"),
        "reference_distribution": str(out_dir / "reference_dist.json"),
        "output_dir": str(out_dir / "dataset"),
        "count": 2,
        "seed": 7,
        "growth_ranges": demo_growth_ranges(dims),
        "synthesis": {"pv_sigma": 0.7, "noise_std_frac": 0.4,
                      "bias_amplitude": 0.15, "bias_sigma": 12.0},
    }
    config_path = out_dir / "config.json"
    write_json(config, config_path)
    return config_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", help="directory to populate")
    parser.add_argument("--dims", type=int, default=64,
                        help="cubic grid extent (default 64)")
    parser.add_argument("--atlases", type=int, default=3)
    parser.add_argument("--reference-cases", type=int, default=2)
    parser.add_argument("--seed", type=int, default=1234)
    args = parser.parse_args(argv)
    path = write_demo_assets(args.out_dir, dims=(args.dims,) * 3,
                             n_atlases=args.atlases,
                             n_reference=args.reference_cases, seed=args.seed)
    print(f"demo assets ready; generate with: tumorsynth generate --config {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
