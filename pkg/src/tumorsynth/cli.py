"""Command-line interface.

Subcommands: simulate, register, enrich-labels, synthesize, adapt,
generate, validate, dice, stats.  Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import ReferenceDistribution, adapt
from .errors import ConfigError, DataError, NumericalError
from .growth import GrowthParams, simulate
from .metrics import COMPOSITE_REGIONS, class_frequencies, dice, per_class_region
from .nifti import read_case, read_volume, write_case, write_json, write_volume
from .pipeline import PipelineConfig, generate, load_atlases, validate
from .registration import (
    RegistrationParams,
    enrich_case_with_report,
    exponentiate,
    register,
    warp,
)
from .synthesis import IntensityModel, SynthParams, synthesize
from .volume import MODALITIES

log = logging.getLogger("tumorsynth")


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, default=None, help="RNG master seed")
    common.add_argument("--jobs", type=int, default=None, help="parallel workers")
    common.add_argument("--output", help="output file or directory")
    return common


def _require(args, name: str):
    value = getattr(args, name.replace("-", "_"))
    if value is None:
        raise ConfigError(f"--{name} is required for this subcommand")
    return value


def _out_dir(args) -> Path:
    out = Path(_require(args, "output"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _read_mask(path) -> np.ndarray:
    return read_volume(path, "label").labels != 0


def cmd_simulate(args) -> int:
    labels = read_volume(_require(args, "labels"), "label")
    cfg = _load_json_config(args.config) if args.config else {}
    if "seed_center" not in cfg:
        cfg["seed_center"] = [(d - 1) / 2.0 for d in labels.geometry.dims]
    params = GrowthParams.from_dict(cfg)
    out = _out_dir(args)
    result = simulate(labels, params, record_every=args.record_every)

    for name in ("p", "i", "n"):
        write_volume(getattr(result.final, name), out / f"{name}.nii")
    write_volume(result.tumor_labels, out / "tumor_labels.nii")
    csv_path = out / "mass_series.csv"
    with open(csv_path, "w") as f:
        f.write("t,mass_p,mass_i,mass_n\n")
        for t, mp, mi, mn in result.mass_series:
            f.write(f"{t!r},{mp!r},{mi!r},{mn!r}\n")
    from .plots import plot_mass_series
    plot_mass_series(result.mass_series, out / "mass_series.png")
    log.info("simulation finished at t=%.1f days; outputs in %s",
             result.final.t, out)
    return 0


def _registration_params(args) -> RegistrationParams:
    kwargs = {}
    if args.levels is not None:
        kwargs["levels"] = args.levels
    if args.iters is not None:
        iters = tuple(int(x) for x in args.iters.split(","))
        kwargs["iters_per_level"] = iters
        kwargs.setdefault("levels", len(iters))
    if args.sigma_fluid is not None:
        kwargs["sigma_fluid"] = args.sigma_fluid
    if args.sigma_diff is not None:
        kwargs["sigma_diff"] = args.sigma_diff
    if args.max_step is not None:
        kwargs["max_step"] = args.max_step
    return RegistrationParams(**kwargs)


def cmd_register(args) -> int:
    fixed = read_volume(_require(args, "fixed"), "scalar")
    moving = read_volume(_require(args, "moving"), "scalar")
    exclude = _read_mask(args.exclude_mask) if args.exclude_mask else None
    support = _read_mask(args.support_mask) if args.support_mask else None
    params = _registration_params(args)
    out = _out_dir(args)

    result = register(fixed, moving, exclude, params, support)
    phi = exponentiate(result.velocity)
    warped = warp(moving, phi, interp="linear")
    write_volume(result.velocity.vx, out / "velocity_x.nii")
    write_volume(result.velocity.vy, out / "velocity_y.nii")
    write_volume(result.velocity.vz, out / "velocity_z.nii")
    write_volume(warped, out / "warped.nii")
    write_json({
        "similarity_initial": result.similarity_initial,
        "similarity_final": result.similarity_final,
        "min_jacobian": result.min_jacobian,
        "iterations_run": result.iterations_run,
        "max_velocity": result.velocity.max_magnitude,
    }, out / "report.json")
    log.info("registration MSE %.3g -> %.3g (min Jacobian %.3f)",
             result.similarity_initial, result.similarity_final,
             result.min_jacobian)
    return 0


def cmd_enrich_labels(args) -> int:
    case = read_case(_require(args, "case"))
    atlases = load_atlases(_require(args, "atlas_dir"))
    params = _registration_params(args)
    out = _out_dir(args)
    labels, reports = enrich_case_with_report(case, atlases, params)
    write_volume(labels, out / "seg_extended.nii")
    write_json({"case": case.id, "atlases": reports}, out / "fusion_report.json")
    log.info("enriched labels written to %s", out / "seg_extended.nii")
    return 0


def cmd_synthesize(args) -> int:
    labels = read_volume(_require(args, "labels"), "label")
    model = IntensityModel.from_json(_require(args, "model"))
    params = SynthParams(
        pv_sigma=args.pv_sigma, noise_std_frac=args.noise_std_frac,
        bias_amplitude=args.bias_amplitude, bias_sigma=args.bias_sigma,
        rng_seed=args.seed if args.seed is not None else 0,
    )
    case = synthesize(labels, None, model, params, case_id=args.id)
    out = _out_dir(args)
    write_case(case, out / case.id)
    log.info("synthesized case %s under %s", case.id, out)
    return 0


def cmd_adapt(args) -> int:
    case = read_case(_require(args, "case"))
    ref = ReferenceDistribution.from_json(_require(args, "reference"))
    adapted, report = adapt(case, ref)
    out = _out_dir(args)
    write_case(adapted, out / adapted.id)
    write_json(report.to_dict(), out / f"{adapted.id}_adaptation.json")
    from .plots import plot_intensity_comparison
    plot_intensity_comparison({"raw": case, "adapted": adapted},
                              out / f"{adapted.id}_histograms.png", reference=ref)
    log.info("adapted case %s; W1 before/after per modality: %s / %s",
             adapted.id, report.wasserstein1_before, report.wasserstein1_after)
    return 0


def cmd_generate(args) -> int:
    config = PipelineConfig.from_json(
        _require(args, "config"),
        count=args.count, seed=args.seed, jobs=args.jobs,
        output_dir=args.output,
    )
    manifest = generate(config)
    n_ok = len(manifest["cases"])
    n_fail = len(manifest["failures"])
    log.info("generated %d case(s), %d failure(s) under %s",
             n_ok, n_fail, config.output_dir)
    return 0


def cmd_validate(args) -> int:
    report = validate(_require(args, "dataset"))
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["ok"] else 2


def cmd_dice(args) -> int:
    pred = read_volume(_require(args, "pred"), "label")
    truth = read_volume(_require(args, "truth"), "label")
    regions = list(COMPOSITE_REGIONS)
    if args.per_class:
        present = sorted(set(np.unique(pred.labels)) | set(np.unique(truth.labels)))
        regions += [per_class_region(int(l)) for l in present if l != 0]
    scores = {r.name: dice(pred, truth, r) for r in regions}
    text = json.dumps(scores, indent=2, sort_keys=True)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
    return 0


def cmd_stats(args) -> int:
    if args.case:
        case_dir = Path(args.case)
        case = read_case(case_dir)
        seg = case.seg
    elif args.seg:
        case_dir = None
        case = None
        seg = read_volume(args.seg, "label")
    else:
        raise ConfigError("stats needs --case or --seg")
    report = class_frequencies(seg)
    payload = report.to_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.output:
        out = _out_dir(args)
        write_json(payload, out / "class_stats.json")
        from .plots import plot_class_counts, plot_intensity_comparison
        plot_class_counts(report.counts, out / "class_counts.png")
        if case is not None:
            cases = {"case": case}
            raw_dir = case_dir / "raw"
            if (raw_dir / "t1.nii").exists():
                from .volume import MultimodalCase
                raw_vols = {m: read_volume(raw_dir / f"{m}.nii", "scalar")
                            for m in MODALITIES}
                cases = {"raw": MultimodalCase(id=case.id + "-raw", seg=seg,
                                               **raw_vols),
                         "adapted": case}
            ref = (ReferenceDistribution.from_json(args.reference)
                   if args.reference else None)
            plot_intensity_comparison(cases, out / "intensity_histograms.png",
                                      reference=ref)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tumorsynth",
                     description="Synthetic brain-tumor MRI dataset toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    common = _common_flags()
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common],
                       help="run the growth model on a label volume")
    p.add_argument("--labels", required=True, help="atlas/tissue label .nii")
    p.add_argument("--record-every", type=int, default=10)
    p.set_defaults(func=cmd_simulate)

    def add_reg_flags(q):
        q.add_argument("--levels", type=int, default=None)
        q.add_argument("--iters", default=None,
                       help="comma-separated iterations per level, coarse to fine")
        q.add_argument("--sigma-fluid", type=float, default=None)
        q.add_argument("--sigma-diff", type=float, default=None)
        q.add_argument("--max-step", type=float, default=None)

    p = sub.add_parser("register", parents=[common],
                       help="register a moving volume onto a fixed one")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--exclude-mask", default=None,
                   help="label .nii; nonzero voxels are excluded from the force")
    p.add_argument("--support-mask", default=None,
                   help="label .nii; force support (e.g. brain mask)")
    add_reg_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("enrich-labels", parents=[common],
                       help="extend tumor labels with fused atlas tissue labels")
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--atlas-dir", required=True)
    add_reg_flags(p)
    p.set_defaults(func=cmd_enrich_labels)

    p = sub.add_parser("synthesize", parents=[common],
                       help="render modality volumes from an extended label map")
    p.add_argument("--labels", required=True)
    p.add_argument("--model", required=True, help="intensity_model.json")
    p.add_argument("--id", default="synthetic")
    p.add_argument("--pv-sigma", type=float, default=0.7)
    p.add_argument("--noise-std-frac", type=float, default=0.5)
    p.add_argument("--bias-amplitude", type=float, default=0.2)
    p.add_argument("--bias-sigma", type=float, default=16.0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("adapt", parents=[common],
                       help="match a case's intensities to a reference distribution")
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--reference", required=True, help="reference_dist.json")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("generate", parents=[common],
                       help="generate a labeled synthetic dataset")
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", parents=[common],
                       help="validate a generated dataset")
    p.add_argument("dataset", help="dataset directory")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("dice", parents=[common],
                       help="Dice scores over ET/WT/TC regions")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--per-class", action="store_true")
    p.set_defaults(func=cmd_dice)

    p = sub.add_parser("stats", parents=[common],
                       help="class-imbalance statistics and report figures")
    p.add_argument("--case", default=None, help="case directory")
    p.add_argument("--seg", default=None, help="label .nii")
    p.add_argument("--reference", default=None, help="reference_dist.json")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    except DataError as exc:
        log.error("%s", exc)
        return 2
    except NumericalError as exc:
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
