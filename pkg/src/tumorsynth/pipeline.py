"""End-to-end dataset generation and validation.

`generate` runs simulate -> implant -> synthesize -> adapt per case,
seeding every stage from (master seed, case index) so a dataset is a
pure function of its configuration.  `validate` re-reads an emitted
dataset and re-checks the schema, geometry, label, and checksum
contracts.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import ReferenceDistribution, adapt, build_reference
from .errors import ConfigError, DataError
from .growth import GrowthParams, PARAM_RANGES, simulate
from .nifti import read_case, read_volume, write_case, write_json, write_volume
from .registration import Atlas
from .rng import RNG_ALGORITHM, make_rng, mix_seed
from .synthesis import IntensityModel, SynthParams, estimate_intensity_model, synthesize
from .volume import LabelVolume, MODALITIES, MultimodalCase

log = logging.getLogger(__name__)

MANIFEST_REVISION = 1
RAW_SUBDIR = "raw"


@dataclass(frozen=True)
class PipelineConfig:
    atlas_dir: str
    output_dir: str
    count: int = 1
    seed: int = 0
    jobs: int = 1
    reference_distribution: str | None = None   # prebuilt reference_dist.json
    reference_corpus: str | None = None         # or a directory of cases
    intensity_model: str | None = None          # prebuilt intensity_model.json
    intensity_corpus: str | None = None         # or a directory of cases
    growth_ranges: dict = field(default_factory=dict)
    synthesis: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not self.reference_distribution and not self.reference_corpus:
            raise ConfigError("config needs reference_distribution or reference_corpus")
        if not self.intensity_model and not self.intensity_corpus:
            raise ConfigError("config needs intensity_model or intensity_corpus")
        if "rng_seed" in self.synthesis:
            raise ConfigError("synthesis.rng_seed is derived per case; remove it")
        ranges = dict(self.growth_ranges)
        for name, rng in ranges.items():
            if name not in PARAM_RANGES:
                raise ConfigError(f"unknown growth range {name!r}")
            lo, hi = float(rng[0]), float(rng[1])
            if lo > hi:
                raise ConfigError(f"growth range {name!r} has min > max")
            ranges[name] = (lo, hi)
        object.__setattr__(self, "growth_ranges", ranges)

    @classmethod
    def from_json(cls, path, **overrides) -> "PipelineConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        payload.update({k: v for k, v in overrides.items() if v is not None})
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    def effective_ranges(self) -> dict:
        ranges = dict(PARAM_RANGES)
        ranges.update(self.growth_ranges)
        return ranges


def load_atlases(atlas_dir) -> list[Atlas]:
    """Load every `<id>/t1.nii` + `<id>/labels.nii` pair under atlas_dir,
    sorted by id."""
    atlas_dir = Path(atlas_dir)
    if not atlas_dir.is_dir():
        raise DataError(f"atlas directory {atlas_dir} does not exist")
    atlases = []
    for sub in sorted(p for p in atlas_dir.iterdir() if p.is_dir()):
        t1_path = sub / "t1.nii"
        lab_path = sub / "labels.nii"
        if not t1_path.exists() or not lab_path.exists():
            continue
        atlases.append(Atlas(
            id=sub.name,
            t1=read_volume(t1_path, "scalar"),
            labels=read_volume(lab_path, "label"),
        ))
    if not atlases:
        raise DataError(f"no atlases found under {atlas_dir}")
    return atlases


def _load_corpus(corpus_dir) -> list[MultimodalCase]:
    corpus_dir = Path(corpus_dir)
    cases = []
    for sub in sorted(p for p in corpus_dir.iterdir() if p.is_dir()):
        if (sub / "seg.nii").exists():
            cases.append(read_case(sub))
    if not cases:
        raise DataError(f"no cases found under {corpus_dir}")
    return cases


def resolve_assets(config: PipelineConfig) -> tuple[list[Atlas], IntensityModel,
                                                    ReferenceDistribution]:
    atlases = load_atlases(config.atlas_dir)
    if config.intensity_model:
        model = IntensityModel.from_json(config.intensity_model)
    else:
        model = estimate_intensity_model(_load_corpus(config.intensity_corpus))
    if config.reference_distribution:
        reference = ReferenceDistribution.from_json(config.reference_distribution)
    else:
        reference = build_reference(_load_corpus(config.reference_corpus))
    return atlases, model, reference


def sample_growth_params(ranges: dict, atlas: Atlas,
                         rng: np.random.Generator) -> GrowthParams:
    """Uniform draw per range (sorted field order), then a white-matter
    seed voxel; falls back to any diffusive tissue when no white matter
    is labeled."""
    kwargs = {}
    for name in sorted(ranges):
        lo, hi = ranges[name]
        kwargs[name] = float(rng.uniform(lo, hi))
    labels = atlas.labels.labels
    candidates = np.argwhere(labels == 7)
    if candidates.size == 0:
        candidates = np.argwhere(np.isin(labels, (1, 2, 4, 6, 7, 8)))
    if candidates.size == 0:
        raise DataError(f"atlas {atlas.id!r} has no diffusive tissue to seed")
    pick = candidates[int(rng.integers(len(candidates)))]
    kwargs["seed_center"] = tuple(float(c) for c in pick)
    return GrowthParams(**kwargs)


def implant_tumor(atlas_labels: LabelVolume,
                  tumor_labels: LabelVolume) -> LabelVolume:
    """Merge tumor labels into the healthy atlas map; tumor wins."""
    merged = np.where(tumor_labels.labels != 0, tumor_labels.labels,
                      atlas_labels.labels)
    return LabelVolume(atlas_labels.geometry, merged)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _case_id(index: int) -> str:
    return f"case_{index:04d}"


def generate_case(config: PipelineConfig, atlases: list[Atlas],
                  model: IntensityModel, reference: ReferenceDistribution,
                  index: int) -> dict:
    """Produce one case directory and return its manifest entry."""
    case_seed = mix_seed(config.seed, index)
    rng = make_rng(case_seed)
    atlas = atlases[index % len(atlases)]
    params = sample_growth_params(config.effective_ranges(), atlas, rng)

    result = simulate(atlas.labels, params)
    extended = implant_tumor(atlas.labels, result.tumor_labels)

    synth_seed = mix_seed(case_seed, 1)
    synth = SynthParams(rng_seed=synth_seed, **config.synthesis)
    cid = _case_id(index)
    raw_case = synthesize(extended, result.final, model, synth, case_id=cid)
    adapted, report = adapt(raw_case, reference)

    meta = dict(adapted.meta)
    meta.update({
        "atlas": atlas.id,
        "case_seed": int(case_seed),
        "growth_params": params.to_dict(),
        "toolkit_version": __version__,
    })
    adapted = MultimodalCase(id=cid, seg=adapted.seg, meta=meta,
                             **{m: adapted.modality(m) for m in MODALITIES})

    case_dir = Path(config.output_dir) / cid
    write_case(adapted, case_dir)
    raw_dir = case_dir / RAW_SUBDIR
    raw_dir.mkdir(exist_ok=True)
    for m in MODALITIES:
        write_volume(raw_case.modality(m), raw_dir / f"{m}.nii")

    files = [f"{m}.nii" for m in MODALITIES] + ["seg.nii", "meta.json"]
    files += [f"{RAW_SUBDIR}/{m}.nii" for m in MODALITIES]
    checksums = {f: file_sha256(case_dir / f) for f in files}
    return {
        "id": cid,
        "atlas": atlas.id,
        "case_seed": int(case_seed),
        "growth_params": params.to_dict(),
        "adaptation": report.to_dict(),
        "checksums": checksums,
    }


def _worker(config: PipelineConfig, index: int) -> dict:
    # Per-process asset cache so parallel workers load atlases once.
    cache = _worker.__dict__.setdefault("cache", {})
    key = (config.atlas_dir, config.intensity_model, config.intensity_corpus,
           config.reference_distribution, config.reference_corpus)
    if key not in cache:
        cache[key] = resolve_assets(config)
    atlases, model, reference = cache[key]
    return generate_case(config, atlases, model, reference, index)


def generate(config: PipelineConfig) -> dict:
    """Generate the configured dataset; returns the manifest."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atlases, model, reference = resolve_assets(config)
    # Persist the resolved assets so the dataset is self-describing.
    model.to_json(out_dir / "intensity_model.json")
    reference.to_json(out_dir / "reference_dist.json")

    entries: list = [None] * config.count
    failures: list[dict] = []
    if config.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=config.jobs) as ex:
            futs = {ex.submit(_worker, config, k): k for k in range(config.count)}
            for fut in concurrent.futures.as_completed(futs):
                k = futs[fut]
                try:
                    entries[k] = fut.result()
                except Exception as exc:
                    log.error("case %d failed: %s", k, exc)
                    failures.append({"id": _case_id(k), "error": str(exc)})
    else:
        for k in range(config.count):
            try:
                entries[k] = generate_case(config, atlases, model, reference, k)
            except Exception as exc:
                log.error("case %d failed: %s", k, exc)
                failures.append({"id": _case_id(k), "error": str(exc)})

    entries = [e for e in entries if e is not None]
    if not entries:
        raise DataError("every case failed; no dataset produced")
    manifest = {
        "format_revision": MANIFEST_REVISION,
        "toolkit_version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "master_seed": int(config.seed),
        "count_requested": config.count,
        "cases": entries,
        "failures": sorted(failures, key=lambda f: f["id"]),
    }
    write_json(manifest, out_dir / "manifest.json")
    return manifest


def validate(dataset_dir) -> dict:
    """Re-check an emitted dataset: files, headers, geometry, labels,
    finiteness, and manifest checksums.  Returns a per-case report."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    report: dict = {"ok": True, "cases": {}, "errors": []}
    if not manifest_path.exists():
        report["ok"] = False
        report["errors"].append("manifest.json missing")
        return report
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        report["ok"] = False
        report["errors"].append(f"manifest.json unreadable: {exc}")
        return report

    listed = {entry["id"] for entry in manifest.get("cases", [])}
    on_disk = {p.name for p in dataset_dir.iterdir()
               if p.is_dir() and (p / "seg.nii").exists()}
    for orphan in sorted(on_disk - listed):
        report["ok"] = False
        report["errors"].append(f"case directory {orphan} missing from manifest")

    for entry in manifest.get("cases", []):
        cid = entry["id"]
        errors = []
        case_dir = dataset_dir / cid
        if not case_dir.is_dir():
            report["cases"][cid] = {"ok": False, "errors": ["case directory missing"]}
            report["ok"] = False
            continue
        geom = None
        for rel, digest in sorted(entry.get("checksums", {}).items()):
            path = case_dir / rel
            if not path.exists():
                errors.append(f"{rel}: file missing")
                continue
            if file_sha256(path) != digest:
                errors.append(f"{rel}: checksum mismatch")
                continue
            if rel.endswith("seg.nii"):
                kind = "label"
            elif rel.endswith(".nii"):
                kind = "scalar"
            else:
                continue
            try:
                vol = read_volume(path, kind)
            except DataError as exc:
                errors.append(f"{rel}: {exc}")
                continue
            if geom is None:
                geom = vol.geometry
            elif vol.geometry != geom:
                errors.append(f"{rel}: geometry differs from the case's first volume")
        extra = {str(p.relative_to(case_dir)) for p in case_dir.rglob("*")
                 if p.is_file()} - set(entry.get("checksums", {}))
        for name in sorted(extra):
            errors.append(f"{name}: file not covered by manifest checksums")
        ok = not errors
        report["cases"][cid] = {"ok": ok, "errors": errors}
        if not ok:
            report["ok"] = False
    return report
