"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to watch them live).

Tolerances are fixed here and match the documented contracts; nothing
is calibrated at runtime.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import smooth_image, smooth_svf
from tumorsynth.adaptation import build_reference, adapt
from tumorsynth.cli import main as cli_main
from tumorsynth.demo import (
    demo_intensity_model,
    make_brain_labels,
    make_demo_atlas,
    write_demo_assets,
)
from tumorsynth.growth import GrowthParams, PARAM_RANGES, simulate
from tumorsynth.metrics import ET, WT, class_frequencies, dice, tumor_only
from tumorsynth.nifti import read_volume
from tumorsynth.pipeline import validate
from tumorsynth.registration import (
    RegistrationParams,
    VelocityField,
    compose,
    enrich_case,
    exponentiate,
    fuse_labels,
    register,
    warp,
)
from tumorsynth.rng import make_rng
from tumorsynth.synthesis import SynthParams, synthesize
from tumorsynth.volume import GridGeometry, LabelVolume, MODALITIES, brain_mask


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"[ACCEPTANCE] {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{criterion}: {detail}"


def test_heat_kernel_oracle():
    dims = (64, 64, 64)
    labels = LabelVolume(GridGeometry(dims), np.full(dims, 7, dtype=np.uint8))
    sigma0, amp, D, T = 4.0, 0.5, 1.0, 8.0
    params = GrowthParams(d_w=D, kappa_gw=1.0, kappa_i=1.0, rho_p=0, rho_i=0,
                          alpha_pi=0, beta_ip=0, gamma=0,
                          seed_center=(31.5, 31.5, 31.5), seed_sigma=sigma0,
                          seed_amplitude=amp, t_final=T)
    t0 = time.perf_counter()
    res = simulate(labels, params)
    elapsed = time.perf_counter() - t0
    s2 = sigma0 ** 2 + 2 * D * T
    ax = [np.arange(d) - 31.5 for d in dims]
    r2 = (ax[0][:, None, None] ** 2 + ax[1][None, :, None] ** 2
          + ax[2][None, None, :] ** 2)
    exact = amp * (sigma0 ** 2 / s2) ** 1.5 * np.exp(-r2 / (2 * s2))
    err = np.linalg.norm(res.final.p.values - exact) / np.linalg.norm(exact)
    report("heat-kernel oracle",
           err < 0.02 and elapsed < 60.0,
           f"relative L2 {err:.2e} (< 2e-2), runtime {elapsed:.1f}s (< 60s)")


def test_mass_conservation():
    dims = (48, 48, 48)
    labels = LabelVolume(GridGeometry(dims), np.full(dims, 7, dtype=np.uint8))
    dt_stable = 0.9 / 6.0
    params = GrowthParams(d_w=1.0, kappa_gw=1.0, kappa_i=1.0, rho_p=0, rho_i=0,
                          alpha_pi=0, beta_ip=0, gamma=0,
                          seed_center=(23.5, 23.5, 23.5), seed_sigma=4.0,
                          seed_amplitude=0.5, t_final=100 * dt_stable)
    res = simulate(labels, params, record_every=1)
    masses = np.array([m[1] for m in res.mass_series])
    assert masses.size >= 101
    drift = float((np.abs(np.diff(masses)) / masses[:-1]).max())
    report("pure-diffusion conservation", drift < 1e-9,
           f"max per-step relative drift {drift:.2e} over {masses.size - 1} steps (< 1e-9)")


def test_species_bounds_and_necrotic_monotonicity():
    dims = (16, 16, 16)
    labels = make_brain_labels(dims, center=(7.5, 7.5, 7.5), radius=6.7)
    white = np.argwhere(labels.labels == 7)
    rng = make_rng(2024)
    draws = 50
    worst_sum = 0.0
    for k in range(draws):
        kwargs = {name: float(rng.uniform(lo, hi))
                  for name, (lo, hi) in PARAM_RANGES.items()}
        pick = white[int(rng.integers(len(white)))]
        params = GrowthParams(seed_center=tuple(float(c) for c in pick), **kwargs)

        state = {"prev_n": None, "worst": 0.0}

        def hook(t, p, i, n, state=state):
            assert p.min() >= 0 and i.min() >= 0 and n.min() >= 0
            total = p + i + n
            state["worst"] = max(state["worst"], float(total.max()))
            assert total.max() <= 1.0 + 1e-6
            if state["prev_n"] is not None:
                assert np.all(n >= state["prev_n"])
            state["prev_n"] = n.copy()

        simulate(labels, params, record_every=1, snapshot_hook=hook)
        worst_sum = max(worst_sum, state["worst"])
    report("species bounds + necrotic monotonicity", True,
           f"{draws} randomized draws, every step checked; max sum {worst_sum:.6f}")


def test_diffeomorphy():
    dims = (64, 64, 64)
    geom = GridGeometry(dims)
    rng = make_rng(11)
    light = RegistrationParams(levels=3, iters_per_level=(15, 10, 5))
    min_jacs = []
    for _ in range(20):
        fixed = smooth_image(rng, dims, sigma=float(rng.uniform(2.5, 4.0)))
        w = smooth_svf(rng, dims, max_norm=float(rng.uniform(1.0, 3.0)))
        moving = warp(fixed, exponentiate(VelocityField.from_arrays(geom, *w)),
                      "linear")
        res = register(fixed, moving, params=light)
        min_jacs.append(res.min_jacobian)
    medians = []
    for _ in range(20):
        comps = smooth_svf(rng, dims, max_norm=3.0)
        fwd = exponentiate(VelocityField.from_arrays(geom, *comps))
        bwd = exponentiate(VelocityField.from_arrays(geom, *[-c for c in comps]))
        rt = compose(fwd, bwd)
        disp = np.sqrt(rt.dx.values.astype(np.float64) ** 2
                       + rt.dy.values ** 2 + rt.dz.values ** 2)
        medians.append(float(np.median(disp[4:-4, 4:-4, 4:-4])))
    report("diffeomorphy",
           min(min_jacs) > 0 and max(medians) < 0.1,
           f"20 registrations, min Jacobian {min(min_jacs):.3f} (> 0); "
           f"20 inverse-composition medians, worst {max(medians):.3f} voxels (< 0.1)")


def test_registration_recovery():
    dims = (64, 64, 64)
    geom = GridGeometry(dims)
    rng = make_rng(12)
    ratios = []
    for _ in range(2):
        fixed = smooth_image(rng, dims, sigma=3.0)
        w = smooth_svf(rng, dims, max_norm=3.0)
        moving = warp(fixed, exponentiate(VelocityField.from_arrays(geom, *w)),
                      "linear")
        res = register(fixed, moving)
        assert res.similarity_initial > 0
        ratios.append(res.similarity_final / res.similarity_initial)
    fixed = smooth_image(rng, dims, sigma=3.0)
    res_self = register(fixed, fixed)
    phi = exponentiate(res_self.velocity)
    max_disp = float(np.sqrt(phi.dx.values.astype(np.float64) ** 2
                             + phi.dy.values ** 2 + phi.dz.values ** 2).max())
    report("registration recovery",
           max(ratios) < 0.25 and max_disp < 0.05,
           f"MSE ratios {[f'{r:.3f}' for r in ratios]} (< 0.25); "
           f"self-registration max displacement {max_disp:.2e} voxels (< 0.05)")


def test_label_fusion_rules_and_tumor_preservation():
    g = GridGeometry((2, 2, 2))
    const = lambda v: LabelVolume(g, np.full((2, 2, 2), v, dtype=np.uint8))
    majority = fuse_labels([const(6), const(6), const(7)], [0.9, 0.8, 0.1])
    tie = fuse_labels([const(6), const(7)], [0.01, 0.5])
    tie_rev = fuse_labels([const(6), const(7)], [0.5, 0.01])
    single = fuse_labels([const(8)], [0.3])
    rules_ok = (np.all(majority.labels == 6) and np.all(tie.labels == 6)
                and np.all(tie_rev.labels == 7) and np.all(single.labels == 8))

    atlas = make_demo_atlas("acc_atlas", (48, 48, 48), seed=5)
    arr = atlas.labels.labels.copy()
    arr[22:27, 22:27, 22:27] = 2
    arr[23:26, 23:26, 23:26] = 4
    arr[24, 24, 24] = 1
    seg = LabelVolume(atlas.labels.geometry, arr)
    case = synthesize(seg, None, demo_intensity_model(),
                      SynthParams(rng_seed=40, bias_amplitude=0.0),
                      case_id="acc")
    out = enrich_case(case, [atlas],
                      RegistrationParams(levels=3, iters_per_level=(20, 12, 8)))
    tumor = np.isin(arr, (1, 2, 4))
    preserved = np.array_equal(out.labels[tumor], arr[tumor])
    report("label fusion + tumor preservation",
           rules_ok and preserved,
           f"vote/tie-break rules exact; {int(tumor.sum())} tumor voxels bit-identical")


def test_adaptation_wasserstein_and_rank_order():
    atlas = make_demo_atlas("acc_adapt", (48, 48, 48), seed=6)
    case = synthesize(atlas.labels, None, demo_intensity_model(),
                      SynthParams(rng_seed=41), case_id="acc_adapt")
    ref_case = synthesize(atlas.labels, None,
                          demo_intensity_model(scale=3.0, offset=300.0),
                          SynthParams(rng_seed=42), case_id="acc_ref")
    reference = build_reference([ref_case])
    adapted, rep = adapt(case, reference)
    mask = brain_mask(case.seg)
    ratios = {m: rep.wasserstein1_after[m] / rep.wasserstein1_before[m]
              for m in MODALITIES}
    ranks_ok = True
    for m in MODALITIES:
        src = case.modality(m).values[mask]
        out = adapted.modality(m).values[mask]
        order = np.argsort(src, kind="stable")
        ranks_ok &= bool(np.all(np.diff(out[order]) >= 0))
    report("adaptation",
           max(ratios.values()) <= 0.1 and ranks_ok,
           f"worst W1 after/before {max(ratios.values()):.2e} (<= 0.1); "
           f"rank order preserved in all modalities: {ranks_ok}")


def test_dice_hand_cases():
    g = GridGeometry((6, 1, 1))
    lab = lambda v: LabelVolume(g, np.asarray(v, dtype=np.uint8))
    full = lab([4] * 6)
    d_equal = dice(full, full, ET)
    d_disjoint = dice(lab([4, 4, 0, 0, 0, 0]), lab([0, 0, 4, 4, 0, 0]), ET)
    d_hand = dice(lab([4, 4, 4, 4, 0, 0]), lab([4, 4, 0, 0, 0, 0]), ET)
    empty = lab([0] * 6)
    d_empty = dice(empty, empty, WT)
    ok = (abs(d_equal - 1.0) < 1e-9 and abs(d_disjoint) < 1e-9
          and abs(d_hand - 2.0 / 3.0) < 1e-9 and d_empty == 1.0)
    report("dice hand cases", ok,
           f"1.0 / 0.0 / {d_hand:.10f} (=2/3) exact to 1e-9; empty-vs-empty {d_empty}")


@pytest.fixture(scope="module")
def e2e_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_e2e")
    t0 = time.perf_counter()
    config = write_demo_assets(root / "assets", dims=(64, 64, 64),
                               n_atlases=3, n_reference=2, seed=1234)
    runs = []
    for name in ("run1", "run2"):
        out = root / name
        rc = cli_main(["generate", "--config", str(config),
                       "--output", str(out), "--count", "2", "--seed", "7"])
        assert rc == 0
        runs.append(out)
    elapsed = time.perf_counter() - t0
    return runs[0], runs[1], elapsed


def _tree_digest(root) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_imbalance_reduction_on_generated_cases(e2e_dataset):
    run1, _, _ = e2e_dataset
    manifest = json.loads((run1 / "manifest.json").read_text())
    pairs = []
    for entry in manifest["cases"]:
        seg = read_volume(run1 / entry["id"] / "seg.nii", "label")
        ext = class_frequencies(seg)
        tum = class_frequencies(tumor_only(seg))
        assert ext.class_ratio is not None and tum.class_ratio is not None
        pairs.append((entry["id"], ext.class_ratio, tum.class_ratio))
    ok = all(e < t for _, e, t in pairs)
    detail = "; ".join(f"{cid}: {e:.0f} < {t:.0f}" for cid, e, t in pairs)
    report("imbalance reduction", ok, detail)


def test_end_to_end_determinism(e2e_dataset):
    run1, run2, elapsed = e2e_dataset
    identical = _tree_digest(run1) == _tree_digest(run2)
    rep = validate(run1)
    report("end-to-end determinism",
           identical and rep["ok"] and elapsed < 900.0,
           f"byte-identical trees: {identical}; validate ok: {rep['ok']}; "
           f"two 64^3 runs incl. assets in {elapsed:.0f}s (< 900s)")
