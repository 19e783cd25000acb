import json

import numpy as np
import pytest

from tumorsynth.cli import main
from tumorsynth.demo import demo_intensity_model, make_demo_atlas
from tumorsynth.nifti import read_case, read_volume, write_volume
from tumorsynth.synthesis import SynthParams, synthesize
from tumorsynth.volume import GridGeometry, LabelVolume


@pytest.fixture(scope="module")
def atlas_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_atlas")
    atlas = make_demo_atlas("atlas_00", (32, 32, 32), seed=3)
    sub = root / "atlas_00"
    sub.mkdir()
    write_volume(atlas.t1, sub / "t1.nii")
    write_volume(atlas.labels, sub / "labels.nii")
    model_path = root / "intensity_model.json"
    demo_intensity_model().to_json(model_path)
    return {"atlas_dir": root, "labels": sub / "labels.nii",
            "t1": sub / "t1.nii", "model": model_path}


def test_simulate_writes_outputs(atlas_files, tmp_path):
    cfg = tmp_path / "growth.json"
    cfg.write_text(json.dumps({"t_final": 10.0, "seed_center": [16, 16, 20]}))
    rc = main(["simulate", "--labels", str(atlas_files["labels"]),
               "--config", str(cfg), "--output", str(tmp_path / "out")])
    assert rc == 0
    out = tmp_path / "out"
    for name in ("p.nii", "i.nii", "n.nii", "tumor_labels.nii",
                 "mass_series.csv", "mass_series.png"):
        assert (out / name).exists(), name
    header = (out / "mass_series.csv").read_text().splitlines()[0]
    assert header == "t,mass_p,mass_i,mass_n"


def test_register_and_report(atlas_files, tmp_path):
    rc = main(["register", "--fixed", str(atlas_files["t1"]),
               "--moving", str(atlas_files["t1"]),
               "--iters", "5,5", "--output", str(tmp_path / "reg")])
    assert rc == 0
    report = json.loads((tmp_path / "reg" / "report.json").read_text())
    assert report["similarity_final"] <= report["similarity_initial"]
    assert (tmp_path / "reg" / "warped.nii").exists()
    assert (tmp_path / "reg" / "velocity_x.nii").exists()


def test_synthesize_then_adapt_and_stats(atlas_files, tmp_path):
    rc = main(["synthesize", "--labels", str(atlas_files["labels"]),
               "--model", str(atlas_files["model"]), "--id", "demo",
               "--seed", "4", "--output", str(tmp_path)])
    assert rc == 0
    case_dir = tmp_path / "demo"
    assert read_case(case_dir).id == "demo"

    # reference built from the same case, via the library
    from tumorsynth.adaptation import build_reference
    ref = build_reference([read_case(case_dir)])
    ref_path = tmp_path / "ref.json"
    ref.to_json(ref_path)
    rc = main(["adapt", "--case", str(case_dir), "--reference", str(ref_path),
               "--output", str(tmp_path / "adapted")])
    assert rc == 0
    assert (tmp_path / "adapted" / "demo" / "meta.json").exists()
    assert (tmp_path / "adapted" / "demo_histograms.png").exists()

    rc = main(["stats", "--case", str(tmp_path / "adapted" / "demo"),
               "--output", str(tmp_path / "stats")])
    assert rc == 0
    stats = json.loads((tmp_path / "stats" / "class_stats.json").read_text())
    assert "counts" in stats
    assert (tmp_path / "stats" / "class_counts.png").exists()
    assert (tmp_path / "stats" / "intensity_histograms.png").exists()


def test_enrich_labels_cli(atlas_files, tmp_path):
    # build a case with a small tumor from the atlas anatomy
    labels = read_volume(atlas_files["labels"], "label")
    arr = labels.labels.copy()
    arr[14:18, 14:18, 14:18] = 4
    seg = LabelVolume(labels.geometry, arr)
    case = synthesize(seg, None, demo_intensity_model(),
                      SynthParams(rng_seed=8, bias_amplitude=0.0),
                      case_id="tumor")
    from tumorsynth.nifti import write_case
    write_case(case, tmp_path / "tumor")
    rc = main(["enrich-labels", "--case", str(tmp_path / "tumor"),
               "--atlas-dir", str(atlas_files["atlas_dir"]),
               "--iters", "8,6", "--output", str(tmp_path / "enriched")])
    assert rc == 0
    out = read_volume(tmp_path / "enriched" / "seg_extended.nii", "label")
    tumor_mask = arr == 4
    assert np.all(out.labels[tumor_mask] == 4)
    report = json.loads((tmp_path / "enriched" / "fusion_report.json").read_text())
    assert report["atlases"][0]["status"] == "ok"


def test_generate_validate_dice_roundtrip(demo_assets32, tmp_path, capsys):
    rc = main(["generate", "--config", str(demo_assets32),
               "--output", str(tmp_path / "ds"), "--count", "1", "--seed", "3"])
    assert rc == 0
    rc = main(["validate", str(tmp_path / "ds")])
    assert rc == 0
    seg = tmp_path / "ds" / "case_0000" / "seg.nii"
    capsys.readouterr()
    rc = main(["dice", "--pred", str(seg), "--truth", str(seg)])
    assert rc == 0
    scores = json.loads(capsys.readouterr().out)
    assert scores == {"ET": 1.0, "WT": 1.0, "TC": 1.0}


def test_validate_fails_on_damage(demo_assets32, tmp_path):
    main(["generate", "--config", str(demo_assets32),
          "--output", str(tmp_path / "ds"), "--count", "1", "--seed", "3"])
    victim = tmp_path / "ds" / "case_0000" / "flair.nii"
    victim.write_bytes(victim.read_bytes()[:-4])
    assert main(["validate", str(tmp_path / "ds")]) == 2


def test_exit_codes(tmp_path):
    # usage error -> 1
    with pytest.raises(SystemExit) as ei:
        main(["simulate"])  # missing required --labels
    assert ei.value.code == 1
    # config error -> 1
    assert main(["generate", "--config", str(tmp_path / "absent.json")]) == 1
    # data error -> 2
    bogus = tmp_path / "bogus.nii"
    bogus.write_bytes(b"\x00" * 400)
    assert main(["simulate", "--labels", str(bogus),
                 "--output", str(tmp_path / "o")]) == 2


def test_dice_per_class(tmp_path, capsys):
    g = GridGeometry((4, 1, 1))
    a = LabelVolume(g, np.array([0, 2, 4, 7], dtype=np.uint8))
    write_volume(a, tmp_path / "a.nii")
    capsys.readouterr()
    rc = main(["dice", "--pred", str(tmp_path / "a.nii"),
               "--truth", str(tmp_path / "a.nii"), "--per-class"])
    assert rc == 0
    scores = json.loads(capsys.readouterr().out)
    assert scores["label-7"] == 1.0 and scores["ET"] == 1.0
