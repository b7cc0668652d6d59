import csv
import json

import numpy as np
import pytest

from radrep.cli import main
from radrep.features import FEATURE_ROSTER
from radrep.pipeline import (ManifestError, SchemaMismatch, analyze_run,
                             extract_run, load_manifest,
                             parse_config_from_name, plotdata_run,
                             validate_feature_csv)
from radrep.repeatability import InsufficientSubjects

from cohorts import build_cohort


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def test_manifest_missing_timepoint(tmp_path):
    manifest_path = build_cohort(tmp_path, n_subjects=1)
    doc = json.loads(manifest_path.read_text())
    doc["cohort"] = [e for e in doc["cohort"] if e["timepoint"] == 1]
    manifest_path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError):
        load_manifest(manifest_path)


def test_manifest_missing_file(tmp_path):
    manifest_path = build_cohort(tmp_path, n_subjects=1)
    doc = json.loads(manifest_path.read_text())
    doc["cohort"][0]["imagePath"] = "missing.nrrd"
    manifest_path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError):
        load_manifest(manifest_path)


def test_manifest_rejects_unknown_mode(tmp_path):
    manifest_path = build_cohort(tmp_path, n_subjects=1)
    doc = json.loads(manifest_path.read_text())
    doc["settings"]["normalizationModes"] = ["zscore"]
    manifest_path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError):
        load_manifest(manifest_path)


def test_manifest_default_filter_catalog(tmp_path):
    manifest_path = build_cohort(tmp_path, n_subjects=1)
    doc = json.loads(manifest_path.read_text())
    del doc["settings"]["filters"]
    doc["settings"]["dimensionality"] = "3D"
    manifest_path.write_text(json.dumps(doc))
    manifest = load_manifest(manifest_path)
    names = [f.name for f in manifest.settings.filters]
    assert names[0] == "original"
    assert "log-sigma-3-0-mm-3D" in names
    assert "wavelet-LLH" in names and "wavelet-HH" not in names
    assert names[-4:] == ["square", "squareroot", "logarithm", "exponential"]
    assert len(names) == 1 + 5 + 8 + 4


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

def test_smallest_run_layout(tmp_path):
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=1))
    csv_paths, failures = extract_run(manifest, tmp_path / "out")
    assert not failures
    assert len(csv_paths) == 1
    name = csv_paths[0].name
    for code in ("FullStudySettings", "noNormalization", "2D", "T2AX", "bin15"):
        assert code in name
    rows = read_rows(csv_paths[0])
    assert len(rows) == 2  # 1 subject x 2 timepoints x 1 structure
    header = list(rows[0])
    for cls in ("shape", "firstorder", "glcm", "glrlm", "glszm"):
        for feature in FEATURE_ROSTER[cls]:
            assert f"original_{cls}_{feature}" in header
    assert header[-4:] == ["study", "series", "canonicalType",
                           "segmentedStructure"]
    validate_feature_csv(csv_paths[0])


def test_rows_sorted_and_meta_populated(tmp_path):
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=2,
                                          structures=("Tumor", "WholeGland")))
    csv_paths, _ = extract_run(manifest, tmp_path / "out")
    rows = read_rows(csv_paths[0])
    keys = [(r["study"], r["series"], r["segmentedStructure"]) for r in rows]
    assert keys == sorted(keys)
    assert {r["canonicalType"] for r in rows} == {"T2AX"}
    assert {r["segmentedStructure"] for r in rows} == {"Tumor", "WholeGland"}
    assert all(r["general_info_VoxelNum"] for r in rows)
    assert all(r["general_info_ImageHash"] != r["general_info_MaskHash"]
               for r in rows)


def test_extraction_deterministic(tmp_path):
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=2))
    paths_a, _ = extract_run(manifest, tmp_path / "out_a")
    paths_b, _ = extract_run(manifest, tmp_path / "out_b")
    for a, b in zip(paths_a, paths_b):
        assert a.name == b.name
        assert a.read_bytes() == b.read_bytes()


def test_extraction_parallel_matches_serial(tmp_path):
    settings = {"normalizationModes": ["none"], "binWidths": [15],
                "dimensionality": "2D",
                "filters": ["original", "wavelet", "square"]}
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=2,
                                          settings=settings))
    serial, _ = extract_run(manifest, tmp_path / "serial", jobs=1)
    parallel, _ = extract_run(manifest, tmp_path / "parallel", jobs=4)
    for a, b in zip(serial, parallel):
        assert a.read_bytes() == b.read_bytes()


def test_configuration_matrix_filenames(tmp_path):
    settings = {"normalizationModes": ["none", "wholeImage"],
                "binWidths": [10, 20], "dimensionality": "3D",
                "filters": ["original"]}
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=1,
                                          settings=settings))
    csv_paths, _ = extract_run(manifest, tmp_path / "out")
    names = sorted(p.name for p in csv_paths)
    assert names == [
        "FullStudySettings_3D_T2AX_bin10.csv",
        "FullStudySettings_3D_T2AX_bin20.csv",
        "FullStudySettings_noNormalization_3D_T2AX_bin10.csv",
        "FullStudySettings_noNormalization_3D_T2AX_bin20.csv",
    ]


def test_reference_region_filename_and_values(tmp_path):
    settings = {"normalizationModes": ["referenceRegion"], "binWidths": [15],
                "dimensionality": "2D", "filters": ["original"]}
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=1,
                                          settings=settings,
                                          with_reference=True))
    csv_paths, failures = extract_run(manifest, tmp_path / "out")
    assert not failures
    assert "MuscleRefNorm" in csv_paths[0].name
    validate_feature_csv(csv_paths[0])


def test_reference_region_without_mask_goes_to_sidecar(tmp_path):
    settings = {"normalizationModes": ["referenceRegion"], "binWidths": [15],
                "dimensionality": "2D", "filters": ["original"]}
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=1,
                                          settings=settings,
                                          with_reference=False))
    csv_paths, failures = extract_run(manifest, tmp_path / "out")
    assert failures
    assert all(f.error == "MissingReferenceMask" for f in failures)
    sidecar = tmp_path / "out" / "extraction_errors.csv"
    assert sidecar.exists()
    rows = read_rows(csv_paths[0])
    assert len(rows) == 2  # rows still emitted, features blank
    assert all(r["original_firstorder_Mean"] == "" for r in rows)
    # shape needs no intensities, so it still fills in
    assert all(r["original_shape_Volume"] != "" for r in rows)


def test_registered_and_bias_codes(tmp_path):
    settings = {"normalizationModes": ["none"], "binWidths": [15],
                "dimensionality": "2D", "filters": ["original"],
                "registeredMasks": True, "biasCorrected": True}
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=1,
                                          settings=settings))
    csv_paths, _ = extract_run(manifest, tmp_path / "out")
    name = csv_paths[0].name
    assert "TP2Registered" in name and "biasCorrected" in name
    parsed = parse_config_from_name(csv_paths[0])
    assert parsed.registered


def test_geometry_mismatch_recorded_not_fatal(tmp_path):
    from radrep.volume_io import write_nrrd
    manifest_path = build_cohort(tmp_path / "in", n_subjects=1)
    # overwrite one mask with a wrong-size grid
    bad = tmp_path / "in" / "sub00_tp2_Tumor.nrrd"
    labels = np.zeros((4, 4, 2))
    labels[1, 1, 1] = 1
    write_nrrd(bad, labels, (1, 1, 3), dtype="short")
    manifest = load_manifest(manifest_path)
    csv_paths, failures = extract_run(manifest, tmp_path / "out")
    assert any(f.error == "GeometryMismatch" for f in failures)
    rows = read_rows(csv_paths[0])
    assert len(rows) == 1  # the bad row is skipped, the good one stays


def test_schema_validator_rejects_bad_layouts(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("study,series,canonicalType,segmentedStructure\n")
    with pytest.raises(SchemaMismatch):
        validate_feature_csv(bad)
    bad.write_text("general_info_X,original_glcm_Contrast,bogus_column,"
                   "study,series,canonicalType,segmentedStructure\n")
    with pytest.raises(SchemaMismatch):
        validate_feature_csv(bad)
    bad.write_text("general_info_X,original_glcm_NotAFeature,"
                   "study,series,canonicalType,segmentedStructure\n")
    with pytest.raises(SchemaMismatch):
        validate_feature_csv(bad)


def test_parse_config_from_name():
    parsed = parse_config_from_name(
        "FullStudySettings_noNormalization_2D_T2AX_bin20.csv")
    assert parsed.image_type == "T2AX"
    assert parsed.normalization == "none"
    assert parsed.bin_width == 20.0
    assert parsed.dimensionality == "2D"
    parsed = parse_config_from_name(
        "FullStudySettings_MuscleRefNorm_3D_biasCorrected_ADC_bin10.csv")
    assert parsed.normalization == "referenceRegion"
    assert parsed.image_type == "ADC"
    assert parsed.dimensionality == "3D"


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def test_multi_image_type_cohort(tmp_path):
    # ADC carries one subject fewer than T2AX (exclusion is expressed by
    # omitting that subject's ADC entries); files split per image type
    root = tmp_path / "in"
    build_cohort(root, n_subjects=4, image_type="T2AX")
    adc_manifest = build_cohort(tmp_path / "adc", n_subjects=3,
                                image_type="ADC", seed=123)
    main_doc = json.loads((root / "manifest.json").read_text())
    adc_doc = json.loads(adc_manifest.read_text())
    for entry in adc_doc["cohort"]:
        entry["imagePath"] = str((tmp_path / "adc" / entry["imagePath"]))
        for m in entry["masks"]:
            m["path"] = str(tmp_path / "adc" / m["path"])
    main_doc["cohort"] += adc_doc["cohort"]
    (root / "manifest.json").write_text(json.dumps(main_doc))

    manifest = load_manifest(root / "manifest.json")
    csv_paths, failures = extract_run(manifest, tmp_path / "out")
    assert not failures
    names = sorted(p.name for p in csv_paths)
    assert names == ["FullStudySettings_noNormalization_2D_ADC_bin15.csv",
                     "FullStudySettings_noNormalization_2D_T2AX_bin15.csv"]
    adc_rows = read_rows(csv_paths[0])
    t2_rows = read_rows(csv_paths[1])
    assert len(adc_rows) == 6 and len(t2_rows) == 8
    assert {r["canonicalType"] for r in adc_rows} == {"ADC"}
    assert {r["canonicalType"] for r in t2_rows} == {"T2AX"}

    written = analyze_run(csv_paths, tmp_path / "reports")
    icc_files = sorted(p.name for p in written if p.name.startswith("icc__"))
    assert icc_files == [
        "icc__FullStudySettings_noNormalization_2D_ADC_bin15__Tumor.csv",
        "icc__FullStudySettings_noNormalization_2D_T2AX_bin15__Tumor.csv",
    ]


def test_analyze_insufficient_subjects(tmp_path):
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=1))
    csv_paths, _ = extract_run(manifest, tmp_path / "out")
    with pytest.raises(InsufficientSubjects):
        analyze_run(csv_paths, tmp_path / "reports")


def test_analyze_perfect_retest_all_iccs_one(tmp_path):
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=10,
                                          perfect_retest=True))
    csv_paths, _ = extract_run(manifest, tmp_path / "out")
    written = analyze_run(csv_paths, tmp_path / "reports")
    icc_files = [p for p in written if p.name.startswith("icc__")]
    assert len(icc_files) == 1
    rows = read_rows(icc_files[0])
    assert rows, "analysis produced no feature rows"
    for row in rows:
        assert float(row["icc"]) == pytest.approx(1.0, abs=1e-12), row
        assert float(row["wms"]) == pytest.approx(0.0, abs=1e-20)
        assert row["n"] == "10"


def test_analyze_reports_and_plotdata(tmp_path):
    settings = {"normalizationModes": ["none"], "binWidths": [10, 20],
                "dimensionality": "2D", "filters": ["original", "square"]}
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=5,
                                          settings=settings))
    csv_paths, _ = extract_run(manifest, tmp_path / "out")
    assert len(csv_paths) == 2
    written = analyze_run(csv_paths, tmp_path / "reports",
                          compare=(csv_paths[0].stem, csv_paths[1].stem))
    names = {p.name for p in written}
    assert any(n.startswith("icc__") for n in names)
    assert any(n.startswith("top3__") for n in names)
    assert any(n.startswith("filterfreq__") for n in names)
    assert any(n.startswith("spread__") for n in names)
    assert any(n.startswith("rankdist__") for n in names)
    assert any(n.startswith("delta__") for n in names)

    top3 = json.loads(next(p for p in written
                           if p.name.startswith("top3__")).read_text())
    assert set(top3) <= {"shape", "firstorder", "glcm", "glrlm", "glszm"}
    for pairs in top3.values():
        assert len(pairs) == 3

    spread_rows = read_rows(next(p for p in written
                                 if p.name.startswith("spread__")))
    by_key = {r["featureKey"]: float(r["maxDeltaIcc"]) for r in spread_rows}
    # shape features cannot depend on the bin width
    assert by_key["original_shape_Volume"] == 0.0

    rank_rows = read_rows(next(p for p in written
                               if p.name.startswith("rankdist__")))
    per_width = {}
    for row in rank_rows:
        per_width.setdefault(row["binWidth"], 0)
        per_width[row["binWidth"]] += int(row["count"])
    assert len(set(per_width.values())) == 1  # same feature count per width

    kde_path = next(p for p in written if p.name.startswith("kde_spread__"))
    kde_rows = read_rows(kde_path)
    assert len(kde_rows) == 256
    xs = np.array([float(r["maxDeltaIcc"]) for r in kde_rows])
    ds = np.array([float(r["density"]) for r in kde_rows])
    assert 0.98 <= np.trapezoid(ds, xs) <= 1.02

    plots = plotdata_run(tmp_path / "reports", tmp_path / "plots")
    plot_names = {p.name for p in plots}
    assert any(n.startswith("plot_icc__") for n in plot_names)
    assert any(n.startswith("plot_filterfreq__") for n in plot_names)
    assert any(n.startswith("plot_delta__") for n in plot_names)


def test_analyze_binwidth_group_with_uneven_feature_sets(tmp_path):
    # a feature whose ICC is computable at one bin width but degenerate at
    # another must not kill the cross-width analyses; it lands in a notes
    # file and the shared set is compared
    settings = {"normalizationModes": ["none"], "binWidths": [10, 20],
                "dimensionality": "2D", "filters": ["original"]}
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=4,
                                          settings=settings))
    csv_paths, _ = extract_run(manifest, tmp_path / "out")
    # plant a column that is constant at bin20 (dropped as degenerate)
    # but varies at bin10
    for path in csv_paths:
        rows = read_rows(path)
        header = list(rows[0])
        constant = path.name.endswith("bin20.csv")
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                if constant:
                    row["original_glcm_Idm"] = "1"
                writer.writerow([row[c] for c in header])
    written = analyze_run(csv_paths, tmp_path / "reports")
    notes = [p for p in written if p.name.startswith("binwidth_notes__")]
    assert len(notes) == 1
    payload = json.loads(notes[0].read_text())
    assert payload["excludedFeatures"] == ["original_glcm_Idm"]
    spread_rows = read_rows(next(p for p in written
                                 if p.name.startswith("spread__")))
    assert all(r["featureKey"] != "original_glcm_Idm" for r in spread_rows)


def test_analyze_delta_identical_configs_zero(tmp_path):
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=5))
    csv_paths, _ = extract_run(manifest, tmp_path / "out")
    stem = csv_paths[0].stem
    written = analyze_run(csv_paths, tmp_path / "reports",
                          compare=(stem, stem))
    delta_path = next(p for p in written if p.name.startswith("delta__"))
    payload = json.loads(delta_path.read_text())
    assert payload["sharedCount"] > 0
    assert all(v["delta"] == 0.0 for v in payload["shared"].values())


def test_analyze_rejects_unknown_columns(tmp_path):
    manifest = load_manifest(build_cohort(tmp_path / "in", n_subjects=3))
    csv_paths, _ = extract_run(manifest, tmp_path / "out")
    text = csv_paths[0].read_text().splitlines()
    text[0] = text[0].replace("original_glcm_Contrast", "mystery_column")
    csv_paths[0].write_text("\n".join(text) + "\n")
    with pytest.raises(SchemaMismatch):
        analyze_run(csv_paths, tmp_path / "reports")


def test_analyze_rejects_missing_study_column(tmp_path):
    bad = tmp_path / "FullStudySettings_noNormalization_2D_T2AX_bin15.csv"
    bad.write_text("general_info_VoxelNum,original_shape_Volume\n1,2.0\n")
    with pytest.raises(SchemaMismatch):
        analyze_run([bad], tmp_path / "reports")


def test_plotdata_missing_reports(tmp_path):
    from radrep.pipeline import MissingReport
    (tmp_path / "empty").mkdir()
    with pytest.raises(MissingReport):
        plotdata_run(tmp_path / "empty", tmp_path / "plots")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    manifest_path = build_cohort(tmp_path / "in", n_subjects=4)
    out = tmp_path / "features"
    assert main(["extract", "--manifest", str(manifest_path),
                 "--out", str(out)]) == 0
    assert main(["analyze", "--in", str(out / "*.csv"),
                 "--reference", "original_shape_Volume",
                 "--out", str(tmp_path / "reports")]) == 0
    assert main(["plotdata", "--in", str(tmp_path / "reports"),
                 "--out", str(tmp_path / "plots")]) == 0
    capsys.readouterr()


def test_cli_usage_error():
    assert main(["extract"]) == 1
    assert main([]) == 1


def test_cli_data_error(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["extract", "--manifest", str(missing),
                 "--out", str(tmp_path / "out")]) == 2
    assert main(["analyze", "--in", str(tmp_path / "nothing-*.csv"),
                 "--out", str(tmp_path / "reports")]) == 2
    capsys.readouterr()


def test_cli_partial_failure_exit_code(tmp_path, capsys):
    settings = {"normalizationModes": ["referenceRegion"], "binWidths": [15],
                "dimensionality": "2D", "filters": ["original"]}
    manifest_path = build_cohort(tmp_path / "in", n_subjects=1,
                                 settings=settings, with_reference=False)
    assert main(["extract", "--manifest", str(manifest_path),
                 "--out", str(tmp_path / "out")]) == 3
    capsys.readouterr()
