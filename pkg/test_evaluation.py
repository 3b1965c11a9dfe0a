"""Tests for the fold plan, balanced sampling, accuracy summaries and the CV driver."""

import os
import tempfile

import numpy as np
import pytest

from classifiers import MlpConfig, SvmConfig
from errors import ConfigError, InsufficientTiles, PatientOverlap, UnassignedPatient
from evaluation import (
    ConstantRecipe,
    FoldPlan,
    FoldReport,
    FoldResult,
    MlpRecipe,
    Role,
    SvmRecipe,
    accuracy_of,
    build_fold_plan,
    build_unseen_test,
    confusion_matrix,
    load_sets_config,
    patient_counts,
    read_report_frame,
    run_cv,
    sample_balanced,
    split_frame,
    summarize_accuracies,
    write_report,
    write_sets_config,
)
from features_spatial import FEATURE_COLUMNS, tile_features
from file_formats import EmbeddingTable, FeatureTable, Label, ManifestRow
from synthgen import DatasetPlan, dataset_specs, generate

SETS = [["P01"], ["P02"], ["P03"]]


def _manifest(per_class: int = 10, augmented: int = 0):
    rows = []
    for patient in ("P01", "P02", "P03"):
        for label, short in ((Label.CRIBRIFORM, "c"), (Label.NON_CRIBRIFORM, "n")):
            for k in range(per_class):
                tile_id = f"{patient}_{short}{k:02d}"
                rows.append(ManifestRow(f"{tile_id}.png", tile_id, patient, label))
                for a in range(augmented):
                    aug_id = f"{tile_id}_a{a}"
                    rows.append(ManifestRow(f"{aug_id}.png", aug_id, patient, label, tile_id, a, 0, 0.0))
    return rows


def test_fold_plan():
    """Role rotation, overlapping and missing patients."""
    print("Testing build_fold_plan")
    print("=" * 40)
    manifest = _manifest(2)
    plan = build_fold_plan(manifest, SETS)

    print("1. Set 1 rotates Train, Validation, Test")
    assert [plan.patients_for(f, Role.TRAIN) for f in range(3)] == [("P01",), ("P03",), ("P02",)], "Train rotation"
    roles_of_set1 = [next(r for r, s in plan.role_table[f].items() if s == 0) for f in range(3)]
    assert roles_of_set1 == [Role.TRAIN, Role.VALIDATION, Role.TEST], f"Set 1 roles {roles_of_set1}"
    for fold in range(3):
        assert sorted(plan.role_table[fold].values()) == [0, 1, 2], "Every set plays one role per fold"
    assert plan.set_of("P03") == 2, "P03 belongs to set 3"
    print("   PASSED\n")

    print("2. Invalid assignments")
    with pytest.raises(PatientOverlap):
        build_fold_plan(manifest, [["P01", "P02"], ["P02"], ["P03"]])
    with pytest.raises(UnassignedPatient):
        build_fold_plan(manifest, [["P01"], ["P02"]])
    with pytest.raises(UnassignedPatient):
        build_fold_plan(manifest + [ManifestRow("x.png", "x", "P09", Label.CRIBRIFORM)], SETS)
    print("   PASSED\n")


def test_sets_config():
    """dotenv-style SET1..SET3 files."""
    print("Testing load_sets_config")
    print("=" * 40)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "sets.env")
        write_sets_config(path, [["P01", "P04"], ["P02"], ["P03"]])
        assert load_sets_config(path) == [["P01", "P04"], ["P02"], ["P03"]], "Round trip through sets.env"

        with open(path, "a", encoding="utf-8") as handle:
            handle.write("SET4=P05\n")
        with pytest.raises(ConfigError):
            load_sets_config(path)

        with open(path, "w", encoding="utf-8") as handle:
            handle.write("SET1=P01\nSET2=\nSET3=P03\n")
        with pytest.raises(ConfigError):
            load_sets_config(path)
    print("   PASSED\n")


def test_sampling():
    """Balanced, patient-exclusive and seed-deterministic draws."""
    print("Testing sample_balanced")
    print("=" * 40)
    manifest = _manifest(10, augmented=1)
    by_id = {row.tile_id: row for row in manifest}
    plan = build_fold_plan(manifest, SETS)

    print("1. Balance and disjointness")
    split = sample_balanced(manifest, plan, fold=0, n_per_class=4, seed=5)
    for role in Role:
        ids = split.ids(role)
        assert len(ids) == 8, f"{role.value}: {len(ids)} tiles"
        labels = [by_id[i].label for i in ids]
        assert labels.count(Label.CRIBRIFORM) == 4, f"{role.value}: unbalanced"
        assert {by_id[i].patient_id for i in ids} == set(plan.patients_for(0, role)), "Patient leak"
    assert len(split.all_ids()) == 24, "Roles must not share tiles"
    print("   PASSED\n")

    print("2. Determinism")
    again = sample_balanced(manifest, plan, fold=0, n_per_class=4, seed=5)
    assert again.roles == split.roles, "Same seed must give the same split"
    other = sample_balanced(manifest, plan, fold=0, n_per_class=4, seed=6)
    assert other.roles != split.roles, "A different seed should move the draw"
    frame = split_frame(split, manifest)
    assert len(frame) == 24 and set(frame["role"]) == {"train", "validation", "test"}, "Split manifest rows"
    print("   PASSED\n")

    print("3. Unseen test excludes used tiles and their sources")
    unseen = build_unseen_test(manifest, plan, 0, split.all_ids(), n_per_class=4, seed=5)
    used_sources = {by_id[i].source for i in split.all_ids()}
    for tile_id in unseen.test:
        assert tile_id not in split.all_ids(), "Unseen test reused a tile"
        assert by_id[tile_id].source not in used_sources, "Unseen test shares a source location"
        assert by_id[tile_id].patient_id == "P03", "Unseen test left the test patients"
    assert len(unseen.test) == 8, "Unseen test is balanced too"
    print("   PASSED\n")

    print("4. Not enough tiles")
    with pytest.raises(InsufficientTiles):
        sample_balanced(manifest, plan, fold=0, n_per_class=30)
    print("   PASSED\n")


def test_summaries():
    """Confusion matrices, mean/std/se and the report files."""
    print("Testing accuracy summaries")
    print("=" * 40)
    cm = confusion_matrix([1, 1, -1, -1, 1], [1, -1, -1, 1, 1])
    assert cm.tolist() == [[1, 1], [1, 2]], f"Confusion {cm.tolist()}"
    one_class = confusion_matrix([1, 1], [1, 1])
    assert one_class.shape == (2, 2) and one_class.tolist() == [[0, 0], [0, 2]], "Single-class input keeps both rows"
    assert accuracy_of(one_class) == 1.0, "Accuracy from the diagonal"

    summary = summarize_accuracies([0.8, 0.9, 1.0])
    assert abs(summary.mean - 0.9) < 1e-12 and abs(summary.std - 0.1) < 1e-12, "Mean/std of 0.8, 0.9, 1.0"
    assert abs(summary.se - 0.1 / np.sqrt(3)) < 1e-12 and round(summary.se, 4) == 0.0577, f"SE {summary.se}"
    single = summarize_accuracies([0.7])
    assert single.std == 0.0 and single.se == 0.0, "One fold has no spread"

    folds = [
        FoldResult(k, np.array([[tn, 10 - tn], [10 - tp, tp]]), 0.9)
        for k, (tn, tp) in enumerate([(8, 8), (9, 9), (10, 10)])
    ]
    report = FoldReport("svm", folds)
    assert abs(report.test.mean - 0.9) < 1e-12, "Report mean"
    with tempfile.TemporaryDirectory() as tmp:
        paths = write_report(report, os.path.join(tmp, "out", "report"))
        assert all(os.path.exists(p) for p in paths), "Report files missing"
        frame = read_report_frame(paths[1])
        assert list(frame["fold"]) == ["fold01", "fold02", "fold03", "mean", "std", "se"], "Report rows"
        with open(paths[0], encoding="utf-8") as handle:
            assert "0.9000 +/- 0.0577" in handle.read(), "Human table lacks the summary line"
        with open(paths[2], encoding="utf-8") as handle:
            assert len(handle.read().splitlines()) == 4, "Three fold lines plus a summary"

    counts = patient_counts(_manifest(3), build_fold_plan(_manifest(3), SETS))
    assert list(counts["set"]) == ["Set 1", "Set 2", "Set 3"] and list(counts["total"]) == [6, 6, 6], "Counts"
    print("   PASSED\n")


def _synthetic_features(tiles_per_class: int, patients_per_set: int = 1):
    plan = DatasetPlan(patients_per_set=patients_per_set, tiles_per_class=tiles_per_class, seed=40)
    manifest, ids, patients, labels, valid, values = [], [], [], [], [], []
    for spec in dataset_specs(plan):
        result = generate(spec)
        fv, _ = tile_features(result.tile, scale=0)
        manifest.append(ManifestRow(f"{spec.tile_id}.png", spec.tile_id, spec.patient_id, result.label))
        ids.append(spec.tile_id)
        patients.append(spec.patient_id)
        labels.append(result.label)
        valid.append(fv.valid)
        values.append(fv.values)
    table = FeatureTable(ids, patients, labels, valid, list(FEATURE_COLUMNS), np.vstack(values))
    return manifest, plan.sets, table


def test_run_cv():
    """Three folds on synthetic tiles, against the constant baseline."""
    print("Testing run_cv")
    print("=" * 40)
    manifest, sets, table = _synthetic_features(tiles_per_class=16)
    plan = build_fold_plan(manifest, sets)

    print("1. Constant baseline on balanced splits")
    baseline = run_cv(manifest, plan, ConstantRecipe(1), table, seed=0, n_per_class=8, workers=1)
    assert all(f.accuracy == 0.5 for f in baseline.folds), "Constant predictor must score 0.5"
    print("   PASSED\n")

    print("2. SVM separates the synthetic classes")
    report = run_cv(
        manifest, plan, SvmRecipe(SvmConfig(gamma=0.01)), table,
        seed=0, n_per_class=8, unseen=True, workers=3,
    )
    assert len(report.folds) == 3 and [f.fold for f in report.folds] == [0, 1, 2], "Three folds in order"
    assert report.test.mean >= 0.95, f"Mean test accuracy {report.test.mean}"
    assert all(f.unseen_accuracy == f.unseen_accuracy for f in report.folds), "Unseen accuracy missing"
    for split in report.splits:
        assert not (set(split.train) & set(split.test)), "Train and test overlap"
    print("   PASSED\n")


def test_default_recipes_at_scale():
    """Default SVM and the fused MLP on three patients per set, 200 tiles per class each."""
    print("Testing default recipes at full synthetic scale")
    print("=" * 40)
    manifest, sets, table = _synthetic_features(tiles_per_class=200, patients_per_set=3)
    plan = build_fold_plan(manifest, sets)

    print("1. SVM at C=100, gamma=0.1")
    svm = run_cv(manifest, plan, SvmRecipe(), table, seed=0, n_per_class=300, workers=3)
    assert svm.test.mean >= 0.95, f"SVM mean test accuracy {svm.test.mean}"
    print("   PASSED\n")

    print("2. MLP on features fused with an 8-wide embedding")
    dummy = EmbeddingTable("dummy.csv", 8, {tile_id: np.zeros(8) for tile_id in table.ids})
    mlp = run_cv(
        manifest, plan, MlpRecipe(MlpConfig(epochs=100)), table,
        seed=0, n_per_class=300, embeddings=[dummy], workers=3,
    )
    assert mlp.test.mean >= svm.test.mean - 0.02, f"MLP {mlp.test.mean} against SVM {svm.test.mean}"
    print("   PASSED\n")


def main():
    """Run all evaluation tests."""
    print("cribra - evaluation tests")
    print("=" * 60)
    print()

    try:
        test_fold_plan()
        test_sets_config()
        test_sampling()
        test_summaries()
        test_run_cv()
        test_default_recipes_at_scale()

        print("=" * 60)
        print("All evaluation tests PASSED!")

    except AssertionError as e:
        print(f"Test failed: {e}")


if __name__ == "__main__":
    main()
