"""Command line entry point for the cribra toolkit.

Exit codes: 0 success, 1 configuration or contract error, 2 partial data failure.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from augmentation import AugmentationGrid, RejectionPolicy, sample_augmented
from classifiers import (
    MlpConfig,
    SvmConfig,
    fuse_rows,
    load_model,
    predict,
    save_model,
    train_mlp,
    train_svm,
)
from config import (
    BLANK_LUMINANCE,
    FEATURE_SCALE,
    GRID_DELTA,
    GRID_K_MAX,
    GRID_SIDE,
    MAX_BLANK_FRACTION,
    MAX_NUCLEUS_AREA,
    MIN_NUCLEUS_AREA,
    MLP_BATCH,
    MLP_EPOCHS,
    MLP_LR,
    MLP_MOMENTUM,
    N_PER_CLASS,
    SVM_C,
    SVM_GAMMA,
    SVM_MAX_PASSES,
    SVM_TOL,
    SVM_TUNE_GRID,
    get_default_seed,
    get_thread_count,
    setup_logging,
)
from errors import ConfigError, CribraError
from evaluation import (
    ConstantRecipe,
    MlpRecipe,
    SvmRecipe,
    build_fold_plan,
    load_sets_config,
    patient_counts,
    read_report_frame,
    render_table,
    run_cv,
    split_frame,
    write_report,
)
from features_local import measurements_frame, object_measurements
from features_spatial import FEATURE_COLUMNS, tile_features
from file_formats import (
    REJECTION_COLUMNS,
    EmbeddingTable,
    FeatureTable,
    Label,
    ManifestRow,
    append_log_rows,
    read_features,
    read_frame,
    read_manifest,
    read_origins,
    write_features,
    write_frame,
    write_manifest,
)
from image_io import SUPPORTED_SIDES, load_tile, save_tile
from segmentation import SegConfig
from synthgen import DatasetPlan, write_dataset

logger = logging.getLogger(__name__)

ERROR_LOG_COLUMNS = ["tile_id", "tile_path", "error", "message"]


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _seed(args) -> int:
    return get_default_seed() if args.seed is None else args.seed


def _embeddings(paths: Optional[Sequence[str]]) -> List[EmbeddingTable]:
    return [EmbeddingTable.load(path) for path in (paths or [])]


def _seg_config(args) -> SegConfig:
    return SegConfig(args.min_area, args.max_area)


def _check_scale(scale: int) -> None:
    if scale and scale not in SUPPORTED_SIDES:
        raise ConfigError(f"--scale must be 0 or one of {SUPPORTED_SIDES}, got {scale}")


def _labeled(table: FeatureTable, tables: Sequence[EmbeddingTable]):
    keep = [i for i, label in enumerate(table.labels) if label is not Label.UNLABELED]
    ids = [table.ids[i] for i in keep]
    X = fuse_rows(table.values[keep], ids, tables, len(table.columns))
    y = np.array([table.labels[i].sign for i in keep])
    return ids, X, y


def _model_metadata(table: FeatureTable, tables: Sequence[EmbeddingTable], width: int) -> dict:
    return {
        "feature_columns": table.columns,
        "embeddings": [{"path": os.path.basename(t.path), "dim": t.dim} for t in tables],
        "total_width": width,
    }


# Commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    plan = DatasetPlan(args.patients_per_set, args.tiles_per_class, args.side, _seed(args), args.noise)
    rows = write_dataset(args.out, plan, args.threads)
    print(f"Wrote {len(rows)} tiles to {args.out}")
    return 0


def cmd_augment(args) -> int:
    grid = AugmentationGrid(args.delta, args.kmax, tuple(_float_list(args.thetas)), args.side)
    policy = RejectionPolicy(args.max_blank, args.blank_luminance, args.allow_oob)
    context = load_tile(args.context)
    tiles_dir = os.path.join(args.out, "tiles")

    rows: List[ManifestRow] = []
    rejections = []
    for origin in read_origins(args.origins):
        result = sample_augmented(
            context, grid, (origin.x, origin.y), policy,
            source_id=origin.source_id, patient_id=origin.patient_id, label=origin.label,
            workers=args.threads,
        )
        for tile in result.accepted:
            path = os.path.join(tiles_dir, f"{tile.id}.png")
            save_tile(tile, path)
            rows.append(ManifestRow(
                path, tile.id, tile.patient_id, tile.label, tile.source_id,
                tile.transform.dx, tile.transform.dy, tile.transform.theta,
            ))
        rejections.extend(
            [r.source_id, r.dx, r.dy, f"{r.theta:g}", r.reason] for r in result.rejections
        )

    write_manifest(os.path.join(args.out, "manifest.csv"), rows, relative_to=args.out)
    append_log_rows(os.path.join(args.out, "rejections.csv"), REJECTION_COLUMNS, rejections)
    print(f"Accepted {len(rows)} variants, rejected {len(rejections)}")
    return 0


def _error_row(row: ManifestRow, error: Exception) -> list:
    return [row.tile_id, row.tile_path, type(error).__name__, str(error)]


def _map_tiles(rows: Sequence[ManifestRow], work, threads: Optional[int]):
    """Run ``work`` over tiles in parallel; per-tile CribraErrors are returned, not raised."""
    def guarded(row):
        try:
            return row, work(row), None
        except CribraError as e:
            logger.warning("%s: %s", row.tile_id, e)
            return row, None, e

    with ThreadPoolExecutor(max_workers=threads or get_thread_count()) as pool:
        return list(pool.map(guarded, rows))


def cmd_segment(args) -> int:
    _check_scale(args.scale)
    rows = read_manifest(args.manifest)
    cfg = _seg_config(args)
    summary_path = os.path.join(args.out, "segmentation.csv")

    def label_path(row: ManifestRow) -> str:
        return os.path.join(args.out, "labels", f"{row.tile_id}.png")

    def objects_path(row: ManifestRow) -> str:
        return os.path.join(args.out, "objects", f"{row.tile_id}.csv")

    previous = {}
    if os.path.exists(summary_path):
        for record in read_frame(summary_path).itertuples(index=False):
            previous[record.tile_id] = [
                record.tile_id, float(record.threshold), int(record.objects), float(record.occupied_area),
            ]

    def finished(row: ManifestRow) -> bool:
        return (
            row.tile_id in previous
            and os.path.exists(label_path(row))
            and (not args.dump_objects or os.path.exists(objects_path(row)))
        )

    done = {row.tile_id for row in rows if finished(row)}
    todo = [row for row in rows if row.tile_id not in done]
    if done and not todo:
        logger.info("%s already holds all %d tiles", args.out, len(done))
        return 0

    def work(row: ManifestRow):
        fv, seg = tile_features(load_tile(row.tile_path, row), cfg, args.scale)
        save_tile(seg.label_image(), label_path(row))
        if args.dump_objects:
            write_frame(objects_path(row), measurements_frame(object_measurements(seg)))
        area = float(seg.mask().mean())
        return [row.tile_id, seg.threshold_used, len(seg.objects), area]

    outcomes = _map_tiles(todo, work, args.threads)
    fresh = {row.tile_id: result for row, result, error in outcomes if error is None}
    summary = [
        fresh[row.tile_id] if row.tile_id in fresh else previous[row.tile_id]
        for row in rows
        if row.tile_id in fresh or row.tile_id in done
    ]
    errors = [_error_row(row, error) for row, _, error in outcomes if error is not None]
    write_frame(summary_path, pd.DataFrame(summary, columns=["tile_id", "threshold", "objects", "occupied_area"]))
    logger.info("Segmented %d tiles, %d reused, %d failed", len(fresh), len(done), len(errors))
    if errors:
        append_log_rows(os.path.join(args.out, "errors.csv"), ERROR_LOG_COLUMNS, errors)
        return 2
    return 0


def cmd_features(args) -> int:
    _check_scale(args.scale)
    rows = read_manifest(args.manifest)
    cfg = _seg_config(args)
    error_log = args.errors or f"{args.out}.errors.csv"

    existing = read_features(args.out) if os.path.exists(args.out) else None
    done = set(existing.ids) if existing else set()
    todo = [row for row in rows if row.tile_id not in done]
    if existing is not None and not todo:
        logger.info("%s already holds all %d tiles", args.out, len(done))
        return 0

    def work(row: ManifestRow):
        fv, seg = tile_features(load_tile(row.tile_path, row), cfg, args.scale, args.disorder)
        if args.dump_objects:
            write_frame(
                os.path.join(args.dump_objects, f"{row.tile_id}.csv"),
                measurements_frame(object_measurements(seg)),
            )
        return fv

    outcomes = _map_tiles(todo, work, args.threads)
    table = existing or FeatureTable([], [], [], [], list(FEATURE_COLUMNS), np.zeros((0, len(FEATURE_COLUMNS))))
    new_ok = [(row, fv) for row, fv, error in outcomes if error is None]
    merged = FeatureTable(
        ids=table.ids + [row.tile_id for row, _ in new_ok],
        patient_ids=table.patient_ids + [row.patient_id for row, _ in new_ok],
        labels=table.labels + [row.label for row, _ in new_ok],
        valid=table.valid + [fv.valid for _, fv in new_ok],
        columns=list(FEATURE_COLUMNS),
        values=np.vstack([table.values.reshape(-1, len(FEATURE_COLUMNS))] + [fv.values[None, :] for _, fv in new_ok]),
    )
    write_features(args.out, merged)

    errors = [_error_row(row, error) for row, _, error in outcomes if error is not None]
    logger.info("Featurized %d tiles, %d failed", len(new_ok), len(errors))
    if errors:
        append_log_rows(error_log, ERROR_LOG_COLUMNS, errors)
        return 2
    return 0


def cmd_train_svm(args) -> int:
    table = read_features(args.features)
    tables = _embeddings(args.embeddings)
    _, X, y = _labeled(table, tables)
    cfg = SvmConfig(args.c, args.gamma, args.tol, args.max_passes, _seed(args))
    model = train_svm(X, y, cfg)
    model.metadata = _model_metadata(table, tables, X.shape[1])
    save_model(model, args.out)
    labels, _ = predict(model, X)
    print(f"Training accuracy {np.mean(labels == y):.4f} on {len(y)} tiles")
    return 0


def cmd_train_mlp(args) -> int:
    table = read_features(args.features)
    tables = _embeddings(args.embeddings)
    _, X, y = _labeled(table, tables)
    X_val = y_val = None
    if args.val_features:
        _, X_val, y_val = _labeled(read_features(args.val_features), tables)
        y_val = (y_val > 0).astype(int)
    cfg = MlpConfig(tuple(_int_list(args.hidden)), args.epochs, args.lr, args.momentum, args.batch, _seed(args))
    result = train_mlp(X, (y > 0).astype(int), cfg, X_val, y_val)
    model = result.selected
    model.metadata = _model_metadata(table, tables, X.shape[1])
    save_model(model, args.out)
    labels, _ = predict(model, X)
    print(f"Training accuracy {np.mean(labels == y):.4f} on {len(y)} tiles")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    table = read_features(args.features)
    tables = _embeddings(args.embeddings)
    X = fuse_rows(table.values, table.ids, tables, len(table.columns))
    labels, scores = predict(model, X)
    names = [Label.CRIBRIFORM.value if label > 0 else Label.NON_CRIBRIFORM.value for label in labels]
    write_frame(args.out, pd.DataFrame({"id": table.ids, "predicted": names, "score": scores}))

    truth = np.array([label.sign for label in table.labels])
    known = truth != 0
    if known.any():
        print(f"Accuracy {np.mean(labels[known] == truth[known]):.4f} on {int(known.sum())} labeled tiles")
    return 0


def _recipe(args):
    if args.recipe == "svm":
        grid = SVM_TUNE_GRID if args.tune_svm else None
        return SvmRecipe(SvmConfig(args.c, args.gamma, args.tol, args.max_passes), grid)
    if args.recipe == "mlp":
        return MlpRecipe(MlpConfig(tuple(_int_list(args.hidden)), args.epochs, args.lr, args.momentum, args.batch))
    return ConstantRecipe(1)


def cmd_evaluate(args) -> int:
    if not os.path.isfile(args.sets):
        raise ConfigError(f"Sets file {args.sets} does not exist")
    manifest = read_manifest(args.manifest)
    plan = build_fold_plan(manifest, load_sets_config(args.sets))
    report = run_cv(
        manifest, plan, _recipe(args), read_features(args.features),
        seed=_seed(args), n_per_class=args.n_per_class,
        embeddings=_embeddings(args.embeddings), unseen=args.unseen, workers=args.threads,
    )
    paths = write_report(report, args.out)
    for split in report.splits:
        write_frame(f"{args.out}_fold{split.fold + 1:02d}_split.csv", split_frame(split, manifest))
    print(report.to_table())
    print(f"Report written to {', '.join(paths)}")
    return 0


def cmd_report(args) -> int:
    if args.report:
        print(render_table(read_report_frame(args.report), os.path.basename(args.report)))
    if args.manifest:
        manifest = read_manifest(args.manifest)
        plan = build_fold_plan(manifest, load_sets_config(args.sets)) if args.sets else None
        counts = patient_counts(manifest, plan)
        print(render_table(counts, "Tiles per patient"))
        if args.out:
            write_frame(args.out, counts)
    if not args.report and not args.manifest:
        raise ConfigError("report needs --manifest and/or --report")
    return 0


# Parser -------------------------------------------------------------------

def _add_seg_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--min-area", type=float, default=MIN_NUCLEUS_AREA, help="min nucleus area at 1024 px")
    p.add_argument("--max-area", type=float, default=MAX_NUCLEUS_AREA, help="max nucleus area at 1024 px")
    p.add_argument("--scale", type=int, default=FEATURE_SCALE, help="working side, 0 keeps native size")


def _add_svm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--c", type=float, default=SVM_C)
    p.add_argument("--gamma", type=float, default=SVM_GAMMA)
    p.add_argument("--tol", type=float, default=SVM_TOL)
    p.add_argument("--max-passes", type=int, default=SVM_MAX_PASSES)


def _add_mlp_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden", default="512,128")
    p.add_argument("--epochs", type=int, default=MLP_EPOCHS)
    p.add_argument("--lr", type=float, default=MLP_LR)
    p.add_argument("--momentum", type=float, default=MLP_MOMENTUM)
    p.add_argument("--batch", type=int, default=MLP_BATCH)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="defaults to CRIBRA_SEED")
    common.add_argument("--threads", type=int, default=None, help="defaults to CRIBRA_THREADS")
    common.add_argument("--log-level", default="")

    parser = argparse.ArgumentParser(prog="cribra", description="Cribriform pattern tile toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--patients-per-set", type=int, default=3)
    p.add_argument("--tiles-per-class", type=int, default=200)
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--noise", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", parents=[common], help="sample the translation/rotation grid")
    p.add_argument("--context", required=True)
    p.add_argument("--origins", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=int, default=GRID_DELTA)
    p.add_argument("--kmax", type=int, default=GRID_K_MAX)
    p.add_argument("--thetas", default="0,60,120")
    p.add_argument("--side", type=int, default=GRID_SIDE)
    p.add_argument("--max-blank", type=float, default=MAX_BLANK_FRACTION)
    p.add_argument("--blank-luminance", type=int, default=BLANK_LUMINANCE)
    p.add_argument("--allow-oob", action="store_true")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("segment", parents=[common], help="segment nuclei and write label images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-objects", action="store_true")
    _add_seg_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("features", parents=[common], help="compute the 57 nuclei features per tile")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--errors", default="")
    p.add_argument("--dump-objects", default="", help="directory for per-object CSVs")
    p.add_argument("--disorder", choices=["ratio", "cv"], default="ratio")
    _add_seg_flags(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-svm", parents=[common], help="train the RBF SVM")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", action="append")
    _add_svm_flags(p)
    p.set_defaults(func=cmd_train_svm)

    p = sub.add_parser("train-mlp", parents=[common], help="train the fusion MLP")
    p.add_argument("--features", required=True)
    p.add_argument("--val-features", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", action="append")
    _add_mlp_flags(p)
    p.set_defaults(func=cmd_train_mlp)

    p = sub.add_parser("predict", parents=[common], help="apply a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", action="append")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="patient-exclusive three-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--sets", required=True)
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--recipe", choices=["svm", "mlp", "constant"], default="svm")
    p.add_argument("--n-per-class", type=int, default=N_PER_CLASS)
    p.add_argument("--embeddings", action="append")
    p.add_argument("--unseen", action="store_true")
    p.add_argument("--tune-svm", action="store_true")
    _add_svm_flags(p)
    _add_mlp_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="dataset summary or report re-rendering")
    p.add_argument("--manifest", default="")
    p.add_argument("--sets", default="")
    p.add_argument("--report", default="")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except CribraError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
