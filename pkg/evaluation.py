"""Patient-exclusive three-fold cross-validation with balanced sampling and accuracy reporting.

Each of the three patient sets takes every role once:

            Set 1        Set 2        Set 3
  Fold 01   Train        Validation   Test
  Fold 02   Validation   Test         Train
  Fold 03   Test         Train        Validation
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from sklearn import metrics

from classifiers import (
    MlpConfig,
    SvmConfig,
    fuse_rows,
    predict,
    train_mlp,
    train_svm,
)
from config import N_PER_CLASS, SVM_TUNE_GRID, get_thread_count
from errors import (
    ConfigError,
    CribraError,
    InsufficientTiles,
    ManifestError,
    PatientOverlap,
    UnassignedPatient,
)
from file_formats import EmbeddingTable, FeatureTable, Label, ManifestRow, atomic_output, read_frame, write_frame

logger = logging.getLogger(__name__)

SET_KEYS = ("SET1", "SET2", "SET3")
FOLD_COUNT = 3
CLASSES = (Label.CRIBRIFORM, Label.NON_CRIBRIFORM)


class Role(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


ROLE_ROTATION = (Role.TRAIN, Role.VALIDATION, Role.TEST)


def role_of(set_index: int, fold: int) -> Role:
    return ROLE_ROTATION[(set_index + fold) % FOLD_COUNT]


# Fold plan ----------------------------------------------------------------

def load_sets_config(path: str) -> List[List[str]]:
    """Read SET1..SET3 (comma-separated patient ids) from a dotenv-style file."""
    values = dotenv_values(path)
    unknown = sorted(set(values) - set(SET_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}; expected {', '.join(SET_KEYS)}")
    sets = []
    for key in SET_KEYS:
        if key not in values:
            continue
        patients = [p.strip() for p in (values[key] or "").split(",") if p.strip()]
        if not patients:
            raise ConfigError(f"{path}: {key} lists no patients")
        sets.append(patients)
    return sets


def write_sets_config(path: str, sets: Sequence[Sequence[str]]) -> None:
    with atomic_output(path) as handle:
        for key, patients in zip(SET_KEYS, sets):
            handle.write(f"{key}={','.join(patients)}\n")


@dataclass(frozen=True)
class FoldPlan:
    sets: Tuple[Tuple[str, ...], ...]

    @property
    def role_table(self) -> List[Dict[Role, int]]:
        """Per fold, the set index assigned to each role."""
        return [
            {role_of(s, fold): s for s in range(FOLD_COUNT)}
            for fold in range(FOLD_COUNT)
        ]

    def patients_for(self, fold: int, role: Role) -> Tuple[str, ...]:
        return self.sets[self.role_table[fold][role]]

    def set_of(self, patient_id: str) -> int:
        for index, patients in enumerate(self.sets):
            if patient_id in patients:
                return index
        raise UnassignedPatient([patient_id])


def build_fold_plan(manifest: Sequence[ManifestRow], sets: Sequence[Sequence[str]]) -> FoldPlan:
    if len(sets) != FOLD_COUNT:
        manifest_patients = sorted({row.patient_id for row in manifest})
        raise UnassignedPatient(
            manifest_patients,
            f"Expected {FOLD_COUNT} patient sets, got {len(sets)}",
        )

    seen: Dict[str, int] = {}
    overlap = set()
    for index, patients in enumerate(sets):
        for patient in patients:
            if patient in seen and seen[patient] != index:
                overlap.add(patient)
            seen[patient] = index
    if overlap:
        raise PatientOverlap(overlap)

    unassigned = sorted({row.patient_id for row in manifest} - set(seen))
    if unassigned:
        raise UnassignedPatient(unassigned)

    unused = sorted(set(seen) - {row.patient_id for row in manifest})
    if unused:
        logger.warning("Patients with no tiles in the manifest: %s", ", ".join(unused))
    return FoldPlan(tuple(tuple(patients) for patients in sets))


# Sampling -----------------------------------------------------------------

@dataclass(frozen=True)
class SampledSplit:
    fold: int
    seed: int
    roles: Dict[Role, Tuple[str, ...]]
    counts: Dict[Role, Dict[str, int]]

    def ids(self, role: Role) -> Tuple[str, ...]:
        return self.roles.get(role, ())

    @property
    def train(self) -> Tuple[str, ...]:
        return self.ids(Role.TRAIN)

    @property
    def validation(self) -> Tuple[str, ...]:
        return self.ids(Role.VALIDATION)

    @property
    def test(self) -> Tuple[str, ...]:
        return self.ids(Role.TEST)

    def all_ids(self) -> set:
        return {tile_id for ids in self.roles.values() for tile_id in ids}


def _draw(
    rows: Sequence[ManifestRow], role: Role, n_per_class: int, rng: np.random.Generator
) -> Tuple[Tuple[str, ...], Dict[str, int]]:
    chosen: List[str] = []
    counts = {}
    for label in CLASSES:
        candidates = sorted(row.tile_id for row in rows if row.label is label)
        if len(candidates) < n_per_class:
            raise InsufficientTiles(role.value, label.value, len(candidates), n_per_class)
        picks = rng.choice(len(candidates), size=n_per_class, replace=False)
        chosen.extend(sorted(candidates[i] for i in picks))
        counts[label.value] = n_per_class
    return tuple(chosen), counts


def sample_balanced(
    manifest: Sequence[ManifestRow], plan: FoldPlan, fold: int, n_per_class: int = N_PER_CLASS, seed: int = 0
) -> SampledSplit:
    """Draw n_per_class tiles of each class for every role, without replacement."""
    rng = np.random.default_rng([seed, fold])
    roles, counts = {}, {}
    for role in ROLE_ROTATION:
        patients = set(plan.patients_for(fold, role))
        rows = [row for row in manifest if row.patient_id in patients]
        roles[role], counts[role] = _draw(rows, role, n_per_class, rng)
    return SampledSplit(fold, seed, roles, counts)


def build_unseen_test(
    manifest: Sequence[ManifestRow],
    plan: FoldPlan,
    fold: int,
    used_ids: Sequence[str],
    n_per_class: int = N_PER_CLASS,
    seed: int = 0,
) -> SampledSplit:
    """Test-role tiles that were never used, nor share a source location with a used tile."""
    used = set(used_ids)
    by_id = {row.tile_id: row for row in manifest}
    used_sources = {by_id[tile_id].source for tile_id in used if tile_id in by_id}
    patients = set(plan.patients_for(fold, Role.TEST))
    rows = [
        row for row in manifest
        if row.patient_id in patients and row.tile_id not in used and row.source not in used_sources
    ]
    rng = np.random.default_rng([seed, fold, 1])
    ids, counts = _draw(rows, Role.TEST, n_per_class, rng)
    return SampledSplit(fold, seed, {Role.TEST: ids}, {Role.TEST: counts})


def split_frame(split: SampledSplit, manifest: Sequence[ManifestRow]) -> pd.DataFrame:
    """One row per sampled tile with its role, for the emitted split manifests."""
    by_id = {row.tile_id: row for row in manifest}
    records = [
        [tile_id, role.value, by_id[tile_id].patient_id, by_id[tile_id].label.value]
        for role, ids in split.roles.items()
        for tile_id in ids
    ]
    return pd.DataFrame(records, columns=["tile_id", "role", "patient_id", "label"])


# Recipes ------------------------------------------------------------------

class Fitted:
    def __init__(self, model, params: Optional[Dict[str, float]] = None):
        self.model = model
        self.params = params or {}

    def predict(self, X: np.ndarray) -> np.ndarray:
        labels, _ = predict(self.model, X)
        return labels


@dataclass(frozen=True)
class SvmRecipe:
    config: SvmConfig = field(default_factory=SvmConfig)
    tune_grid: Optional[Dict[str, Sequence[float]]] = None

    name = "svm"

    def fit(self, X, y, X_val, y_val, seed: int) -> Fitted:
        cfg = replace(self.config, seed=seed)
        if self.tune_grid:
            cfg, _ = tune_svm(X, y, X_val, y_val, self.tune_grid, cfg)
        return Fitted(train_svm(X, y, cfg), {"c": cfg.c, "gamma": cfg.gamma})


@dataclass(frozen=True)
class MlpRecipe:
    config: MlpConfig = field(default_factory=MlpConfig)

    name = "mlp"

    def fit(self, X, y, X_val, y_val, seed: int) -> Fitted:
        cfg = replace(self.config, seed=seed)
        result = train_mlp(X, (np.asarray(y) > 0).astype(int), cfg, X_val, (np.asarray(y_val) > 0).astype(int))
        return Fitted(result.selected, {"best_epoch": result.best_epoch})


class _Constant:
    def __init__(self, label: int):
        self.label = label

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(X).shape[0], self.label)


@dataclass(frozen=True)
class ConstantRecipe:
    """Always predicts one label; a baseline for balanced splits."""

    label: int = 1

    name = "constant"

    def fit(self, X, y, X_val, y_val, seed: int) -> _Constant:
        return _Constant(self.label)


def tune_svm(X, y, X_val, y_val, grid: Dict[str, Sequence[float]] = SVM_TUNE_GRID, base: SvmConfig = SvmConfig()):
    """Pick (C, gamma) by validation accuracy; ties keep the earlier grid entry."""
    best_cfg, best_accuracy, scores = base, -1.0, []
    for c in grid["C"]:
        for gamma in grid["gamma"]:
            cfg = replace(base, c=float(c), gamma=float(gamma))
            labels, _ = predict(train_svm(X, y, cfg), X_val)
            accuracy = float(np.mean(labels == np.asarray(y_val)))
            scores.append((cfg.c, cfg.gamma, accuracy))
            if accuracy > best_accuracy:
                best_cfg, best_accuracy = cfg, accuracy
    logger.info("SVM tuning picked C=%g gamma=%g (validation accuracy %.4f)", best_cfg.c, best_cfg.gamma, best_accuracy)
    return best_cfg, scores


# Reporting ----------------------------------------------------------------

def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int]) -> np.ndarray:
    """[[TN, FP], [FN, TP]] with +1 as the positive (Cribriform) class."""
    t = np.where(np.asarray(y_true) > 0, 1, -1)
    p = np.where(np.asarray(y_pred) > 0, 1, -1)
    return metrics.confusion_matrix(t, p, labels=[-1, 1])


def accuracy_of(confusion: np.ndarray) -> float:
    if not confusion.sum():
        return float("nan")
    return float(np.trace(confusion) / confusion.sum())


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    se: float


def summarize_accuracies(accuracies: Sequence[float]) -> Summary:
    """Mean, sample standard deviation and standard error (std / sqrt(k))."""
    values = np.asarray([a for a in accuracies if a == a], dtype=np.float64)
    if values.size == 0:
        return Summary(float("nan"), float("nan"), float("nan"))
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return Summary(float(values.mean()), std, std / np.sqrt(values.size))


@dataclass
class FoldResult:
    fold: int
    confusion: np.ndarray
    validation_accuracy: float
    unseen_accuracy: float = float("nan")
    params: Dict[str, float] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return accuracy_of(self.confusion)


@dataclass
class FoldReport:
    recipe: str
    folds: List[FoldResult]
    splits: List[SampledSplit] = field(default_factory=list)

    @property
    def test(self) -> Summary:
        return summarize_accuracies([f.accuracy for f in self.folds])

    @property
    def validation(self) -> Summary:
        return summarize_accuracies([f.validation_accuracy for f in self.folds])

    @property
    def unseen(self) -> Summary:
        return summarize_accuracies([f.unseen_accuracy for f in self.folds])

    @property
    def mean(self) -> float:
        return self.test.mean

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for f in self.folds:
            (tn, fp), (fn, tp) = f.confusion.tolist()
            rows.append([f"fold{f.fold + 1:02d}", f.accuracy, f.validation_accuracy, f.unseen_accuracy, tn, fp, fn, tp])
        for name in ("mean", "std", "se"):
            rows.append([
                name, getattr(self.test, name), getattr(self.validation, name),
                getattr(self.unseen, name), "", "", "", "",
            ])
        return pd.DataFrame(rows, columns=[
            "fold", "test_accuracy", "validation_accuracy", "unseen_accuracy", "tn", "fp", "fn", "tp",
        ])

    def to_table(self) -> str:
        return render_table(self.to_frame(), self.recipe)

    def to_json_lines(self) -> str:
        lines = []
        for f in self.folds:
            lines.append(json.dumps({
                "recipe": self.recipe, "fold": f.fold + 1, "test_accuracy": f.accuracy,
                "validation_accuracy": f.validation_accuracy, "unseen_accuracy": _json_number(f.unseen_accuracy),
                "confusion": f.confusion.tolist(), "params": f.params,
            }, sort_keys=True))
        test = self.test
        lines.append(json.dumps({
            "recipe": self.recipe, "summary": True, "mean": test.mean, "std": test.std, "se": test.se,
            "unseen_mean": _json_number(self.unseen.mean),
        }, sort_keys=True))
        return "\n".join(lines) + "\n"


def _json_number(value: float):
    return None if value != value else value


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (float, np.floating)):
        return "-" if value != value else f"{value:.4f}"
    return str(value)


def render_table(frame: pd.DataFrame, title: str = "") -> str:
    cells = [[_fmt(v) for v in row] for row in frame.itertuples(index=False)]
    headers = list(frame.columns)
    widths = [max([len(h)] + [len(r[i]) for r in cells]) for i, h in enumerate(headers)]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)
    return "\n".join(line.rstrip() for line in lines) + "\n"


def write_report(report: FoldReport, prefix: str) -> List[str]:
    """Human table (.txt), machine CSV (.csv) and JSON lines (.jsonl)."""
    paths = [f"{prefix}.txt", f"{prefix}.csv", f"{prefix}.jsonl"]
    test = report.test
    with atomic_output(paths[0]) as handle:
        handle.write(report.to_table())
        handle.write(f"\naccuracy {test.mean:.4f} +/- {test.se:.4f} (se), std {test.std:.4f}\n")
    write_frame(paths[1], report.to_frame())
    with atomic_output(paths[2]) as handle:
        handle.write(report.to_json_lines())
    return paths


def read_report_frame(path: str) -> pd.DataFrame:
    return read_frame(path)


def patient_counts(manifest: Sequence[ManifestRow], plan: Optional[FoldPlan] = None) -> pd.DataFrame:
    """Per-patient tile counts by class, with the patient's set when a plan is given."""
    frame = pd.DataFrame(
        [[row.patient_id, row.label.value] for row in manifest], columns=["patient_id", "label"]
    )
    table = pd.crosstab(frame["patient_id"], frame["label"]) if len(frame) else pd.DataFrame()
    for label in (Label.CRIBRIFORM.value, Label.NON_CRIBRIFORM.value):
        if label not in table.columns:
            table[label] = 0
    table = table[[Label.CRIBRIFORM.value, Label.NON_CRIBRIFORM.value]].reset_index()
    table["total"] = table[Label.CRIBRIFORM.value] + table[Label.NON_CRIBRIFORM.value]
    if plan is not None:
        table.insert(1, "set", [f"Set {plan.set_of(p) + 1}" for p in table["patient_id"]])
        table = table.sort_values(["set", "patient_id"], kind="stable").reset_index(drop=True)
    return table


# Cross-validation ---------------------------------------------------------

class _Rows:
    """Feature rows (optionally fused with embeddings) and labels by tile id."""

    def __init__(self, features: FeatureTable, manifest: Sequence[ManifestRow], embeddings: Sequence[EmbeddingTable]):
        self.features = features
        self.index = features.index
        self.labels = {row.tile_id: row.label for row in manifest}
        self.embeddings = list(embeddings)

    def matrix(self, ids: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        missing = [tile_id for tile_id in ids if tile_id not in self.index]
        if missing:
            raise ManifestError(f"No feature row for {len(missing)} sampled tiles, e.g. {missing[0]!r}")
        X = self.features.values[[self.index[tile_id] for tile_id in ids]]
        X = fuse_rows(X, ids, self.embeddings, self.features.values.shape[1])
        y = np.array([self.labels[tile_id].sign for tile_id in ids])
        return X, y


def run_cv(
    manifest: Sequence[ManifestRow],
    plan: FoldPlan,
    recipe,
    features: FeatureTable,
    seed: int = 0,
    n_per_class: int = N_PER_CLASS,
    embeddings: Sequence[EmbeddingTable] = (),
    unseen: bool = False,
    workers: Optional[int] = None,
) -> FoldReport:
    """Fit on Train, select on Validation, score on Test, for every fold in parallel."""
    rows = _Rows(features, manifest, embeddings)

    def run_fold(fold: int):
        try:
            split = sample_balanced(manifest, plan, fold, n_per_class, seed)
            X_tr, y_tr = rows.matrix(split.train)
            X_val, y_val = rows.matrix(split.validation)
            X_te, y_te = rows.matrix(split.test)
            fitted = recipe.fit(X_tr, y_tr, X_val, y_val, seed + fold)
            validation_accuracy = float(np.mean(fitted.predict(X_val) == y_val))
            result = FoldResult(
                fold, confusion_matrix(y_te, fitted.predict(X_te)), validation_accuracy,
                params=dict(getattr(fitted, "params", {})),
            )
            if unseen:
                extra = build_unseen_test(manifest, plan, fold, split.all_ids(), n_per_class, seed)
                X_un, y_un = rows.matrix(extra.test)
                result.unseen_accuracy = float(np.mean(fitted.predict(X_un) == y_un))
            logger.info("Fold %02d: test accuracy %.4f", fold + 1, result.accuracy)
            return result, split
        except CribraError as e:
            logger.error("Fold %02d failed: %s", fold + 1, e)
            raise

    with ThreadPoolExecutor(max_workers=min(FOLD_COUNT, workers or get_thread_count())) as pool:
        outcomes = list(pool.map(run_fold, range(FOLD_COUNT)))

    report = FoldReport(recipe.name, [r for r, _ in outcomes], [s for _, s in outcomes])
    test = report.test
    logger.info("%s: accuracy %.4f +/- %.4f (se)", recipe.name, test.mean, test.se)
    return report
