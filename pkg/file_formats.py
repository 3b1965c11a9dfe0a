"""File formats shared by the command line surface.

Every CSV written here is UTF-8, comma separated, strings quoted, dot decimal,
and starts with a ``# format_version=N`` comment line. Writes go to a
temporary file in the destination directory followed by an atomic rename.
"""

import csv
import io
import json
import logging
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import FormatVersionMismatch, ManifestError, WidthMismatch

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_COLUMNS = ["tile_path", "tile_id", "patient_id", "label", "source_id", "dx", "dy", "theta"]
FEATURE_META_COLUMNS = ["id", "patient_id", "label", "valid"]


class Label(str, Enum):
    CRIBRIFORM = "cribriform"
    NON_CRIBRIFORM = "non_cribriform"
    UNLABELED = "unlabeled"

    @property
    def sign(self) -> int:
        """+1 for Cribriform, -1 for NonCribriform, 0 when unlabeled."""
        return {"cribriform": 1, "non_cribriform": -1}.get(self.value, 0)

    @property
    def class_index(self) -> int:
        """MLP class index: Cribriform=1, NonCribriform=0."""
        if self is Label.UNLABELED:
            raise ValueError("Unlabeled tiles have no class index")
        return 1 if self is Label.CRIBRIFORM else 0

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text)
        except ValueError:
            raise ManifestError(
                f"Label {text!r} is not one of cribriform, non_cribriform, unlabeled"
            ) from None


@dataclass(frozen=True)
class ManifestRow:
    tile_path: str
    tile_id: str
    patient_id: str
    label: Label = Label.UNLABELED
    source_id: str = ""
    dx: Optional[int] = None
    dy: Optional[int] = None
    theta: Optional[float] = None

    @property
    def source(self) -> str:
        """Source location id; a non-augmented tile is its own source."""
        return self.source_id or self.tile_id

    @property
    def is_augmented(self) -> bool:
        return self.dx is not None


@contextmanager
def atomic_output(path: str, mode: str = "w") -> Iterator[io.IOBase]:
    """Yield a handle to a temp file that replaces ``path`` only on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        kwargs = {"newline": "", "encoding": "utf-8"} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _write_version(handle, extra: str = "") -> None:
    handle.write(f"# format_version={FORMAT_VERSION}{extra}\n")


def _read_version(path: str) -> str:
    with open(path, encoding="utf-8") as handle:
        first = handle.readline().strip()
    if not first.startswith("# format_version="):
        raise FormatVersionMismatch(f"{path} has no format_version line")
    version = first.split("=", 1)[1].split()[0]
    if version != str(FORMAT_VERSION):
        raise FormatVersionMismatch(f"{path} is format_version {version}, expected {FORMAT_VERSION}")
    return first


def write_frame(path: str, frame: pd.DataFrame) -> None:
    """Write a data frame as a versioned CSV (9 significant digits)."""
    with atomic_output(path) as handle:
        _write_version(handle)
        frame.to_csv(handle, index=False, float_format="%.9g", quoting=csv.QUOTE_NONNUMERIC)


def read_frame(path: str) -> pd.DataFrame:
    _read_version(path)
    return pd.read_csv(path, comment=None, skiprows=1, dtype=str, keep_default_na=False)


def _optional_int(text: str) -> Optional[int]:
    return int(float(text)) if str(text).strip() != "" else None


def _optional_float(text: str) -> Optional[float]:
    return float(text) if str(text).strip() != "" else None


def read_manifest(path: str) -> List[ManifestRow]:
    """Parse and validate a manifest CSV."""
    frame = read_frame(path)
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"{path} lacks columns {missing}")

    rows = []
    seen = set()
    base = os.path.dirname(os.path.abspath(path))
    for record in frame.to_dict("records"):
        tile_id = record["tile_id"]
        if tile_id in seen:
            raise ManifestError(f"Duplicate tile_id {tile_id!r} in {path}")
        seen.add(tile_id)
        tile_path = record["tile_path"]
        if tile_path and not os.path.isabs(tile_path):
            tile_path = os.path.join(base, tile_path)
        rows.append(ManifestRow(
            tile_path=tile_path,
            tile_id=tile_id,
            patient_id=record["patient_id"],
            label=Label.parse(record["label"]),
            source_id=record["source_id"],
            dx=_optional_int(record["dx"]),
            dy=_optional_int(record["dy"]),
            theta=_optional_float(record["theta"]),
        ))
    return rows


def write_manifest(path: str, rows: Sequence[ManifestRow], relative_to: str = "") -> None:
    records = []
    for row in rows:
        tile_path = row.tile_path
        if relative_to and tile_path:
            tile_path = os.path.relpath(tile_path, relative_to)
        records.append({
            "tile_path": tile_path,
            "tile_id": row.tile_id,
            "patient_id": row.patient_id,
            "label": row.label.value,
            "source_id": row.source_id,
            "dx": "" if row.dx is None else str(row.dx),
            "dy": "" if row.dy is None else str(row.dy),
            "theta": "" if row.theta is None else f"{row.theta:g}",
        })
    write_frame(path, pd.DataFrame(records, columns=MANIFEST_COLUMNS))


@dataclass(frozen=True)
class Origin:
    """One source location inside a context image."""

    source_id: str
    x: float
    y: float
    patient_id: str
    label: Label


ORIGIN_COLUMNS = ["source_id", "x_c", "y_c", "patient_id", "label"]
REJECTION_COLUMNS = ["source_id", "dx", "dy", "theta", "reason"]


def read_origins(path: str) -> List[Origin]:
    frame = read_frame(path)
    missing = [c for c in ORIGIN_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"{path} lacks columns {missing}")
    return [
        Origin(r["source_id"], float(r["x_c"]), float(r["y_c"]), r["patient_id"], Label.parse(r["label"]))
        for r in frame.to_dict("records")
    ]


def write_origins(path: str, origins: Sequence[Origin]) -> None:
    write_frame(path, pd.DataFrame(
        [[o.source_id, o.x, o.y, o.patient_id, o.label.value] for o in origins],
        columns=ORIGIN_COLUMNS,
    ))


@dataclass
class FeatureTable:
    """Feature CSV contents: per-tile metadata plus a numeric matrix."""

    ids: List[str]
    patient_ids: List[str]
    labels: List[Label]
    valid: List[bool]
    columns: List[str]
    values: np.ndarray

    def row(self, tile_id: str) -> np.ndarray:
        return self.values[self.index[tile_id]]

    @property
    def index(self) -> Dict[str, int]:
        return {tile_id: i for i, tile_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)


def feature_records(ids, patient_ids, labels, valid, columns, values) -> pd.DataFrame:
    frame = pd.DataFrame(np.asarray(values, dtype=float).reshape(len(ids), len(columns)), columns=columns)
    frame.insert(0, "valid", [1 if v else 0 for v in valid])
    frame.insert(0, "label", [Label(l).value for l in labels])
    frame.insert(0, "patient_id", list(patient_ids))
    frame.insert(0, "id", list(ids))
    return frame


def write_features(path: str, table: FeatureTable) -> None:
    write_frame(path, feature_records(
        table.ids, table.patient_ids, table.labels, table.valid, table.columns, table.values
    ))


def read_features(path: str) -> FeatureTable:
    frame = read_frame(path)
    columns = [c for c in frame.columns if c not in FEATURE_META_COLUMNS]
    values = frame[columns].astype(float).to_numpy() if len(frame) else np.zeros((0, len(columns)))
    return FeatureTable(
        ids=list(frame["id"]),
        patient_ids=list(frame["patient_id"]),
        labels=[Label.parse(v) for v in frame["label"]],
        valid=[v in ("1", "1.0", "True", "true") for v in frame["valid"]],
        columns=columns,
        values=values,
    )


class EmbeddingTable:
    """A precomputed deep-embedding file: ``#dim=D`` then ``tile_id,v1..vD``."""

    def __init__(self, path: str, dim: int, vectors: Dict[str, np.ndarray]):
        self.path = path
        self.dim = dim
        self.vectors = vectors

    def __contains__(self, tile_id: str) -> bool:
        return tile_id in self.vectors

    def __getitem__(self, tile_id: str) -> np.ndarray:
        return self.vectors[tile_id]

    @classmethod
    def load(cls, path: str) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as handle:
            header = handle.readline().strip()
        if not header.startswith("#dim="):
            raise WidthMismatch(f"{path} does not start with a #dim=D line")
        try:
            dim = int(header.split("=", 1)[1])
        except ValueError:
            raise WidthMismatch(f"{path}: bad header {header!r}") from None
        try:
            frame = pd.read_csv(path, skiprows=1, header=None, dtype={0: str}, keep_default_na=False)
        except pd.errors.EmptyDataError:
            logger.warning("%s holds no embedding rows", path)
            return cls(path, dim, {})
        vectors: Dict[str, np.ndarray] = {}
        for record in frame.itertuples(index=False):
            tile_id = str(record[0])
            try:
                values = np.asarray(record[1:], dtype=float)
            except ValueError:
                raise WidthMismatch(f"{path}: row {tile_id!r} has non-numeric values") from None
            if values.shape[0] != dim:
                raise WidthMismatch(f"{path}: row {tile_id!r} has {values.shape[0]} values, header says {dim}")
            if tile_id in vectors:
                raise WidthMismatch(f"{path}: duplicate tile id {tile_id!r}")
            vectors[tile_id] = values
        return cls(path, dim, vectors)

    @staticmethod
    def write(path: str, vectors: Dict[str, Iterable[float]], dim: int) -> None:
        with atomic_output(path) as handle:
            handle.write(f"#dim={dim}\n")
            writer = csv.writer(handle)
            for tile_id in sorted(vectors):
                values = [f"{v:.9g}" for v in vectors[tile_id]]
                if len(values) != dim:
                    raise WidthMismatch(f"Vector for {tile_id!r} has width {len(values)}, expected {dim}")
                writer.writerow([tile_id, *values])


def write_json(path: str, payload: dict) -> None:
    with atomic_output(path) as handle:
        json.dump(payload, handle, indent=1, sort_keys=True)
        handle.write("\n")


def read_json(path: str) -> dict:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path} is format_version {version}, expected {FORMAT_VERSION}")
    return payload


def append_log_rows(path: str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> int:
    """Write a small versioned CSV log (error logs, rejection logs)."""
    rows = list(rows)
    with atomic_output(path) as handle:
        _write_version(handle)
        writer = csv.writer(handle, quoting=csv.QUOTE_NONNUMERIC)
        writer.writerow(list(header))
        writer.writerows(rows)
    return len(rows)
