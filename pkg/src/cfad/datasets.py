"""Tabular CSV ingestion (Adult/COMPAS-shaped), preprocessing, splits and the
canonical processed CSV format shared by every stage."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .numerics import make_rng
from .scm import Dataset

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r} as a number")
        self.row, self.column, self.value = row, column, value


class SizingError(ValueError):
    pass


MISSING = {"", "?", "NA", "nan", "NaN", "null"}


@dataclass
class Column:
    name: str
    kind: str  # continuous | categorical | sensitive | label | ignore


@dataclass
class DatasetSchema:
    columns: list[Column]
    sensitive_positive: list[str]
    sensitive_negative: list[str]
    label_anomaly: list[str]
    n_train_normal: int
    n_test_normal: int
    n_test_anomaly: int
    name: str = "custom"

    def __post_init__(self):
        kinds = [c.kind for c in self.columns]
        for k in kinds:
            if k not in {"continuous", "categorical", "sensitive", "label", "ignore"}:
                raise SchemaError(f"unknown column kind {k!r}")
        if kinds.count("sensitive") != 1:
            raise SchemaError("schema needs exactly one sensitive column")
        if kinds.count("label") != 1:
            raise SchemaError("schema needs exactly one label column")

    @property
    def sensitive(self) -> str:
        return next(c.name for c in self.columns if c.kind == "sensitive")

    @property
    def label(self) -> str:
        return next(c.name for c in self.columns if c.kind == "label")

    def features(self) -> list[Column]:
        return [c for c in self.columns if c.kind in ("continuous", "categorical")]

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetSchema":
        cols = [Column(c["name"], c["kind"]) for c in doc["columns"]]
        split = doc["splits"]
        return cls(cols, [str(v) for v in doc["sensitive"]["positive"]],
                   [str(v) for v in doc["sensitive"]["negative"]],
                   [str(v) for v in doc["anomaly"]["values"]],
                   int(split["train_normal"]), int(split["test_normal"]), int(split["test_anomaly"]),
                   doc.get("name", "custom"))

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def builtin(cls, name: str) -> "DatasetSchema":
        text = resources.files("cfad.schemas").joinpath(f"{name}.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))


@dataclass
class Encoder:
    """Frozen preprocessing statistics: min-max ranges and category vocabularies."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    vocab: dict[str, list[str]] = field(default_factory=dict)

    def feature_names(self, schema: DatasetSchema) -> list[str]:
        names = []
        for c in schema.features():
            if c.kind == "continuous":
                names.append(c.name)
            else:
                names.extend(f"{c.name}={v}" for v in self.vocab[c.name])
        return names

    def to_dict(self) -> dict:
        return {"ranges": {k: list(v) for k, v in self.ranges.items()}, "vocab": self.vocab}

    @classmethod
    def from_dict(cls, doc: dict) -> "Encoder":
        return cls({k: tuple(v) for k, v in doc["ranges"].items()}, dict(doc["vocab"]))


@dataclass
class RawTable:
    rows: list[dict[str, str]]
    dropped: int = 0


def read_rows(path, schema: DatasetSchema) -> RawTable:
    """Read the CSV and drop rows with a missing value in any used column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        header = reader.fieldnames or []
        used = [c.name for c in schema.columns if c.kind != "ignore"]
        missing_cols = [n for n in used if n not in header]
        if missing_cols:
            raise SchemaError(f"CSV header lacks columns {missing_cols}")
        rows, dropped = [], 0
        for row in reader:
            vals = {n: (row[n] or "").strip() for n in used}
            if any(v in MISSING for v in vals.values()):
                dropped += 1
                continue
            rows.append(vals)
    if dropped:
        log.warning("dropped %d rows with missing values", dropped)
    return RawTable(rows, dropped)


def _number(row_no: int, name: str, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(row_no, name, text) from None


def fit_encoder(rows: list[dict], schema: DatasetSchema) -> Encoder:
    enc = Encoder()
    for c in schema.features():
        if c.kind == "continuous":
            vals = [_number(i, c.name, r[c.name]) for i, r in enumerate(rows)]
            enc.ranges[c.name] = (min(vals), max(vals))
        else:
            enc.vocab[c.name] = sorted({r[c.name] for r in rows})
    return enc


def encode_rows(rows: list[dict], schema: DatasetSchema, enc: Encoder) -> Dataset:
    """Min-max scale continuous columns, one-hot categoricals, map s to +-1, label to y."""
    pos, neg = set(schema.sensitive_positive), set(schema.sensitive_negative)
    anomaly = set(schema.label_anomaly)
    s, y, feats = [], [], []
    unknown = 0
    for i, r in enumerate(rows):
        sv = r[schema.sensitive]
        if sv in pos:
            s.append(1.0)
        elif sv in neg:
            s.append(-1.0)
        else:
            raise SchemaError(f"row {i}: sensitive value {sv!r} is in neither group")
        y.append(1 if r[schema.label] in anomaly else 0)
        vec = []
        for c in schema.features():
            if c.kind == "continuous":
                lo, hi = enc.ranges[c.name]
                v = _number(i, c.name, r[c.name])
                vec.append((v - lo) / (hi - lo) if hi > lo else 0.0)
            else:
                voc = enc.vocab[c.name]
                hot = [0.0] * len(voc)
                if r[c.name] in voc:
                    hot[voc.index(r[c.name])] = 1.0
                else:
                    unknown += 1
                vec.extend(hot)
        feats.append(vec)
    if unknown:
        log.warning("%d unknown categorical values encoded as all-zero", unknown)
    m = len(enc.feature_names(schema))
    return Dataset(np.array(s), np.array(feats).reshape(len(rows), m), np.array(y, dtype=np.int64))


def _anomaly_mask(rows, schema) -> np.ndarray:
    anomaly = set(schema.label_anomaly)
    return np.array([r[schema.label] in anomaly for r in rows], dtype=bool)


def make_splits(rows: list[dict], schema: DatasetSchema, rng: np.random.Generator
                ) -> tuple[list[int], list[int]]:
    """Row indices for train (normals only) and test (normals + anomalies)."""
    is_anom = _anomaly_mask(rows, schema)
    normals = np.flatnonzero(~is_anom)
    anomalies = np.flatnonzero(is_anom)
    need_n = schema.n_train_normal + schema.n_test_normal
    if len(normals) < need_n or len(anomalies) < schema.n_test_anomaly:
        raise SizingError(
            f"need {need_n} normal and {schema.n_test_anomaly} anomalous rows, "
            f"have {len(normals)} and {len(anomalies)}")
    normals = rng.permutation(normals)
    anomalies = rng.permutation(anomalies)
    train = sorted(normals[:schema.n_train_normal].tolist())
    test = sorted(normals[schema.n_train_normal:need_n].tolist()
                  + anomalies[:schema.n_test_anomaly].tolist())
    return train, test


def load_csv(path, schema: DatasetSchema, seed: int = 0) -> tuple[Dataset, Dataset, Encoder]:
    """Read, split, fit the encoder on the training rows and encode both splits."""
    table = read_rows(path, schema)
    train_idx, test_idx = make_splits(table.rows, schema, make_rng(seed, "split"))
    train_rows = [table.rows[i] for i in train_idx]
    test_rows = [table.rows[i] for i in test_idx]
    enc = fit_encoder(train_rows, schema)
    train = encode_rows(train_rows, schema, enc)
    test = encode_rows(test_rows, schema, enc)
    train.ids = np.asarray(train_idx)
    test.ids = np.asarray(test_idx)
    meta = {"source": str(path), "dropped_rows": table.dropped,
            "features": enc.feature_names(schema), "encoder": enc.to_dict()}
    train.meta, test.meta = dict(meta), dict(meta)
    return train, test, enc


# ---------------------------------------------------------------------------
# Canonical processed CSV
# ---------------------------------------------------------------------------

def write_dataset_csv(path, dataset: Dataset, cf_of=None, header_comment: str | None = None) -> None:
    """Columns: id, s, x_0..x_{m-1}, y [, u_0..u_{m-1}] [, cf_of]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = dataset.m
    cols = ["id", "s"] + [f"x_{k}" for k in range(m)] + ["y"]
    if dataset.u is not None:
        cols += [f"u_{k}" for k in range(m)]
    if cf_of is not None:
        cols.append("cf_of")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for n in range(len(dataset)):
            row = [int(dataset.ids[n]), repr(float(dataset.s[n]))]
            row += [repr(float(v)) for v in dataset.x[n]]
            row.append("" if dataset.y is None else int(dataset.y[n]))
            if dataset.u is not None:
                row += [repr(float(v)) for v in dataset.u[n]]
            if cf_of is not None:
                row.append(int(cf_of[n]))
            w.writerow(row)


def read_dataset_csv(path, nodes=None) -> tuple[Dataset, np.ndarray | None]:
    """Inverse of ``write_dataset_csv``; returns (dataset, cf_of or None)."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    rows = list(reader)
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    ucols = [i for i, h in enumerate(header) if h.startswith("u_")]
    iy = header.index("y")
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    s = np.array([float(r[1]) for r in rows])
    x = np.array([[float(r[i]) for i in xcols] for r in rows]).reshape(len(rows), len(xcols))
    ys = [r[iy] for r in rows]
    y = None if any(v == "" for v in ys) else np.array([int(v) for v in ys])
    u = np.array([[float(r[i]) for i in ucols] for r in rows]).reshape(len(rows), len(ucols)) if ucols else None
    cf_of = None
    if "cf_of" in header:
        k = header.index("cf_of")
        cf_of = np.array([int(r[k]) for r in rows], dtype=np.int64)
    return Dataset(s, x, y, u, nodes, ids), cf_of
