"""Dataset loading, synthesis, and deliberate corruption.

Datasets are immutable bundles of (features, labels, ids, corruption mask).
Corruption operators return new datasets and keep an exact boolean record of
which rows were altered; the detection experiments score against that mask,
so `corrupt` is the single source of ground truth for "this sample is bad".
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError, ParseError, SchemaError
from .numkit import RngState, gaussian_draw

LABEL_FLIP = "label-flip"
FEATURE_NOISE = "feature-noise"

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """N samples: features (N,F) float64, integer labels in [0, n_classes)."""

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    corruption_mask: np.ndarray
    n_classes: int

    def __post_init__(self):
        n = self.features.shape[0]
        if not (len(self.labels) == len(self.ids) == len(self.corruption_mask) == n):
            raise ParameterError("dataset arrays disagree on sample count")
        if n > 0 and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ParameterError("labels outside [0, n_classes)")
        if len(np.unique(self.ids)) != n:
            raise ParameterError("sample ids must be unique")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def row_of(self, sample_id: int) -> int:
        index = self._id_index()
        return index[int(sample_id)]

    def rows_of(self, sample_ids) -> np.ndarray:
        index = self._id_index()
        return np.array([index[int(i)] for i in sample_ids], dtype=np.int64)

    def _id_index(self) -> dict:
        cached = getattr(self, "_index_cache", None)
        if cached is None:
            cached = {int(i): r for r, i in enumerate(self.ids)}
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.ids, self.corruption_mask):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.n_classes).encode())
        return h.hexdigest()


def _make_dataset(features, labels, ids=None, mask=None, n_classes=None) -> Dataset:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if ids is None:
        ids = np.arange(n, dtype=np.int64)
    if mask is None:
        mask = np.zeros(n, dtype=bool)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 0
    return Dataset(features, labels, np.asarray(ids, dtype=np.int64),
                   np.asarray(mask, dtype=bool), n_classes)


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for a CSV file; `categorical` columns are one-hot encoded."""

    label_column: str
    categorical: tuple = ()
    id_column: str | None = None
    mask_column: str | None = None
    standardize: bool = True


#: Schema of the CSV files this package writes itself (already preprocessed).
NATIVE_SCHEMA = CsvSchema(label_column="label", id_column="id",
                          mask_column="corrupted", standardize=False)


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Load a delimited text file into a Dataset.

    Categorical columns become one-hot blocks (category order sorted for
    determinism). With `schema.standardize`, every feature column is scaled
    to zero mean / unit variance using its own statistics; constant columns
    get their std clamped to 1 so they standardize to all-zeros.
    """
    import csv

    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = [row for row in reader if row]

    if not rows:
        raise ParseError(f"{path}: no data rows")
    if schema.label_column not in header:
        raise SchemaError(f"{path}: missing label column {schema.label_column!r}")
    for col in schema.categorical:
        if col not in header:
            raise SchemaError(f"{path}: missing categorical column {col!r}")
    for col in (schema.id_column, schema.mask_column):
        if col is not None and col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")

    col_idx = {name: i for i, name in enumerate(header)}
    special = {schema.label_column, schema.id_column, schema.mask_column} - {None}
    numeric_cols = [c for c in header if c not in special and c not in schema.categorical]

    n = len(rows)
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r}: expected {len(header)} fields, got {len(row)}")

    def parse_float(col, r):
        cell = rows[r][col_idx[col]]
        try:
            return float(cell)
        except ValueError:
            raise ParseError(f"{path}: row {r}: non-numeric value {cell!r} in column {col!r}") from None

    blocks = []
    for col in numeric_cols:
        blocks.append(np.array([parse_float(col, r) for r in range(n)])[:, None])
    for col in schema.categorical:
        values = [rows[r][col_idx[col]] for r in range(n)]
        categories = sorted(set(values))
        onehot = np.zeros((n, len(categories)))
        pos = {c: j for j, c in enumerate(categories)}
        for r, v in enumerate(values):
            onehot[r, pos[v]] = 1.0
        blocks.append(onehot)
    if not blocks:
        raise SchemaError(f"{path}: no feature columns")
    features = np.hstack(blocks)

    if schema.standardize:
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std[std == 0.0] = 1.0  # constant column -> all zeros, not NaN
        features = (features - mean) / std

    raw_labels = [rows[r][col_idx[schema.label_column]] for r in range(n)]
    try:
        labels = np.array([int(v) for v in raw_labels], dtype=np.int64)
    except ValueError:
        categories = sorted(set(raw_labels))
        mapping = {c: j for j, c in enumerate(categories)}
        labels = np.array([mapping[v] for v in raw_labels], dtype=np.int64)
    if labels.min() < 0:
        raise ParseError(f"{path}: negative integer label")

    ids = None
    if schema.id_column is not None:
        try:
            ids = np.array([int(rows[r][col_idx[schema.id_column]]) for r in range(n)],
                           dtype=np.int64)
        except ValueError as e:
            raise ParseError(f"{path}: non-integer id: {e}") from None
    mask = None
    if schema.mask_column is not None:
        truthy = {"1", "true", "True"}
        mask = np.array([rows[r][col_idx[schema.mask_column]] in truthy for r in range(n)])

    return _make_dataset(features, labels, ids, mask)


def save_csv(dataset: Dataset, path) -> None:
    """Write the native CSV form (id, label, corrupted, f0..fF-1).

    Floats are written with repr so load_csv(path, NATIVE_SCHEMA) round-trips
    bit-exactly.
    """
    import csv

    header = ["id", "label", "corrupted"] + [f"f{j}" for j in range(dataset.n_features)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in range(dataset.n):
            row = [int(dataset.ids[r]), int(dataset.labels[r]),
                   int(dataset.corruption_mask[r])]
            row.extend(repr(float(v)) for v in dataset.features[r])
            w.writerow(row)


def _read_be32(f, path):
    data = f.read(4)
    if len(data) != 4:
        raise FormatError(f"{path}: truncated IDX header")
    return struct.unpack(">I", data)[0]


def _idx_open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0,1], images flattened."""
    with _idx_open(images_path) as f:
        magic = _read_be32(f, images_path)
        if magic != _IDX_IMAGE_MAGIC:
            raise FormatError(f"{images_path}: bad image magic {magic:#010x}")
        count = _read_be32(f, images_path)
        n_rows = _read_be32(f, images_path)
        n_cols = _read_be32(f, images_path)
        raw = f.read(count * n_rows * n_cols)
        if len(raw) != count * n_rows * n_cols:
            raise FormatError(f"{images_path}: truncated pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, n_rows * n_cols)

    with _idx_open(labels_path) as f:
        magic = _read_be32(f, labels_path)
        if magic != _IDX_LABEL_MAGIC:
            raise FormatError(f"{labels_path}: bad label magic {magic:#010x}")
        label_count = _read_be32(f, labels_path)
        raw = f.read(label_count)
        if len(raw) != label_count:
            raise FormatError(f"{labels_path}: truncated label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if label_count != count:
        raise FormatError(f"IDX pair mismatch: {count} images vs {label_count} labels")
    return _make_dataset(images.astype(np.float64) / 255.0, labels)


def synth_gaussian_blobs(rng: RngState, n_per_class: int, n_classes: int,
                         dim: int, separation: float) -> Dataset:
    """Unit-covariance Gaussian blobs, class c centered at separation * e_c."""
    if n_per_class <= 0 or n_classes <= 0 or dim <= 0:
        raise ParameterError("blob counts must be positive")
    if separation <= 0:
        raise ParameterError(f"separation must be > 0, got {separation}")
    if dim < n_classes:
        raise ParameterError(f"dim={dim} < n_classes={n_classes}: no axis to center class on")
    features = np.empty((n_per_class * n_classes, dim))
    labels = np.empty(n_per_class * n_classes, dtype=np.int64)
    for c in range(n_classes):
        block = gaussian_draw(rng.derive(c), n_per_class * dim, 1.0).reshape(n_per_class, dim)
        block[:, c] += separation
        features[c * n_per_class:(c + 1) * n_per_class] = block
        labels[c * n_per_class:(c + 1) * n_per_class] = c
    return _make_dataset(features, labels, n_classes=n_classes)


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption pass: flip k labels, or add N(0, sigma^2) feature noise to k rows."""

    kind: str
    k: int
    rng: RngState
    source_class: int | None = None
    target_class: int | None = None
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in (LABEL_FLIP, FEATURE_NOISE):
            raise ParameterError(f"unknown corruption kind {self.kind!r}")
        if self.k < 0:
            raise ParameterError("k must be >= 0")
        if self.kind == LABEL_FLIP:
            if self.source_class is None or self.target_class is None:
                raise ParameterError("label-flip needs source_class and target_class")
            if self.source_class == self.target_class:
                raise ParameterError("label-flip source and target must differ")
        if self.sigma < 0:
            raise ParameterError("sigma must be >= 0")


def corrupt(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    """Return a copy with exactly spec.k rows altered and masked.

    Rows are chosen uniformly without replacement from eligible rows
    (matching source class for flips; never from already-masked rows, so
    stacked corruption passes mark k1+k2 distinct samples). The input
    dataset is not modified and ids keep their order.
    """
    if spec.k > dataset.n:
        raise ParameterError(f"k={spec.k} exceeds dataset size {dataset.n}")
    eligible = ~dataset.corruption_mask
    if spec.kind == LABEL_FLIP:
        if spec.target_class >= dataset.n_classes or spec.source_class >= dataset.n_classes:
            raise ParameterError("flip classes outside [0, n_classes)")
        eligible &= dataset.labels == spec.source_class
    candidates = np.flatnonzero(eligible)
    if len(candidates) < spec.k:
        raise ParameterError(
            f"only {len(candidates)} eligible rows for {spec.kind}, need {spec.k}")

    g = spec.rng.derive(0).generator()
    chosen = np.sort(g.choice(candidates, size=spec.k, replace=False))

    features = dataset.features.copy()
    labels = dataset.labels.copy()
    mask = dataset.corruption_mask.copy()
    if spec.kind == LABEL_FLIP:
        labels[chosen] = spec.target_class
    else:
        if spec.k > 0:
            noise = gaussian_draw(spec.rng.derive(1), spec.k * dataset.n_features,
                                  spec.sigma).reshape(spec.k, dataset.n_features)
            features[chosen] += noise
    mask[chosen] = True
    return Dataset(features, labels, dataset.ids.copy(), mask, dataset.n_classes)


def corruption_manifest(before: Dataset, after: Dataset) -> list:
    """List {id, kind, original-label} for every sample newly masked in `after`."""
    if before.n != after.n or not np.array_equal(before.ids, after.ids):
        raise ParameterError("corruption manifest needs datasets over the same ids")
    entries = []
    new = after.corruption_mask & ~before.corruption_mask
    for r in np.flatnonzero(new):
        kind = LABEL_FLIP if before.labels[r] != after.labels[r] else FEATURE_NOISE
        entries.append({"id": int(before.ids[r]), "kind": kind,
                        "original_label": int(before.labels[r])})
    entries.sort(key=lambda e: e["id"])
    return entries


def write_corruption_manifest(entries: list, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
        f.write("\n")


def read_corruption_manifest(path) -> list:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
