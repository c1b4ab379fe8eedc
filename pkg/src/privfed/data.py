"""Datasets, file loaders, and client sharding.

Supported sources: the classic big-endian IDX image/label pair, CSV
tables with a label column, and seeded synthetic Gaussian blobs for
desk-scale runs.  Features are float64 and scaled into [0, 1] (images
by /255, tables by per-column min-max).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .streams import RandomStream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataFormatError(Exception):
    """Base class for malformed input files."""


class MagicNumberError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class EmptyFileError(DataFormatError):
    pass


class MissingColumnError(DataFormatError):
    pass


class NonNumericCellError(DataFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    features: np.ndarray  # (n, *feature_shape), float64
    labels: np.ndarray  # (n,), int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.features.shape[1:]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.name, self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True, eq=False)
class ClientShard:
    """One client's local examples.  Never empty."""

    client_id: int
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.shape[0] == 0:
            raise ValueError(f"client {self.client_id} has an empty shard")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature/label count mismatch in shard")

    def __len__(self) -> int:
        return self.features.shape[0]


def _read_exact(f, count: int, path: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"{path}: expected {count} more bytes, got {len(data)}")
    return data


def load_idx(images_path: str, labels_path: str, name: str = "idx") -> Dataset:
    """Load an IDX image file plus its label file.

    Pixel values are scaled to [0, 1]; images come out HxWx1.  The class
    count is inferred from the label range.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise MagicNumberError(f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")
        raw = _read_exact(f, count * rows * cols, images_path)
        if f.read(1):
            raise TruncatedFileError(f"{images_path}: trailing bytes after {count} images")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols, 1)

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise MagicNumberError(f"{labels_path}: magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")
        raw = _read_exact(f, label_count, labels_path)
        if f.read(1):
            raise TruncatedFileError(f"{labels_path}: trailing bytes after {label_count} labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise CountMismatchError(f"{count} images vs {label_count} labels")
    return Dataset(name, images.astype(np.float64) / 255.0, labels, int(labels.max()) + 1)


def load_csv(path: str, label_column: str, categorical: tuple[str, ...] = (),
             name: str = "csv") -> Dataset:
    """Load a CSV table with a header row.

    Columns listed in `categorical` are one-hot encoded (categories in
    sorted order); every other feature column must parse as a number.
    All encoded features are min-max scaled per column into [0, 1]
    (constant columns map to 0).  Labels are the sorted distinct values
    of the label column, encoded as 0..Z-1.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise EmptyFileError(f"{path}: no header row")
    header, body = rows[0], rows[1:]
    if not body:
        raise EmptyFileError(f"{path}: no data rows")
    if label_column not in header:
        raise MissingColumnError(f"{path}: no column named {label_column!r}")
    for col in categorical:
        if col not in header:
            raise MissingColumnError(f"{path}: no categorical column named {col!r}")
    width = len(header)
    for i, row in enumerate(body):
        if len(row) != width:
            raise CountMismatchError(f"{path}: row {i + 2} has {len(row)} cells, header has {width}")

    label_idx = header.index(label_column)
    cat_set = set(categorical)
    columns: list[np.ndarray] = []
    for j, col_name in enumerate(header):
        if j == label_idx:
            continue
        cells = [row[j].strip() for row in body]
        if col_name in cat_set:
            values = sorted(set(cells))
            lookup = {v: k for k, v in enumerate(values)}
            onehot = np.zeros((len(cells), len(values)))
            onehot[np.arange(len(cells)), [lookup[c] for c in cells]] = 1.0
            columns.append(onehot)
        else:
            try:
                numeric = np.array([float(c) for c in cells])
            except ValueError as exc:
                raise NonNumericCellError(f"{path}: column {col_name!r} is not numeric: {exc}") from None
            columns.append(numeric[:, None])

    features = np.concatenate(columns, axis=1)
    lo, hi = features.min(axis=0), features.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    features = (features - lo) / span

    label_cells = [row[label_idx].strip() for row in body]
    classes = sorted(set(label_cells))
    lookup = {v: k for k, v in enumerate(classes)}
    labels = np.array([lookup[c] for c in label_cells], dtype=np.int64)
    return Dataset(name, features, labels, len(classes))


def synthetic_blobs(num_classes: int, per_class: int, dim: int, separation: float,
                    seed: int, name: str = "blobs") -> Dataset:
    """Isotropic unit-variance Gaussian clusters, one per class.

    Class z is centered at (separation / sqrt(2)) * e_z, so every pair
    of centers is exactly `separation` apart.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if dim < num_classes:
        raise ValueError(f"dim must be >= num_classes to place {num_classes} centers")
    if separation <= 0:
        raise ValueError("separation must be positive")
    gen = RandomStream(seed).child("blobs").generator()
    features = gen.normal(size=(num_classes, per_class, dim))
    offset = separation / np.sqrt(2.0)
    for z in range(num_classes):
        features[z, :, z] += offset
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(name, features.reshape(num_classes * per_class, dim), labels, num_classes)


def rescale_unit(ds: Dataset) -> Dataset:
    """Affinely map all features into [0, 1] with one global min/max."""
    lo, hi = ds.features.min(), ds.features.max()
    span = (hi - lo) if hi > lo else 1.0
    return Dataset(ds.name, (ds.features - lo) / span, ds.labels, ds.num_classes)


def make_shards(ds: Dataset, clients: int, per_client: int, classes_per_client: int,
                seed: int, disjoint: bool = True) -> list[ClientShard]:
    """Split a dataset into per-client shards with a capped class diversity.

    Client k draws from classes perm[(k * c + j) % Z] for j < c, where
    perm is a seeded permutation of the classes, so class slots rotate
    evenly across clients.  With disjoint=True examples are consumed
    from shared per-class pools and never repeat across clients; with
    disjoint=False each client samples its own examples independently
    (clients may overlap, and per_client = len(ds) with c = Z gives
    every client a full copy).
    """
    z = ds.num_classes
    c = classes_per_client
    if clients < 1:
        raise ValueError("need at least one client")
    if per_client < 1:
        raise ValueError("per_client must be >= 1")
    if not 1 <= c <= z:
        raise ValueError(f"classes_per_client must be in [1, {z}], got {c}")
    if per_client < c:
        raise ValueError("per_client must be >= classes_per_client")

    stream = RandomStream(seed).child("shards")
    class_perm = stream.child("class-order").permutation(z)
    pools = []
    for cls in range(z):
        idx = np.flatnonzero(ds.labels == cls)
        pools.append(idx[stream.child("pool", cls).permutation(len(idx))])
    cursor = [0] * z

    base, extra = divmod(per_client, c)
    shards = []
    for k in range(clients):
        take: list[np.ndarray] = []
        for j in range(c):
            cls = int(class_perm[(k * c + j) % z])
            want = base + (1 if j < extra else 0)
            pool = pools[cls]
            if disjoint:
                if cursor[cls] + want > len(pool):
                    raise ValueError(
                        f"class {cls} exhausted: client {k} wants {want} more examples, "
                        f"{len(pool) - cursor[cls]} left"
                    )
                take.append(pool[cursor[cls] : cursor[cls] + want])
                cursor[cls] += want
            else:
                if want > len(pool):
                    raise ValueError(f"class {cls} has {len(pool)} examples, client {k} wants {want}")
                own = stream.child("client-pool", k, cls).permutation(len(pool))[:want]
                take.append(pool[own])
        idx = np.concatenate(take)
        shards.append(ClientShard(k, ds.features[idx], ds.labels[idx]))
    return shards


def sample_batch(shard: ClientShard, batch_size: int, stream: RandomStream) -> tuple[np.ndarray, np.ndarray]:
    """Uniform with-replacement batch from a shard, addressed by the stream."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = stream.integers(0, len(shard), shape=batch_size)
    return shard.features[idx], shard.labels[idx]
