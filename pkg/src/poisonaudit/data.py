"""Dataset construction, ingestion, splitting, and federated sharding.

A :class:`Dataset` is a flat matrix of feature vectors plus integer labels
and the value-range/dtype metadata that the poisoning code reads when it
generates triggers.  Inputs are stored as float32 rows even for integer
sources (pixel bytes stay whole-valued; ``dtype_flag`` records the fact).
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_from

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed input data (bad file, inconsistent sizes, bad arguments)."""


@dataclass(frozen=True)
class Dataset:
    """Immutable sample matrix with labels and range metadata.

    x        : (n, length) float32, read-only
    labels   : (n,) int64 in [0, num_classes)
    dims     : optional (H, W, C) spatial shape of each flattened row
    x_min/x_max : observed value range over the whole matrix (scalars)
    dtype_flag  : "float" or "integer" (integer => all values are whole)
    """

    x: np.ndarray
    labels: np.ndarray
    num_classes: int
    dims: tuple[int, int, int] | None = None
    x_min: float = 0.0
    x_max: float = 0.0
    dtype_flag: str = "float"
    label_mapping: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.x.ndim != 2:
            raise DataError(f"inputs must be a 2-D matrix, got shape {self.x.shape}")
        if self.labels.shape != (self.x.shape[0],):
            raise DataError("labels length does not match input count")
        if self.x.shape[0] == 0:
            raise DataError("dataset is empty")
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError("labels outside [0, num_classes)")
        if not np.all(np.isfinite(self.x)):
            raise DataError("inputs contain non-finite values")
        if self.dims is not None:
            h, w, c = self.dims
            if h * w * c != self.x.shape[1]:
                raise DataError(f"dims {self.dims} do not match row length {self.x.shape[1]}")
        if self.dtype_flag not in ("float", "integer"):
            raise DataError(f"unknown dtype_flag {self.dtype_flag!r}")
        if self.dtype_flag == "integer" and not np.all(self.x == np.rint(self.x)):
            raise DataError("dtype_flag=integer but values are not whole numbers")
        if self.x.min() < self.x_min or self.x.max() > self.x_max:
            raise DataError("values outside declared [x_min, x_max]")
        self.x.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def length(self) -> int:
        return self.x.shape[1]

    def get(self, i: int) -> tuple[np.ndarray, int]:
        return self.x[i], int(self.labels[i])

    def __len__(self) -> int:
        return self.n


def make_dataset(x, labels, num_classes=None, dims=None, dtype_flag=None,
                 label_mapping=None) -> Dataset:
    """Build a Dataset, computing range metadata from the values."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError(f"inputs must be a non-empty 2-D matrix, got shape {x.shape}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    if dtype_flag is None:
        dtype_flag = "integer" if x.size and np.all(x == np.rint(x)) else "float"
    return Dataset(
        x=x,
        labels=labels,
        num_classes=int(num_classes),
        dims=tuple(dims) if dims is not None else None,
        x_min=float(x.min()),
        x_max=float(x.max()),
        dtype_flag=dtype_flag,
        label_mapping=label_mapping,
    )


def subset(dataset: Dataset, indices: np.ndarray) -> Dataset:
    """New Dataset from the given rows (range metadata recomputed)."""
    idx = np.asarray(indices, dtype=np.int64)
    return make_dataset(
        dataset.x[idx].copy(),
        dataset.labels[idx].copy(),
        num_classes=dataset.num_classes,
        dims=dataset.dims,
        dtype_flag=dataset.dtype_flag,
    )


@dataclass(frozen=True)
class SplitResult:
    """Disjoint, exhaustive partition of a source pool into evaluation sets.

    ``train`` is carried along when the caller supplies one; splitting an
    evaluation pool alone leaves it None.
    """

    val: Dataset
    test: Dataset
    train: Dataset | None = None
    provenance: dict = field(default_factory=dict, compare=False)


def synth_blobs(n: int, num_classes: int, dim: int, separation: float, seed: int) -> Dataset:
    """Balanced Gaussian clusters with unit within-class std.

    Class means are random directions rescaled so the *minimum* pairwise
    distance equals ``separation``; separation 0 collapses all means onto
    the origin.
    """
    if n < num_classes:
        raise DataError(f"n={n} smaller than num_classes={num_classes}")
    if num_classes < 2 or dim < 1:
        raise DataError("need num_classes >= 2 and dim >= 1")
    if separation < 0:
        raise DataError("separation must be >= 0")
    rng = rng_from(seed, "blobs")
    raw = rng.normal(size=(num_classes, dim))
    diffs = raw[:, None, :] - raw[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=-1))
    d_min = dist[np.triu_indices(num_classes, k=1)].min()
    means = raw * (separation / d_min) if separation > 0 else np.zeros_like(raw)

    base, extra = divmod(n, num_classes)
    counts = [base + (1 if c < extra else 0) for c in range(num_classes)]
    labels = np.repeat(np.arange(num_classes), counts)
    x = means[labels] + rng.normal(size=(n, dim))
    perm = rng.permutation(n)
    return make_dataset(x[perm].astype(np.float32), labels[perm],
                        num_classes=num_classes, dtype_flag="float")


def load_csv(path, label_column: str) -> Dataset:
    """Rectangular numeric CSV with a header row.

    Features are all non-label columns in file order; labels are re-indexed
    to a dense 0..C-1 mapping by sorted original value.  The mapping is kept
    on the returned dataset for reporting.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataError(f"{path}: unknown label column {label_column!r} "
                            f"(columns: {', '.join(header)})")
        label_idx = header.index(label_column)
        rows, raw_labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            vals = []
            for col_no, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {row_no}, column {header[col_no]!r}: "
                                    f"non-numeric cell {cell!r}") from None
                if col_no == label_idx:
                    raw_labels.append(v)
                else:
                    vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    raw_labels = np.asarray(raw_labels)
    uniq = np.unique(raw_labels)
    mapping = {float(v): i for i, v in enumerate(uniq)}
    labels = np.searchsorted(uniq, raw_labels)
    return make_dataset(np.asarray(rows, dtype=np.float32), labels,
                        num_classes=len(uniq), label_mapping=mapping)


def _read_idx_header(fh, path, expected_magic, n_dims):
    head = fh.read(4 * (1 + n_dims))
    if len(head) != 4 * (1 + n_dims):
        raise DataError(f"{path}: truncated header")
    fields = struct.unpack(f">{1 + n_dims}I", head)
    if fields[0] != expected_magic:
        raise DataError(f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}")
    return fields[1:]


def load_idx(images_path, labels_path) -> Dataset:
    """Big-endian IDX image/label pair (magics 0x803 / 0x801).

    Pixels are kept as integers 0-255; dims records HxWx1.
    """
    with open(images_path, "rb") as fh:
        n, h, w = _read_idx_header(fh, images_path, IDX_IMAGE_MAGIC, 3)
        buf = fh.read()
        if len(buf) < n * h * w:
            raise DataError(f"{images_path}: truncated pixel data "
                            f"({len(buf)} bytes for {n}x{h}x{w})")
        pixels = np.frombuffer(buf[: n * h * w], dtype=np.uint8).reshape(n, h * w)
    with open(labels_path, "rb") as fh:
        (n_lab,) = _read_idx_header(fh, labels_path, IDX_LABEL_MAGIC, 1)
        buf = fh.read()
        if len(buf) < n_lab:
            raise DataError(f"{labels_path}: truncated label data")
        labels = np.frombuffer(buf[:n_lab], dtype=np.uint8)
    if n != n_lab:
        raise DataError(f"image count {n} != label count {n_lab}")
    return make_dataset(pixels.astype(np.float32), labels.astype(np.int64),
                        dims=(h, w, 1), dtype_flag="integer")


def split_holdout(pool: Dataset, val_fraction: float, seed: int) -> SplitResult:
    """Uniformly random disjoint val/test split of an evaluation pool."""
    if not 0 < val_fraction < 1:
        raise DataError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if pool.n < 2:
        raise DataError("pool too small to split")
    n_val = int(val_fraction * pool.n)
    perm = rng_from(seed, "split").permutation(pool.n)
    val_idx, test_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return SplitResult(
        val=subset(pool, val_idx),
        test=subset(pool, test_idx),
        provenance={"val": val_idx, "test": test_idx},
    )


def shard_users(dataset: Dataset, num_users: int, seed: int) -> list[Dataset]:
    """Cut a random permutation into ``num_users`` equal shards.

    Remainder rows (n mod num_users) are dropped; the count is logged.
    """
    if num_users <= 0:
        raise DataError(f"num_users must be positive, got {num_users}")
    if num_users > dataset.n:
        raise DataError(f"num_users={num_users} exceeds dataset size {dataset.n}")
    size = dataset.n // num_users
    dropped = dataset.n - size * num_users
    if dropped:
        log.info("shard_users: dropping %d remainder rows", dropped)
    perm = rng_from(seed, "shards").permutation(dataset.n)
    return [subset(dataset, np.sort(perm[u * size:(u + 1) * size])) for u in range(num_users)]
