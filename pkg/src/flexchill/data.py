"""Datasets, loaders and non-i.i.d. client partitioners."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """A data file could not be parsed; the message names the file."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) < 1:
            raise ValueError("dataset must contain at least one sample")
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset | None":
        """Rows at ``indices``, or ``None`` for an empty selection."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            return None
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ClientPartition:
    """Per-client index lists into one dataset, pairwise disjoint.

    ``proportions`` is filled by the Dirichlet partitioner with the
    column-normalized class shares that were actually floored.
    """

    assignments: list[np.ndarray]
    proportions: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments])

    def validate(self, n: int) -> None:
        allidx = np.concatenate(self.assignments) if self.assignments else np.array([], dtype=np.int64)
        if allidx.size and (allidx.min() < 0 or allidx.max() >= n):
            raise ValueError("partition index out of range")
        if np.unique(allidx).size != allidx.size:
            raise ValueError("partition assigns an index to more than one client")


# ---------------------------------------------------------------- loaders


def _read_idx(path, magic: int, what: str) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read {what} file ({exc.strerror})") from exc
    if len(buf) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX {what} magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims))
    start = 4 + 4 * ndim
    if len(buf) - start < count:
        raise DataFormatError(f"{path}: truncated payload, expected {count} bytes, found {len(buf) - start}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=start).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair; images become (N, 1, rows, cols) in [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if len(images) != len(labels):
        raise DataFormatError(
            f"{labels_path}: {len(labels)} labels but {images_path} holds {len(images)} images"
        )
    if len(images) == 0:
        raise DataFormatError(f"{images_path}: no images")
    classes = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.max() >= classes:
        raise DataFormatError(f"{labels_path}: label {labels.max()} >= num_classes {classes}")
    feats = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(feats, labels.astype(np.int64), classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", len(labels)) + labels.tobytes()
    )


def load_csv(path, num_classes: int) -> Dataset:
    """Comma-separated numeric rows, no header, integer label in the last column."""
    path = Path(path)
    rows, labels = [], []
    width = None
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DataFormatError(f"{path}:{lineno}: need at least one feature and a label")
            elif len(row) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
            try:
                values = [float(cell) for cell in row[:-1]]
                label_f = float(row[-1])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
            if label_f != int(label_f) or not 0 <= label_f < num_classes:
                raise DataFormatError(f"{path}:{lineno}: label {row[-1].strip()} not in [0, {num_classes})")
            rows.append(values)
            labels.append(int(label_f))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), num_classes)


# ---------------------------------------------------------------- synthetic


def blob_centers(num_classes: int, dim: int, center_seed: int = 0, radius: float = 1.0) -> np.ndarray:
    """Class centers drawn once from a fixed stream, rescaled to ``radius`` * sqrt(dim)."""
    c = stream(center_seed, "blob-centers", num_classes, dim).standard_normal((num_classes, dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return c * radius * np.sqrt(dim)


def gen_gaussian_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    center_seed: int = 0,
    radius: float = 1.0,
    split: str = "train",
) -> Dataset:
    """Isotropic Gaussian clusters around fixed class centers.

    Centers depend only on ``center_seed``; the sample noise comes from a
    stream named after ``split``, so a "train" and a "test" draw with the
    same seed are independent but share centers.
    """
    if num_classes < 1 or per_class < 1 or dim < 1 or spread < 0:
        raise ValueError("num_classes, per_class, dim must be positive and spread non-negative")
    centers = blob_centers(num_classes, dim, center_seed, radius)
    rng = stream(seed, f"blobs/{split}")
    labels = np.repeat(np.arange(num_classes), per_class)
    x = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    return Dataset(x, labels, num_classes)


# ---------------------------------------------------------------- partitioners


def partition_iid(ds: Dataset, num_clients: int, seed: int) -> ClientPartition:
    perm = stream(seed, "partition-iid").permutation(len(ds))
    return ClientPartition([np.sort(a) for a in np.array_split(perm, num_clients)])


def partition_shards(
    ds: Dataset, num_clients: int, shard_size: int, shards_per_client: int, seed: int
) -> ClientPartition:
    """Label-sorted contiguous shards dealt to clients without overlap."""
    if num_clients < 1 or shard_size < 1 or shards_per_client < 1:
        raise ValueError("num_clients, shard_size and shards_per_client must be positive")
    required = num_clients * shards_per_client * shard_size
    if required > len(ds):
        raise ValueError(
            f"shard partition needs {required} samples "
            f"({num_clients} clients x {shards_per_client} shards x {shard_size}), dataset has {len(ds)}"
        )
    order = np.lexsort((np.arange(len(ds)), ds.labels))
    num_shards = len(ds) // shard_size
    shards = order[: num_shards * shard_size].reshape(num_shards, shard_size)
    picked = stream(seed, "partition-shards").permutation(num_shards)
    out = []
    for i in range(num_clients):
        ids = picked[i * shards_per_client : (i + 1) * shards_per_client]
        out.append(np.sort(shards[ids].reshape(-1)))
    return ClientPartition(out)


def dirichlet_proportions(num_clients: int, num_classes: int, alpha: float, rng) -> np.ndarray:
    """One Dirichlet(alpha) class-proportion row per client, via Gamma normalization."""
    g = rng.standard_gamma(alpha, size=(num_clients, num_classes))
    tot = g.sum(axis=1, keepdims=True)
    for i in np.flatnonzero(tot[:, 0] == 0):
        # all draws underflowed: the limit distribution is a point mass
        g[i, rng.integers(num_classes)] = 1.0
    return g / g.sum(axis=1, keepdims=True)


def partition_dirichlet(ds: Dataset, num_clients: int, alpha: float, seed: int) -> ClientPartition:
    """Dirichlet label-skew partition with floor allocation.

    Client ``i`` draws ``p_i ~ Dirichlet(alpha)``; each class column is then
    normalized across clients so allocations can never exceed the class
    pool, and client ``i`` receives ``floor(|D_k| * q_ik)`` samples of class
    ``k`` taken in shuffled order. Remainders stay unassigned.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if num_clients < 1:
        raise ValueError("num_clients must be positive")
    rng = stream(seed, "partition-dirichlet")
    p = dirichlet_proportions(num_clients, ds.num_classes, alpha, rng)
    col = p.sum(axis=0, keepdims=True)
    q = np.divide(p, col, out=np.zeros_like(p), where=col > 0)
    chunks: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for k in range(ds.num_classes):
        pool = np.flatnonzero(ds.labels == k)
        pool = pool[rng.permutation(pool.size)]
        counts = np.floor(pool.size * q[:, k]).astype(np.int64)
        # q sums to 1 per column, but guard against rounding past the pool
        while counts.sum() > pool.size:
            counts[np.argmax(counts)] -= 1
        start = 0
        for i in range(num_clients):
            chunks[i].append(pool[start : start + counts[i]])
            start += counts[i]
    assignments = [np.sort(np.concatenate(c)) for c in chunks]
    return ClientPartition(assignments, proportions=q)


def train_eval_split(indices: np.ndarray, eval_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``round(eval_fraction * n)`` of a client's indices for evaluation."""
    idx = np.asarray(indices)
    n_eval = int(round(eval_fraction * idx.size))
    if n_eval == 0:
        return idx, idx[:0]
    perm = rng.permutation(idx.size)
    return np.sort(idx[perm[n_eval:]]), np.sort(idx[perm[:n_eval]])
