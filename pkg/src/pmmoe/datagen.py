"""Client datasets: synthetic Gaussian clusters, IDX ingestion, and the
shared-ratio Dirichlet partition used to create label-skewed clients."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pmmoe.errors import CountMismatchError, FormatError, ParameterError, PartitionError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# synthetic noise is a standard normal clipped to this many std per coordinate
NOISE_CLIP = 3.0


@dataclass
class LabeledDataset:
    x: np.ndarray  # [N, U] float64
    y: np.ndarray  # [N] int64
    n_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ParameterError(f"dataset arrays disagree: x {self.x.shape}, y {self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ParameterError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.x[idx], self.y[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


@dataclass(frozen=True)
class PartitionSpec:
    M: int
    S: float = 0.0
    beta: float = 0.1
    seed: int = 0
    # redraw the Dirichlet weights until every client holds at least this many samples
    min_size: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ParameterError(f"need at least one client, got M={self.M}")
        if not 0 <= self.S <= 100:
            raise ParameterError(f"shared ratio S must be in [0, 100], got {self.S}")
        if not self.beta > 0:
            raise ParameterError(f"Dirichlet concentration must be positive, got {self.beta}")
        if self.min_size < 0:
            raise ParameterError("min_size must be non-negative")


@dataclass
class Partition:
    indices: list[np.ndarray]
    # per class: (shared counts per client, Dirichlet weights, Dirichlet counts per client)
    shared_counts: dict[int, np.ndarray] = field(default_factory=dict)
    weights: dict[int, np.ndarray] = field(default_factory=dict)
    dirichlet_counts: dict[int, np.ndarray] = field(default_factory=dict)
    attempts: int = 1

    @property
    def counts(self) -> list[int]:
        return [len(ix) for ix in self.indices]

    @property
    def M(self) -> int:
        return len(self.indices)

    def class_matrix(self, labels: np.ndarray, n_classes: int) -> np.ndarray:
        """``[M, C]`` sample counts per client and class."""
        return np.stack([np.bincount(labels[ix], minlength=n_classes) for ix in self.indices])


# -- synthetic data ----------------------------------------------------------


def separation_threshold(means: np.ndarray) -> float:
    """Spread below which every class is linearly separable.

    Each sample sits within ``spread * NOISE_CLIP * sqrt(U)`` of its class
    mean, so once that radius is under half the closest pair of means the
    nearest-mean rule (a linear classifier) labels every sample correctly.
    """
    means = np.asarray(means, dtype=np.float64)
    d = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    d_min = d[~np.eye(len(means), dtype=bool)].min()
    return float(d_min / (2 * NOISE_CLIP * math.sqrt(means.shape[1])))


def class_means(C: int, U: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0]).standard_normal((C, U))


def generate_synthetic(C: int, U: int, per_class: int, spread: float, seed: int) -> LabeledDataset:
    """``C * per_class`` samples from clipped Gaussian clusters, class-major order.

    Class means are standard normal draws; samples are ``mean + spread * z``
    with ``z`` standard normal clipped to ``[-3, 3]`` per coordinate. See
    :func:`separation_threshold` for the separability guarantee.
    """
    if C < 2 or U < 2 or per_class < 1:
        raise ParameterError(f"need C>=2, U>=2, per_class>=1; got C={C}, U={U}, per_class={per_class}")
    if spread < 0:
        raise ParameterError(f"spread must be non-negative, got {spread}")
    means = class_means(C, U, seed)
    xs, ys = [], []
    for c in range(C):
        rng = np.random.default_rng([seed, 1, c])
        z = np.clip(rng.standard_normal((per_class, U)), -NOISE_CLIP, NOISE_CLIP)
        xs.append(means[c] + spread * z)
        ys.append(np.full(per_class, c))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), C)


# -- partitioning ------------------------------------------------------------


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``weights * total``.

    Floors every share, then hands the leftover units to the largest
    fractional parts (ties go to the lower index).
    """
    raw = np.asarray(weights, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def even_split(n: int, M: int) -> np.ndarray:
    counts = np.full(M, n // M, dtype=np.int64)
    counts[: n % M] += 1
    return counts


def _draw_partition(y: np.ndarray, n_classes: int, spec: PartitionSpec, attempt: int) -> Partition:
    M = spec.M
    buckets: list[list[np.ndarray]] = [[] for _ in range(M)]
    part = Partition(indices=[], attempts=attempt + 1)
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        if idx.size == 0:
            continue
        rng = np.random.default_rng([spec.seed, attempt, c])
        idx = rng.permutation(idx)
        n_shared = math.floor(spec.S * idx.size / 100)
        shared = even_split(n_shared, M)
        rest = idx.size - n_shared
        w = rng.dirichlet(np.full(M, spec.beta)) if M > 1 else np.ones(1)
        dirichlet = largest_remainder(w, rest)
        part.shared_counts[c] = shared
        part.weights[c] = w
        part.dirichlet_counts[c] = dirichlet
        bounds = np.concatenate([[0], np.cumsum(shared), n_shared + np.cumsum(dirichlet)])
        for j in range(M):
            buckets[j].append(idx[bounds[j] : bounds[j + 1]])
            buckets[j].append(idx[bounds[M + j] : bounds[M + j + 1]])
    part.indices = [np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64) for b in buckets]
    return part


def partition_dirichlet(data: LabeledDataset, spec: PartitionSpec, max_attempts: int = 1000) -> Partition:
    """Split ``data`` across ``spec.M`` clients.

    For each class, ``floor(S%)`` of its samples are dealt evenly (leftover
    one each to the lowest client ids) and the rest follow per-class weights
    ``w ~ Dirichlet(beta, ..., beta)`` rounded by largest remainder.
    """
    N = len(data)
    if spec.M > N:
        raise PartitionError(f"{spec.M} clients but only {N} samples")
    if spec.S > 0:
        counts = data.class_counts()
        for c, n in enumerate(counts):
            if 0 < n < spec.M:
                raise PartitionError(f"class {c} has {n} samples, fewer than M={spec.M} clients")
    for attempt in range(max_attempts):
        part = _draw_partition(data.y, data.n_classes, spec, attempt)
        if min(part.counts) >= spec.min_size:
            return part
    raise PartitionError(f"no draw gave every client {spec.min_size} samples in {max_attempts} attempts")


def write_partition_csv(path, part: Partition, data: LabeledDataset) -> None:
    mat = part.class_matrix(data.y, data.n_classes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "class_id", "count"])
        for j in range(mat.shape[0]):
            for c in range(mat.shape[1]):
                w.writerow([j, c, int(mat[j, c])])


def train_test_split(
    data: LabeledDataset, part: Partition, fraction: float, seed: int
) -> list[tuple[LabeledDataset, LabeledDataset]]:
    """Per-client split, stratified by class.

    Each client keeps ``round(fraction * n)`` training samples (clamped so
    both sides are non-empty when ``n >= 2``); that total is spread over
    classes by largest remainder of ``fraction * n_c``.
    """
    if not 0 < fraction < 1:
        raise ParameterError(f"train fraction must be in (0, 1), got {fraction}")
    out = []
    for j, idx in enumerate(part.indices):
        n = idx.size
        n_train = math.floor(fraction * n + 0.5)
        if n >= 2:
            n_train = min(max(n_train, 1), n - 1)
        rng = np.random.default_rng([seed, 2, j])
        labels = data.y[idx]
        classes = np.unique(labels)
        per_class = [idx[labels == c] for c in classes]
        sizes = np.array([p.size for p in per_class])
        take = largest_remainder(sizes / max(n, 1), n_train) if n else sizes * 0
        # largest remainder can overshoot a tiny class; move surplus to classes with room
        take = np.minimum(take, sizes)
        while take.sum() < n_train:
            room = np.flatnonzero(take < sizes)
            take[room[0]] += 1
        tr, te = [], []
        for p, k in zip(per_class, take):
            p = rng.permutation(p)
            tr.append(p[:k])
            te.append(p[k:])
        tr_idx = np.sort(np.concatenate(tr)) if tr else idx
        te_idx = np.sort(np.concatenate(te)) if te else idx[:0]
        out.append((data.subset(tr_idx), data.subset(te_idx)))
    return out


# -- IDX files ---------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair (MNIST layout, optionally gzipped).

    Pixels are scaled to ``[0, 1]`` and images flattened to ``rows * cols``.
    """
    raw_img = _read_bytes(images_path)
    raw_lab = _read_bytes(labels_path)
    if len(raw_img) < 16:
        raise TruncatedFileError(f"{images_path}: header needs 16 bytes, file has {len(raw_img)}")
    magic, n_img, rows, cols = struct.unpack(">IIII", raw_img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(raw_lab) < 8:
        raise TruncatedFileError(f"{labels_path}: header needs 8 bytes, file has {len(raw_lab)}")
    magic, n_lab = struct.unpack(">II", raw_lab[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if n_img != n_lab:
        raise CountMismatchError(f"{n_img} images but {n_lab} labels")
    need = 16 + n_img * rows * cols
    if len(raw_img) < need:
        raise TruncatedFileError(f"{images_path}: expected {need} bytes, got {len(raw_img)}")
    if len(raw_lab) < 8 + n_lab:
        raise TruncatedFileError(f"{labels_path}: expected {8 + n_lab} bytes, got {len(raw_lab)}")
    pixels = np.frombuffer(raw_img, dtype=np.uint8, count=n_img * rows * cols, offset=16)
    labels = np.frombuffer(raw_lab, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    x = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    n_classes = max(int(labels.max()) + 1 if labels.size else 0, 2)
    return LabeledDataset(x, labels, n_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``images[n, rows, cols]`` and ``labels[n]`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())
