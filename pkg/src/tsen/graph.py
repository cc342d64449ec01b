"""Connectivity-matrix graphs, datasets, ingestion, synthetic data and splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Bad input data: malformed matrices, missing files, invalid labels."""


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` for a binary symmetric adjacency.

    Isolated nodes use ``d^-1/2 = 0``, so their row and column of the
    propagation term vanish and the Laplacian has a 1 on their diagonal.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"adjacency must be square, got shape {a.shape}")
    if not np.array_equal(a, a.T):
        raise DataError("adjacency must be symmetric")
    if not np.all((a == 0) | (a == 1)):
        raise DataError("adjacency must be binary")
    if np.any(np.diag(a)):
        raise DataError("adjacency must have a zero diagonal")
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def binarize(corr: np.ndarray, threshold: float) -> np.ndarray:
    """Edge (i, j) iff ``corr[i, j] > threshold`` and ``i != j``.

    Thresholding is on the signed value, so negative correlations never
    become edges for a nonnegative threshold.
    """
    c = np.asarray(corr, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DataError(f"correlation matrix must be square, got shape {c.shape}")
    if not np.allclose(c, c.T, rtol=0.0, atol=1e-9):
        raise DataError("correlation matrix must be symmetric")
    a = (c > threshold).astype(np.float64)
    a = np.maximum(a, a.T)  # symmetric up to 1e-9 noise
    np.fill_diagonal(a, 0.0)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    adjacency: np.ndarray
    laplacian: np.ndarray
    features: np.ndarray
    label: int

    def __post_init__(self):
        n = self.adjacency.shape[0]
        if self.features.shape[0] != n:
            raise DataError(f"features have {self.features.shape[0]} rows for {n} nodes")
        if not np.allclose(self.laplacian, normalized_laplacian(self.adjacency), rtol=0, atol=1e-12):
            raise DataError("cached Laplacian does not match the adjacency")
        for arr in (self.adjacency, self.laplacian, self.features):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def edge_count(self) -> int:
        return int(self.adjacency.sum()) // 2

    def permuted(self, perm: Sequence[int], feature_columns: bool = False) -> "Graph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``.

        Feature rows always move with their node. ``feature_columns=True``
        also reorders feature columns, which is what relabeling the ROIs of
        the underlying correlation matrix does; the default keeps feature
        semantics fixed.
        """
        p = np.asarray(perm)
        feats = self.features[p]
        if feature_columns:
            feats = feats[:, p]
        return Graph(self.adjacency[np.ix_(p, p)], self.laplacian[np.ix_(p, p)], feats, self.label)


def build_graph(corr: np.ndarray, threshold: float, label: int) -> Graph:
    """Binarized edges, weighted correlation rows as node features."""
    adjacency = binarize(corr, threshold)
    features = np.array(corr, dtype=np.float64)
    return Graph(adjacency, normalized_laplacian(adjacency), features, int(label))


@dataclass(frozen=True, eq=False)
class Dataset:
    graphs: tuple[Graph, ...]
    class_count: int
    name: str = "dataset"
    source: str = "synthetic"
    generation_seed: Optional[int] = None
    subject_ids: tuple[str, ...] = field(default=())
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.source not in ("ingested", "synthetic"):
            raise DataError(f"source must be 'ingested' or 'synthetic', got {self.source!r}")
        dims = {g.feature_dim for g in self.graphs}
        if len(dims) > 1:
            raise DataError(f"graphs have differing feature dimensions {sorted(dims)}")
        for g in self.graphs:
            if not 0 <= g.label < self.class_count:
                raise DataError(f"label {g.label} outside [0, {self.class_count})")
        if not self.subject_ids:
            object.__setattr__(self, "subject_ids", tuple(f"sub{i:04d}" for i in range(len(self.graphs))))

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].feature_dim

    def rethreshold(self, threshold: float) -> "Dataset":
        """Rebuild every graph's edges from its correlation features."""
        graphs = tuple(build_graph(g.features, threshold, g.label) for g in self.graphs)
        return Dataset(graphs, self.class_count, self.name, self.source,
                       self.generation_seed, self.subject_ids, threshold)


# --- ingestion ---------------------------------------------------------------------


def read_matrix(path: Path, subject: str = "?") -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except FileNotFoundError:
        raise DataError(f"subject {subject}: matrix file {path} not found") from None
    try:
        m = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError:
        raise DataError(f"subject {subject}: non-numeric entry in {path}") from None
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[0] != m.shape[1]:
        raise DataError(f"subject {subject}: matrix in {path} is not square")
    return m


def write_matrix(path: Path, m: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in m:
            w.writerow([repr(float(v)) for v in row])


def load_dataset(manifest_path, threshold: float, class_count: int = 2,
                 name: Optional[str] = None) -> Dataset:
    """Read a ``subject_id,matrix_file,label`` manifest.

    Matrix paths are resolved against the manifest's directory; graphs keep
    the manifest's row order.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest {manifest_path} not found")
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["subject_id", "matrix_file", "label"]:
            raise DataError(f"manifest header must be subject_id,matrix_file,label; got {reader.fieldnames}")
        rows = list(reader)
    graphs, ids = [], []
    for row in rows:
        sid = row["subject_id"].strip()
        try:
            label = int(row["label"])
        except (TypeError, ValueError):
            raise DataError(f"subject {sid}: label {row['label']!r} is not a class index") from None
        if not 0 <= label < class_count:
            raise DataError(f"subject {sid}: label {label} outside the {class_count} declared classes")
        corr = read_matrix(manifest_path.parent / row["matrix_file"].strip(), sid)
        try:
            graphs.append(build_graph(corr, threshold, label))
        except DataError as exc:
            raise DataError(f"subject {sid}: {exc}") from None
        ids.append(sid)
    if not graphs:
        raise DataError(f"manifest {manifest_path} lists no subjects")
    dims = {g.feature_dim for g in graphs}
    if len(dims) > 1:
        raise DataError(f"subjects have differing matrix sizes {sorted(dims)}")
    return Dataset(tuple(graphs), class_count, name or manifest_path.parent.name, "ingested",
                   None, tuple(ids), threshold)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write ``manifest.csv`` plus one matrix CSV per subject; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "matrices").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "matrix_file", "label"])
        for sid, g in zip(dataset.subject_ids, dataset.graphs):
            rel = f"matrices/{sid}.csv"
            write_matrix(out_dir / rel, g.features)
            w.writerow([sid, rel, g.label])
    return manifest


# --- synthetic data ------------------------------------------------------------------

# block-coupling patterns per class: pairs of blocks whose latent signals correlate
_COUPLINGS = (((0, 1), (2, 3)), ((0, 2), (1, 3)))


def synthetic_correlation(rng: np.random.Generator, label: int, n_nodes: int, signal: float,
                          timepoints: int = 64, loading: float = 0.7) -> np.ndarray:
    """Pearson correlation of simulated node time series for one subject.

    Nodes fall into four contiguous blocks that share a latent signal. The
    class decides which block pairs have correlated latents; ``signal`` is
    that correlation, so ``signal=0`` makes both classes identical.
    """
    blocks = np.arange(n_nodes) * 4 // n_nodes
    cov = np.eye(4)
    for i, j in _COUPLINGS[label]:
        cov[i, j] = cov[j, i] = signal
    latent = rng.multivariate_normal(np.zeros(4), cov, size=timepoints, method="cholesky")
    load = np.clip(loading + 0.1 * rng.standard_normal(n_nodes), 0.05, 0.95)
    noise = rng.standard_normal((timepoints, n_nodes))
    series = latent[:, blocks] * load + noise * np.sqrt(1.0 - load ** 2)
    corr = np.corrcoef(series, rowvar=False)
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def generate_synthetic(n_graphs: int = 400, n_nodes: int = 50, signal: float = 0.8, seed: int = 0,
                       threshold: float = 0.3, timepoints: int = 64) -> Dataset:
    """Two balanced classes of planted-block correlation graphs."""
    if n_graphs < 2 or n_graphs % 2:
        raise DataError(f"n_graphs must be a positive even number, got {n_graphs}")
    if n_nodes < 4:
        raise DataError(f"n_nodes must be at least 4, got {n_nodes}")
    if not 0.0 <= signal < 1.0:
        # a unit coupling makes the latent covariance singular
        raise DataError(f"signal must lie in [0, 1), got {signal}")
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n_graphs // 2)
    rng.shuffle(labels)
    graphs = tuple(build_graph(synthetic_correlation(rng, int(y), n_nodes, signal, timepoints), threshold, int(y))
                   for y in labels)
    return Dataset(graphs, 2, f"synthetic-s{signal:g}", "synthetic", seed, (), threshold)


# --- splits --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train, n_val = int(np.floor(0.8 * n)), int(np.floor(0.1 * n))
    return n_train, n_val, n - n_train - n_val


def split_dataset(dataset, seed: int) -> SplitPlan:
    """Random 80/10/10 split; train and val sizes are floored, test takes the rest."""
    n = len(dataset)
    if n < 10:
        raise DataError(f"need at least 10 graphs to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    return SplitPlan(tuple(int(i) for i in perm[:n_train]),
                     tuple(int(i) for i in perm[n_train:n_train + n_val]),
                     tuple(int(i) for i in perm[n_train + n_val:]), seed)
