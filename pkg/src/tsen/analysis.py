"""Representation similarity (CKA), embedding export and threshold sweeps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import pdist

from .graph import Dataset, Graph
from .layers import ModelConfig, ModelParams, encode_batch
from .training import Summary, TrainConfig, run_experiment

Layer = Union[int, str]


class CKAError(ValueError):
    """Similarity is undefined, e.g. for a zero-variance input."""


@dataclass(frozen=True)
class RepresentationMatrix:
    """One embedding row per graph, tagged with its layer and model."""

    values: np.ndarray
    layer: Layer = "final"
    model: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"representation must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("representation has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _readout_index(config: ModelConfig, layer: Layer) -> Optional[int]:
    if layer == "final":
        return None
    if not isinstance(layer, (int, np.integer)) or isinstance(layer, bool):
        raise ValueError(f"layer must be 'final' or an integer, got {layer!r}")
    low = 0 if config.include_input_readout else 1
    if not low <= layer <= config.num_layers:
        raise ValueError(f"layer {layer} out of range [{low}, {config.num_layers}]")
    return int(layer) if config.include_input_readout else int(layer) - 1


def extract_representations(params: ModelParams, graphs: Sequence[Graph], layer: Layer = "final",
                            model: str = "", batch_size: int = 64) -> RepresentationMatrix:
    """Eval-mode graph embeddings.

    ``layer="final"`` gives the concatenated readouts fed to the MLP head;
    an integer ``t`` gives the readout of encoder layer ``t`` alone (0 is
    the raw-feature readout when the model has one).
    """
    if not graphs:
        raise ValueError("no graphs to embed")
    index = _readout_index(params.config, layer)
    rows = []
    for i in range(0, len(graphs), batch_size):
        readouts = encode_batch(graphs[i:i + batch_size], params)
        if index is None:
            rows.append(np.concatenate([r.values for r in readouts], axis=1))
        else:
            rows.append(readouts[index].values)
    return RepresentationMatrix(np.concatenate(rows, axis=0), layer, model or params.config.variant)


# --- CKA -------------------------------------------------------------------------------------


def _as_array(x) -> np.ndarray:
    return x.values if isinstance(x, RepresentationMatrix) else np.asarray(x, dtype=np.float64)


def gram(x: np.ndarray, kernel: str = "linear", bandwidth: float = 1.0) -> np.ndarray:
    """Kernel matrix over rows; the RBF width is ``bandwidth`` times the median pairwise distance."""
    if kernel == "linear":
        return x @ x.T
    if kernel == "rbf":
        sq = np.maximum(np.sum(x * x, axis=1)[:, None] + np.sum(x * x, axis=1)[None, :] - 2 * x @ x.T, 0.0)
        sigma = bandwidth * float(np.median(pdist(x)))
        if sigma <= 0:
            raise CKAError("median pairwise distance is zero; RBF similarity is undefined")
        return np.exp(-sq / (2.0 * sigma * sigma))
    raise ValueError(f"unknown kernel {kernel!r}; expected 'linear' or 'rbf'")


def center(k: np.ndarray) -> np.ndarray:
    """Double-centre a Gram matrix, i.e. ``H K H``."""
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """Biased HSIC estimate ``tr(K H L H) / (n-1)^2``."""
    n = k.shape[0]
    return float(np.sum(center(k) * center(l)) / (n - 1) ** 2)


def hsic_unbiased(k: np.ndarray, l: np.ndarray) -> float:
    """U-statistic HSIC; zero in expectation for independent inputs, needs 4+ rows."""
    n = k.shape[0]
    if n < 4:
        raise ValueError("unbiased HSIC needs at least 4 rows")
    k = k - np.diag(np.diag(k))
    l = l - np.diag(np.diag(l))
    kl = k @ l
    value = np.trace(kl) + k.sum() * l.sum() / ((n - 1) * (n - 2)) - 2.0 * kl.sum() / (n - 2)
    return float(value / (n * (n - 3)))


ESTIMATORS = {"biased": hsic, "unbiased": hsic_unbiased}


def cka(x, y, kernel: str = "linear", bandwidth: float = 1.0, estimator: str = "biased") -> float:
    """Centered kernel alignment of two representations of the same graphs.

    The default biased estimator stays in [0, 1] but is inflated for wide
    inputs (about ``p / (n + p)`` for independent Gaussians); ``"unbiased"``
    removes that offset at the cost of occasional small negative values.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {sorted(ESTIMATORS)}")
    est = ESTIMATORS[estimator]
    x, y = _as_array(x), _as_array(y)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("cka expects 2-D inputs")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 3:
        raise ValueError("cka needs at least 3 rows")
    kx, ky = gram(x, kernel, bandwidth), gram(y, kernel, bandwidth)
    for name, k in (("first", kx), ("second", ky)):
        # centred energy negligible next to the raw kernel means no variance
        if hsic(k, k) <= 1e-20 * max(float(np.sum(k * k)), 1e-300) / (k.shape[0] - 1) ** 2:
            raise CKAError(f"{name} input has zero variance; similarity is undefined")
    sxx, syy = est(kx, kx), est(ky, ky)
    if sxx <= 0 or syy <= 0:
        raise CKAError("self-HSIC is not positive; similarity is undefined")
    return est(kx, ky) / np.sqrt(sxx * syy)


# --- tables -------------------------------------------------------------------------------------


@dataclass
class Table:
    """Rows of string cells, emitted as CSV or aligned text."""

    header: list[str]
    rows: list[list[str]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.rows)
        return buf.getvalue()

    def to_text(self) -> str:
        cols = list(zip(self.header, *self.rows))
        widths = [max(len(c) for c in col) for col in cols]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                 for row in [self.header] + self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_text() if path.suffix == ".txt" else self.to_csv())


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def cka_model_table(models: Sequence[tuple[str, ModelParams]], graphs: Sequence[Graph],
                    layers: Sequence[Layer] = (1, 2), kernel: str = "rbf", bandwidth: float = 1.0,
                    include_self: bool = False, estimator: str = "biased") -> Table:
    """Pairwise CKA between models, one column per requested layer."""
    if len(models) < 1:
        raise ValueError("need at least one model")
    reps = {(tag, layer): extract_representations(p, graphs, layer, tag).values
            for tag, p in models for layer in layers}
    tags = [tag for tag, _ in models]
    if len(set(tags)) != len(tags):
        raise ValueError(f"model tags must be unique, got {tags}")
    pairs = list(combinations(tags, 2))
    if include_self:
        pairs = [(t, t) for t in tags] + pairs
    table = Table(["pair"] + [f"layer_{l}" for l in layers],
                  meta={"kernel": kernel, "bandwidth_multiplier": bandwidth, "hsic": estimator,
                        "graphs": len(graphs)})
    for a, b in pairs:
        row = [f"{a} vs {b}"]
        for layer in layers:
            row.append(_fmt(cka(reps[a, layer], reps[b, layer], kernel, bandwidth, estimator)))
        table.rows.append(row)
    return table


# --- embeddings ------------------------------------------------------------------------------


def export_embeddings(representation, labels, path, graph_ids: Optional[Sequence[str]] = None) -> Path:
    """Write ``graph_id,label,e0..`` rows with round-trip exact floats."""
    values = _as_array(representation)
    labels = [int(y) for y in labels]
    if len(labels) != values.shape[0]:
        raise ValueError(f"{len(labels)} labels for {values.shape[0]} embedding rows")
    ids = [str(i) for i in (graph_ids if graph_ids is not None else range(values.shape[0]))]
    if len(ids) != values.shape[0]:
        raise ValueError(f"{len(ids)} graph ids for {values.shape[0]} embedding rows")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["graph_id", "label"] + [f"e{j}" for j in range(values.shape[1])])
        for gid, y, row in zip(ids, labels, values):
            w.writerow([gid, y] + [repr(float(v)) for v in row])
    return path


def read_embeddings(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Inverse of :func:`export_embeddings`: ``(graph_ids, labels, matrix)``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["graph_id", "label"]:
        raise ValueError(f"{path}: not an embedding file")
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    matrix = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), -1)
    return ids, labels, matrix


# --- threshold sweep ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    thresholds: list[float]
    summaries: list[Summary]
    mean_edges: list[float]

    def table(self) -> Table:
        t = Table(["threshold", "accuracy", "f1", "mean_edges"])
        for th, s, e in zip(self.thresholds, self.summaries, self.mean_edges):
            t.rows.append([f"{th:g}", s.accuracy, s.f1, f"{e:.2f}"])
        return t


def threshold_sweep(dataset: Dataset, thresholds: Sequence[float], model_config: ModelConfig,
                    train_config: TrainConfig, jobs: int = 1) -> SweepResult:
    """Re-binarize the correlations at each threshold and rerun the experiment."""
    if not thresholds:
        raise ValueError("need at least one threshold")
    for t in thresholds:
        if not 0.0 <= t < 1.0:
            raise ValueError(f"threshold {t} outside [0, 1)")
    summaries, edges = [], []
    for t in thresholds:
        ds = dataset.rethreshold(t)
        summaries.append(run_experiment(ds, model_config, train_config, jobs=jobs).summary)
        edges.append(float(np.mean([g.edge_count for g in ds.graphs])))
    return SweepResult([float(t) for t in thresholds], summaries, edges)


__all__ = ["CKAError", "RepresentationMatrix", "SweepResult", "Table", "center", "cka", "cka_model_table",
           "export_embeddings", "extract_representations", "gram", "hsic", "hsic_unbiased", "read_embeddings",
           "threshold_sweep"]
