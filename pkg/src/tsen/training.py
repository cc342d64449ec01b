"""Loss, AdamW, warmup/inverse-sqrt schedule, the training protocol and metrics."""
from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .graph import Dataset, Graph, SplitPlan, split_dataset
from .layers import ModelConfig, ModelParams, forward_batch, init_params, predict
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1.0
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 300
    warmup_steps: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    seed: int = 0
    repetitions: int = 5

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        if self.eps_adam <= 0:
            raise ValueError("eps_adam must be positive")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys {sorted(unknown)}")
        return cls(**d)


# --- loss, optimizer, schedule ---------------------------------------------------------


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise ValueError(f"{labels.shape[0]} labels for {b} logit rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = T.mul(T.log_softmax_rows(logits), Tensor(onehot))
    return T.scale(T.sum_all(picked), -1.0 / b)


def lr_schedule(step: int, warmup: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` at ``warmup``, then decay as ``step**-0.5``."""
    if step < 1:
        raise ValueError(f"schedule steps count from 1, got {step}")
    return base_lr * min(step / warmup, np.sqrt(warmup / step))


def adamw_update(theta, grad, m, v, step: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
    """One AdamW update of ``theta``; returns ``(theta, m, v)``.

    ``step`` is the 1-based count including this update. Weight decay is
    decoupled from the gradient moments.
    """
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    theta = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    return theta, m, v


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: ModelParams, state: AdamWState, config: TrainConfig, lr_t: float) -> None:
    """Apply one AdamW update to every parameter from its ``grad`` buffer."""
    if lr_t < 0:
        raise ValueError("learning rate must be nonnegative")
    state.step += 1
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.values.shape}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        p.values, state.m[name], state.v[name] = adamw_update(
            p.values, g, m, v, state.step, lr_t, config.betas, config.eps_adam, config.weight_decay)


# --- metrics -----------------------------------------------------------------------------


def binary_f1(y_true, y_pred, positive: int = 1) -> float:
    """F1 of the positive class; 0 when there are no positives at all."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    tp = int(np.sum((y_pred == positive) & (y_true == positive)))
    fp = int(np.sum((y_pred == positive) & (y_true != positive)))
    fn = int(np.sum((y_pred != positive) & (y_true == positive)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def evaluate(params: ModelParams, graphs: Sequence[Graph], labels=None) -> tuple[float, float]:
    """Eval-mode (accuracy, F1) over ``graphs``."""
    if not graphs:
        raise ValueError("evaluate needs at least one graph")
    y = np.array([g.label for g in graphs]) if labels is None else np.asarray(labels)
    pred = predict(graphs, params)
    return float(np.mean(pred == y)), binary_f1(y, pred)


# --- training protocol ------------------------------------------------------------------


@dataclass
class TrainReport:
    train_loss: list[float]
    val_accuracy: list[float]
    best_epoch: int
    test_accuracy: float
    test_f1: float
    seed: int
    model_config: dict
    train_config: dict
    split_sizes: tuple[int, int, int]
    duration_seconds: float = 0.0

    def metrics(self) -> dict:
        """Everything except wall-clock time."""
        d = asdict(self)
        d.pop("duration_seconds")
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        d = json.loads(text)
        d["split_sizes"] = tuple(d["split_sizes"])
        d["train_config"]["betas"] = list(d["train_config"]["betas"])
        return cls(**d)


def train(dataset: Dataset, split: SplitPlan, model_config: ModelConfig, train_config: TrainConfig,
          return_params: bool = False):
    """Train one model; returns a :class:`TrainReport` (and the selected params).

    Test metrics come from the parameters of the epoch with the best
    validation accuracy (earliest on ties). With ``epochs=0`` they come from
    the untrained initialization.
    """
    if not split.train or not split.val or not split.test:
        raise ValueError("train, val and test splits must all be nonempty")
    start = time.perf_counter()
    seed = train_config.seed
    init_seq, loop_seq = np.random.SeedSequence(seed).spawn(2)
    params = init_params(model_config, dataset.feature_dim, dataset.class_count,
                         int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(loop_seq)
    graphs = dataset.graphs
    train_idx = np.array(split.train)
    val_graphs = [graphs[i] for i in split.val]
    test_graphs = [graphs[i] for i in split.test]

    state = AdamWState()
    losses, val_accs = [], []
    best_acc, best_epoch, best_params = -1.0, 0, params.copy()
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(train_idx)
        total = 0.0
        for b in range(0, len(order), train_config.batch_size):
            batch = [graphs[i] for i in order[b:b + train_config.batch_size]]
            tape = Tape()
            logits = forward_batch(batch, params, training=True, rng=rng, weights=params.tracked(tape))
            loss = cross_entropy(logits, [g.label for g in batch])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
            T.backward(loss)
            lr_t = lr_schedule(state.step + 1, train_config.warmup_steps, train_config.base_lr)
            adamw_step(params, state, train_config, lr_t)
            params.zero_grad()
            total += value * len(batch)
        losses.append(total / len(order))
        acc, _ = evaluate(params, val_graphs)
        val_accs.append(acc)
        if acc > best_acc:
            best_acc, best_epoch, best_params = acc, epoch, params.copy()
        logger.debug("epoch %d loss %.4f val_acc %.4f", epoch, losses[-1], acc)

    test_acc, test_f1 = evaluate(best_params, test_graphs)
    report = TrainReport(losses, val_accs, best_epoch, test_acc, test_f1, seed, asdict(model_config),
                         asdict(train_config), (len(split.train), len(split.val), len(split.test)),
                         time.perf_counter() - start)
    return (report, best_params) if return_params else report


# --- repeated experiments --------------------------------------------------------------


@dataclass(frozen=True)
class Summary:
    acc_mean: float
    acc_std: float
    f1_mean: float
    f1_std: float

    @classmethod
    def of(cls, reports: Sequence[TrainReport]) -> "Summary":
        acc = [r.test_accuracy for r in reports]
        f1 = [r.test_f1 for r in reports]
        # population std, computed exactly so identical runs give 0
        return cls(statistics.fmean(acc), statistics.pstdev(acc), statistics.fmean(f1), statistics.pstdev(f1))

    @property
    def accuracy(self) -> str:
        return format_pm(self.acc_mean, self.acc_std)

    @property
    def f1(self) -> str:
        return format_pm(self.f1_mean, self.f1_std)

    def csv_fields(self) -> list[str]:
        return [f"{100 * x:.2f}" for x in (self.acc_mean, self.acc_std, self.f1_mean, self.f1_std)]


def format_pm(mean: float, std: float) -> str:
    """Percent ``mean±std`` with two decimals, e.g. ``70.27±4.34``."""
    return f"{100 * mean:.2f}±{100 * std:.2f}"


@dataclass
class ExperimentResult:
    reports: list[TrainReport]
    summary: Summary
    params: list[ModelParams] = field(default_factory=list, repr=False)


def _run_repetition(args):
    dataset, model_config, train_config, r, keep = args
    seed = train_config.seed + r
    split = split_dataset(dataset, seed)
    return train(dataset, split, model_config, train_config.replace(seed=seed), return_params=keep)


def run_experiment(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
                   jobs: int = 1, keep_params: bool = False) -> ExperimentResult:
    """``repetitions`` independent runs; run ``r`` uses seed ``base_seed + r`` for split and init."""
    tasks = [(dataset, model_config, train_config, r, keep_params) for r in range(train_config.repetitions)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_repetition, tasks))
    else:
        outs = [_run_repetition(t) for t in tasks]
    if keep_params:
        reports, params = [o[0] for o in outs], [o[1] for o in outs]
    else:
        reports, params = outs, []
    return ExperimentResult(reports, Summary.of(reports), params)
