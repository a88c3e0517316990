"""Losses, Adam, metrics, the training loop, and cross-validation.

Training follows a fixed protocol: Adam at lr 1e-3 with weight decay 1e-6,
early stopping once the validation loss has not improved for `patience`
epochs (capped at max_epochs), parameters restored from the best-val epoch.
Node tasks train full-graph per epoch; graph tasks iterate shuffled
mini-batches merged block-diagonally.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Rng, Tensor
from .graphs import Dataset, Graph, Split, make_batch
from .model import (ModelConfig, ModelParams, forward, init_model,
                    logits_for, mark_trainable)

cross_entropy = ad.cross_entropy
bce_multilabel = ad.bce_multilabel


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, why: str = "non-finite loss"):
        self.epoch = epoch
        super().__init__(f"{why} at epoch {epoch}")


@dataclass
class TrainConfig:
    model: ModelConfig
    lr: float = 1e-3
    weight_decay: float = 1e-6
    max_epochs: int = 1000
    patience: int = 300
    batch_size: int = 256
    seed: int = 0
    metric: str = "accuracy"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.patience > self.max_epochs:
            raise ValueError("patience must be <= max_epochs")


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "OptimState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


@dataclass
class TrainReport:
    epochs: int = 0
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    best_epoch: int = 0
    test_metric: float = 0.0
    seconds: float = 0.0

    def to_json(self) -> dict:
        # wall-clock seconds stay out of the serialized report so reruns
        # with the same seed produce byte-identical files
        return {"epochs": self.epochs, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "val_metric": self.val_metric,
                "best_epoch": self.best_epoch, "test_metric": self.test_metric}


def adam_step(params: list[Tensor], grads: dict[Tensor, np.ndarray],
              opt: OptimState, lr: float, weight_decay: float,
              decay_flags: list[bool] | None = None) -> list[Tensor]:
    """Classic Adam with bias correction; L2 enters through the gradient."""
    opt.t += 1
    b1c = 1.0 - opt.beta1 ** opt.t
    b2c = 1.0 - opt.beta2 ** opt.t
    for i, p in enumerate(params):
        g = grads[p]
        if g.shape != p.data.shape:
            raise ad.ShapeError("adam_step", g.shape, p.data.shape)
        if weight_decay and (decay_flags is None or decay_flags[i]):
            g = g + weight_decay * p.data
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * (g * g)
        m_hat = opt.m[i] / b1c
        v_hat = opt.v[i] / b2c
        p.data -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return params


# ---------------------------------------------------------------------------
# metrics


def metric(kind: str, scores: np.ndarray, labels: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("empty inputs")
    if kind == "accuracy":
        pred = scores.argmax(axis=1) if scores.ndim == 2 else (scores > 0).astype(np.intp)
        return float(np.mean(pred == labels.ravel()))
    if kind == "roc-auc":
        return _roc_auc(_positive_scores(scores), labels.ravel())
    if kind == "avg-precision":
        if scores.ndim == 2 and labels.ndim == 2 and scores.shape[1] > 1:
            cols = [c for c in range(scores.shape[1])
                    if 0 < labels[:, c].sum() < labels.shape[0]]
            if not cols:
                raise ValueError("no label column with both classes")
            return float(np.mean([_avg_precision(scores[:, c], labels[:, c]) for c in cols]))
        return _avg_precision(_positive_scores(scores), labels.ravel())
    raise ValueError(f"unknown metric {kind!r}")


def _positive_scores(scores: np.ndarray) -> np.ndarray:
    if scores.ndim == 2 and scores.shape[1] == 2:
        return scores[:, 1] - scores[:, 0]
    return scores.ravel()


def _roc_auc(s: np.ndarray, y: np.ndarray) -> float:
    """Concordant-pair fraction with ties counted 1/2 (midrank form)."""
    y = y.astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc-auc needs both classes")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty_like(s)
    sorted_s = s[order]
    i = 0
    r = np.arange(1, len(s) + 1, dtype=np.float64)
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        r[i:j + 1] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    ranks[order] = r
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _avg_precision(s: np.ndarray, y: np.ndarray) -> float:
    """Area under precision-recall by step interpolation over thresholds."""
    y = y.astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("avg-precision needs a positive example")
    order = np.argsort(-s, kind="mergesort")
    hits = y[order].astype(np.float64)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(s) + 1)
    recall = tp / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


# ---------------------------------------------------------------------------
# loss/metric evaluation helpers


def _node_loss(graph: Graph, state, params, config: ModelConfig, task: str,
               idx: np.ndarray) -> Tensor:
    logits = logits_for(graph, state, params, config, task)
    if task == "multilabel":
        return bce_multilabel(ad.gather_rows(logits, idx), graph.y[idx])
    return cross_entropy(ad.gather_rows(logits, idx), graph.y[idx])


def _eval_node(graph: Graph, params, config: ModelConfig, task: str,
               idx: np.ndarray, kind: str) -> tuple[float, float]:
    with ad.no_grad():
        state, _ = forward(graph, params, config, mode="eval")
        loss = _node_loss(graph, state, params, config, task, idx).item()
        logits = logits_for(graph, state, params, config, task)
        scores = logits.data[idx]
    return loss, metric(kind, scores, graph.y[idx])


def _eval_graphs(dataset: Dataset, params, config: ModelConfig,
                 idx: np.ndarray, kind: str, batch_size: int) -> tuple[float, float]:
    losses, all_scores, all_labels = [], [], []
    with ad.no_grad():
        for at in range(0, len(idx), batch_size):
            chunk = idx[at:at + batch_size]
            batch = make_batch([dataset.graphs[i] for i in chunk])
            state, _ = forward(batch, params, config, mode="eval")
            logits = logits_for(batch, state, params, config, dataset.task)
            labels = np.array([int(dataset.graphs[i].y[0]) for i in chunk])
            losses.append(cross_entropy(logits, labels).item() * len(chunk))
            all_scores.append(logits.data)
            all_labels.append(labels)
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    return float(np.sum(losses) / len(idx)), metric(kind, scores, labels)


# ---------------------------------------------------------------------------
# training loops


def train(dataset: Dataset, split: Split, config: TrainConfig,
          log=None) -> tuple[ModelParams, TrainReport]:
    """Train one model; returns the best-val parameters and the full report."""
    t0 = time.perf_counter()
    rng = Rng(config.seed)
    params = init_model(config.model, rng.child(0))
    mark_trainable(params)
    leaves = params.leaves()
    tensors = [t for _, t, _ in leaves]
    decay_flags = [f for _, _, f in leaves]
    opt = OptimState.for_params(tensors)
    drop_rng = rng.child(1)
    shuffle_rng = rng.child(2)

    node_task = dataset.task in ("node-class", "multilabel") and len(dataset.graphs) == 1
    if len(split.train) == 0 or len(split.val) == 0:
        raise ValueError("empty train or val split")

    report = TrainReport()
    best_val = np.inf
    best_state = None
    since_best = 0

    for epoch in range(config.max_epochs):
        if node_task:
            graph = dataset.graphs[0]
            state, _ = forward(graph, params, config.model, mode="train", rng=drop_rng)
            loss = _node_loss(graph, state, params, config.model, dataset.task,
                              split.train)
            train_loss = loss.item()
            if not np.isfinite(train_loss):
                raise TrainingDiverged(epoch)
            grads = ad.backward(loss, wrt=tensors)
            adam_step(tensors, grads, opt, config.lr, config.weight_decay, decay_flags)
            val_loss, val_metric = _eval_node(graph, params, config.model,
                                              dataset.task, split.val, config.metric)
        else:
            order = split.train[shuffle_rng.permutation(len(split.train))]
            epoch_losses = []
            for at in range(0, len(order), config.batch_size):
                chunk = order[at:at + config.batch_size]
                batch = make_batch([dataset.graphs[i] for i in chunk])
                state, _ = forward(batch, params, config.model, mode="train", rng=drop_rng)
                logits = logits_for(batch, state, params, config.model, dataset.task)
                labels = np.array([int(dataset.graphs[i].y[0]) for i in chunk])
                loss = cross_entropy(logits, labels)
                lval = loss.item()
                if not np.isfinite(lval):
                    raise TrainingDiverged(epoch)
                epoch_losses.append(lval * len(chunk))
                grads = ad.backward(loss, wrt=tensors)
                adam_step(tensors, grads, opt, config.lr, config.weight_decay, decay_flags)
            train_loss = float(np.sum(epoch_losses) / len(order))
            val_loss, val_metric = _eval_graphs(dataset, params, config.model,
                                                split.val, config.metric,
                                                config.batch_size)

        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.val_metric.append(val_metric)
        report.epochs = epoch + 1
        if log:
            log(epoch, train_loss, val_loss, val_metric)

        if val_loss < best_val:
            best_val = val_loss
            report.best_epoch = epoch
            best_state = [t.data.copy() for t in tensors]
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break

    if best_state is not None:
        for t, data in zip(tensors, best_state):
            t.data = data

    if node_task:
        _, report.test_metric = _eval_node(dataset.graphs[0], params, config.model,
                                           dataset.task, split.test, config.metric)
    else:
        _, report.test_metric = _eval_graphs(dataset, params, config.model,
                                             split.test, config.metric,
                                             config.batch_size)
    report.seconds = time.perf_counter() - t0
    return params, report


def cross_validate(dataset: Dataset, folds: int, config: TrainConfig,
                   log=None) -> tuple[float, float, list[float]]:
    """K-fold over graphs; reports mean and population std of the test metric."""
    from .graphs import kfold_splits
    splits = kfold_splits(len(dataset.graphs), folds, config.seed)
    metrics = []
    for f, split in enumerate(splits):
        fold_config = TrainConfig(
            model=config.model, lr=config.lr, weight_decay=config.weight_decay,
            max_epochs=config.max_epochs, patience=config.patience,
            batch_size=config.batch_size, seed=config.seed + 1000 * (f + 1),
            metric=config.metric)
        _, rep = train(dataset, split, fold_config)
        metrics.append(rep.test_metric)
        if log:
            log(f, rep.test_metric)
    arr = np.array(metrics)
    return float(arr.mean()), float(arr.std()), metrics
