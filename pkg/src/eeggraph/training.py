"""Cross-validation protocol, Adam, early stopping, training loop and metrics.

Positive class is AD (label 1); specificity is measured on HC (label 0).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata
from sklearn.model_selection import StratifiedKFold

from .ggcn import (BatchedGraph, GgcnConfig, ParamStore, backward, classify_forward, cross_entropy,
                   init_params, predict_proba, update_running_stats)
from .numerics import seeded_rng

log = logging.getLogger(__name__)


# --- splits ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    repeats: int = 5
    outer_folds: int = 5
    inner_folds: int = 4


@dataclass(frozen=True)
class Split:
    repeat: int
    fold: int
    train: tuple
    val: tuple
    test: tuple


def make_splits(subjects, plan: SplitPlan = SplitPlan(), seed: int = 0) -> list[Split]:
    """Repeated stratified outer folds for test; the first stratified inner
    fold of each remaining pool is the validation set."""
    ids = np.array([s for s, _ in subjects], dtype=object)
    labels = np.array([int(lbl) for _, lbl in subjects])
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("subject ids must be unique")
    for cls in (0, 1):
        if (labels == cls).sum() < plan.outer_folds:
            raise ValueError(f"class {cls} has {(labels == cls).sum()} subjects, need >= {plan.outer_folds}")
    splits = []
    # pure-int seeds keep sklearn's shuffling reproducible across runs
    root = np.random.SeedSequence(seed)
    for rep, child in enumerate(root.spawn(plan.repeats)):
        rs = int(child.generate_state(1)[0])
        outer = StratifiedKFold(plan.outer_folds, shuffle=True, random_state=rs)
        for fold, (pool, test) in enumerate(outer.split(ids, labels)):
            inner = StratifiedKFold(plan.inner_folds, shuffle=True, random_state=rs + fold + 1)
            tr, va = next(inner.split(ids[pool], labels[pool]))
            splits.append(Split(rep, fold, tuple(ids[pool][tr]), tuple(ids[pool][va]), tuple(ids[test])))
    return splits


# --- optimiser ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 16
    max_epochs: int = 300
    patience: int = 15
    min_delta: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 1e-4 <= self.learning_rate <= 1e-2:
            raise ValueError(f"learning_rate must be in [1e-4, 1e-2], got {self.learning_rate}")
        if self.batch_size not in (16, 32, 64):
            raise ValueError(f"batch_size must be 16, 32 or 64, got {self.batch_size}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, t: int | None = None,
              beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("Adam step counter must be >= 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state.t = t
    return state


class EarlyStopping:
    """Stop once the monitored loss has not improved by more than ``min_delta``
    for ``patience`` consecutive epochs."""

    def __init__(self, patience: int = 15, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.counter = 0

    def step(self, loss: float, epoch: int) -> bool:
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.counter = loss, epoch, 0
            return False
        self.counter += 1
        return self.counter >= self.patience


# --- training loop --------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass
class TrainResult:
    store: ParamStore
    best_epoch: int
    best_val_loss: float
    history: list  # dicts with epoch, train_loss, val_loss
    stopped_early: bool


def dataset_loss(graphs, config: GgcnConfig, store: ParamStore, batch_size: int = 64) -> float:
    total, n = 0.0, 0
    for i in range(0, len(graphs), batch_size):
        chunk = graphs[i:i + batch_size]
        batch = BatchedGraph.from_graphs(chunk)
        loss, _ = cross_entropy(classify_forward(batch, config, store, "eval").logits, batch.labels)
        total += loss * len(chunk)
        n += len(chunk)
    return total / n


def train_model(config: TrainConfig, ggcn_config: GgcnConfig, train_set, val_set) -> TrainResult:
    """Adam training with early stopping on validation loss; returns the
    parameters of the best validation epoch."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be nonempty")
    rng = seeded_rng(config.seed)
    store = init_params(ggcn_config, seed=int(rng.integers(2 ** 31)))
    adam = AdamState()
    stopper = EarlyStopping(config.patience, config.min_delta)
    best = store.copy()
    history = []
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            if len(idx) == 1 and len(order) > 1:
                idx = order[i - 1:i + 1]  # batch norm needs >= 2 graphs' worth of nodes
            batch = BatchedGraph.from_graphs([train_set[j] for j in idx])
            trace = classify_forward(batch, ggcn_config, store, "train", rng=rng)
            loss, dlogits = cross_entropy(trace.logits, batch.labels)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            backward(trace, dlogits, store, ggcn_config)
            update_running_stats(store, trace)
            try:
                adam_step(store.params, store.grads, adam, config.learning_rate,
                          beta1=config.beta1, beta2=config.beta2, eps=config.eps)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            store.bump()
            losses.append(loss * len(idx))
        val_loss = dataset_loss(val_set, ggcn_config, store)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch, "validation loss")
        history.append({"epoch": epoch, "train_loss": sum(losses) / len(order), "val_loss": val_loss})
        improved_before = stopper.best_epoch
        stop = stopper.step(val_loss, epoch)
        if stopper.best_epoch != improved_before:
            best = store.copy()
        if stop:
            stopped = True
            break
    return TrainResult(best, stopper.best_epoch, stopper.best, history, stopped)


# --- metrics --------------------------------------------------------------

@dataclass
class MetricReport:
    auc: float | None
    f1: float
    precision: float
    recall: float
    accuracy: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int
    auc_note: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_NAMES = ("auc", "f1", "precision", "recall", "accuracy", "specificity")


def _safe_div(a, b):
    return a / b if b else 0.0


def confusion_metrics(tp: int, fp: int, tn: int, fn: int) -> dict:
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    return {
        "precision": precision,
        "recall": recall,
        "specificity": _safe_div(tn, tn + fp),
        "accuracy": _safe_div(tp + tn, tp + fp + tn + fn),
        "f1": _safe_div(2 * precision * recall, precision + recall),
    }


def roc_auc(labels, scores) -> float:
    """Rank-based AUC (Mann-Whitney U / (n_pos * n_neg)); ties count one half."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=float)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric_report(labels, scores, threshold: float = 0.5) -> MetricReport:
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=float)
    if labels.size == 0:
        raise ValueError("empty test set")
    pred = (scores > threshold).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    try:
        auc, note = roc_auc(labels, scores), None
    except ValueError:
        auc, note = None, "undefined: test set contains a single class"
    return MetricReport(auc=auc, tp=tp, fp=fp, tn=tn, fn=fn, auc_note=note, **confusion_metrics(tp, fp, tn, fn))


def evaluate(store: ParamStore, config: GgcnConfig, test_set) -> MetricReport:
    if not test_set:
        raise ValueError("empty test set")
    probs = predict_proba(test_set, config, store)
    return metric_report([g.label for g in test_set], probs)


def summarize(reports) -> dict:
    """Mean and sample standard deviation per metric over CV iterations."""
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not vals:
            out[name] = {"mean": None, "sd": None, "n": 0}
            continue
        arr = np.array(vals, dtype=float)
        sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out[name] = {"mean": float(arr.mean()), "sd": sd, "n": int(arr.size)}
    return out


def _run_split(args):
    k, split, graphs_by_subject, ggcn_config, train_config, keep_models = args
    tc = TrainConfig(**{**train_config.to_dict(), "seed": train_config.seed * 1000 + k})

    def pick(ids):
        return [g for s in ids for g in graphs_by_subject[s]]

    res = train_model(tc, ggcn_config, pick(split.train), pick(split.val))
    report = evaluate(res.store, ggcn_config, pick(split.test))
    out = {"split": split, "report": report, "best_epoch": res.best_epoch,
           "epochs": len(res.history), "best_val_loss": res.best_val_loss}
    if keep_models:
        out["store"] = res.store
    return out


def cross_validate(graphs_by_subject: dict, labels_by_subject: dict, ggcn_config: GgcnConfig,
                   train_config: TrainConfig, plan: SplitPlan = SplitPlan(), seed: int = 0,
                   jobs: int = 1, keep_models: bool = False) -> list[dict]:
    """Run the repeated CV protocol.

    ``graphs_by_subject`` maps subject id to a list of graphs. Returns one dict
    per iteration (split, report, best epoch, optionally the trained store).
    Results do not depend on ``jobs``: each iteration owns its seed.
    """
    subjects = sorted(labels_by_subject.items())
    splits = make_splits(subjects, plan, seed)
    tasks = [(k, s, graphs_by_subject, ggcn_config, train_config, keep_models) for k, s in enumerate(splits)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_run_split, tasks))
    return [_run_split(t) for t in tasks]
