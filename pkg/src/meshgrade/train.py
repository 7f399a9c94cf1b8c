"""Training and evaluation for MQENet graph classification."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import (
    DatasetTooSmall,
    EmptySplit,
    InvalidTarget,
    MixedFeatureWidth,
    NonFiniteLoss,
    SchemaError,
    ShapeMismatch,
    UnnormalizedInput,
)
from .layers import ModelConfig, MQENet

log = logging.getLogger(__name__)

LABEL_NAMES = ("W", "N-O", "N-S", "N-D", "N-OS", "N-OD", "N-SD", "N-OSD")
LOG_HEADER = ("epoch", "train_loss", "val_loss", "lr", "seconds")
SUMMARY_HEADER = ("accuracy", "recall_orthogonality", "recall_smoothing", "recall_distribution")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    clip_norm: float = 1.0
    early_stop_patience: int = 20
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.plateau_factor < 1):
            raise ValueError("plateau_factor must lie in (0, 1)")
        for name in ("lr", "batch_size", "max_epochs", "clip_norm", "min_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def load_config(doc):
    """Split a flat config document into (ModelConfig, TrainConfig)."""
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - model_keys - train_keys
    if unknown:
        raise SchemaError(f"unknown config keys: {sorted(unknown)}")
    try:
        mcfg = ModelConfig(**{k: v for k, v in doc.items() if k in model_keys})
        tcfg = TrainConfig(**{k: v for k, v in doc.items() if k in train_keys})
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad config: {exc}") from None
    return mcfg, tcfg


# ---------------------------------------------------------------------------
# data handling


def _largest_remainder(n, fractions):
    raw = [n * f for f in fractions]
    base = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - base[k]), k))
    for k in order[: n - sum(base)]:
        base[k] += 1
    return base


def split_dataset(labels, seed=0, fractions=(0.6, 0.2, 0.2)):
    """Stratified, seeded 60/20/20 partition into (train, val, test) index arrays.

    Split sizes come from largest-remainder rounding of the whole dataset.
    Members of each class are shuffled, then every item is placed on a common
    axis at its fractional rank ``(2j + 1) / (2 n_class)`` within its class.
    Cutting that axis at the split sizes gives each split a share of every
    class that is proportional to within one item.
    """
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    n = len(labels)
    if n < 5:
        raise DatasetTooSmall(f"need at least 5 items to split, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    targets = _largest_remainder(n, fractions)
    keyed = []
    for c in np.unique(labels):
        members = rng.permutation(np.nonzero(labels == c)[0])
        nc = len(members)
        keyed.extend((Fraction(2 * j + 1, 2 * nc), int(c), int(i)) for j, i in enumerate(members))
    keyed.sort()
    order = [i for _, _, i in keyed]
    cuts = np.cumsum(targets)
    parts = (order[: cuts[0]], order[cuts[0] : cuts[1]], order[cuts[1] :])
    return tuple(np.sort(np.array(p, dtype=np.int64)) for p in parts)


@dataclass
class GraphBatch:
    x: np.ndarray
    edges: np.ndarray
    graph_ids: np.ndarray
    num_graphs: int
    labels: np.ndarray | None = None


def batch_graphs(graphs, labels=None):
    """Stack graphs block-diagonally: features stacked, edges offset, no cross edges."""
    if not graphs:
        raise EmptySplit("cannot batch zero graphs")
    width = graphs[0].features.shape[1]
    if any(g.features.shape[1] != width for g in graphs):
        raise MixedFeatureWidth("graphs in a batch must share the feature width")
    sizes = np.array([g.n for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    x = np.concatenate([g.features for g in graphs])
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)])
    ids = np.repeat(np.arange(len(graphs), dtype=np.int64), sizes)
    if labels is None and all(g.label is not None for g in graphs):
        labels = [g.label for g in graphs]
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return GraphBatch(x, edges.reshape(-1, 2), ids, len(graphs), lab)


def nll_loss(log_probs, targets, n_classes=None):
    """Mean negative log-likelihood of integer targets under log-probability rows."""
    log_probs = T.as_tensor(log_probs)
    if log_probs.ndim == 1:
        log_probs = T.reshape(log_probs, (1, -1))
    targets = np.atleast_1d(np.asarray(targets))
    k = log_probs.shape[1] if n_classes is None else n_classes
    if len(targets) != log_probs.shape[0]:
        raise ShapeMismatch("one target per row required")
    if not np.issubdtype(targets.dtype, np.integer) or targets.min() < 0 or targets.max() >= k:
        raise InvalidTarget(f"targets must be integers in 0..{k - 1}")
    lse = np.log(np.exp(log_probs.data).sum(axis=1))
    if np.any(np.abs(lse) > 1e-6):
        raise UnnormalizedInput("log-probabilities do not sum to one")
    return T.mul(T.sum(T.pick(log_probs, targets)), -1.0 / len(targets))


# ---------------------------------------------------------------------------
# optimization


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)
    t: int = 0


def amsgrad_step(params, grads, state, lr=1e-2, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    """One AMSGrad update, in place on the ``params`` arrays.

    L2 regularization is coupled: ``weight_decay * theta`` is added to the
    gradient before the moment updates.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        if weight_decay:
            g = g + weight_decay * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
            state.v_max[name] = np.zeros_like(theta)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        v_max = state.v_max[name] = np.maximum(state.v_max[name], v)
        theta -= lr * (m / c1) / (np.sqrt(v_max / c2) + eps)
    return params, state


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads, clip_norm):
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads)
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


class PlateauSchedule:
    """Halve the learning rate after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=10, min_lr=1e-5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.bad = 0

    def step(self, metric):
        if metric < self.best:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience=20):
        self.patience = patience
        self.best = math.inf
        self.since_best = 0

    def step(self, metric):
        """Record an epoch; True means stop now."""
        if metric < self.best:
            self.best = metric
            self.since_best = 0
            return False
        self.since_best += 1
        return self.since_best >= self.patience


# ---------------------------------------------------------------------------
# training


def fit_input_scaling(model, graphs):
    x = np.concatenate([g.features for g in graphs])
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    model.input_shift = shift
    model.input_scale = np.where(scale > 1e-12, scale, 1.0)


def _snapshot(model):
    return (
        {k: p.data.copy() for k, p in model.parameters().items()},
        {k: np.array(v, copy=True) for k, v in model.buffers().items()},
    )


def _restore(model, snap):
    params, bufs = snap
    for k, p in model.parameters().items():
        p.data[...] = params[k]
    for k, v in bufs.items():
        model.set_buffer(k, v)


def predict(model, graphs, batch_size=256):
    """Eval-mode log-probabilities, one row per graph."""
    rows = []
    with T.no_grad():
        for s in range(0, len(graphs), batch_size):
            rows.append(model.forward_batch(batch_graphs(graphs[s : s + batch_size])).data)
    return np.concatenate(rows)


def _mean_nll(logp, labels):
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


@dataclass
class TrainResult:
    model: MQENet
    log: list
    split: tuple
    best_epoch: int
    stopped_early: bool


def train(ds, model_cfg=None, train_cfg=None, split=None, on_epoch=None):
    """Train MQENet and return the best-validation model with its epoch log."""
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    graphs, labels = list(ds.graphs), np.asarray(ds.labels, dtype=np.int64)
    if split is None:
        split = split_dataset(labels, train_cfg.seed)
    tr, va, _ = split
    if len(tr) == 0 or len(va) == 0:
        raise EmptySplit("training and validation splits must be non-empty")

    model = MQENet.init(model_cfg, train_cfg.seed)
    fit_input_scaling(model, [graphs[i] for i in tr])
    params = model.parameters()
    arrays = {k: p.data for k, p in params.items()}
    state = OptimizerState()
    sched = PlateauSchedule(
        train_cfg.lr, train_cfg.plateau_factor, train_cfg.plateau_patience, train_cfg.min_lr
    )
    stopper = EarlyStopping(train_cfg.early_stop_patience)
    rng = np.random.Generator(np.random.PCG64(train_cfg.seed + 1))
    val_graphs = [graphs[i] for i in va]
    val_labels = labels[va]

    best, best_epoch, rows, stopped = None, 0, [], False
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        order = rng.permutation(tr)
        total, seen = 0.0, 0
        for s in range(0, len(order), train_cfg.batch_size):
            idx = order[s : s + train_cfg.batch_size]
            batch = batch_graphs([graphs[i] for i in idx], labels[idx])
            model.zero_grad()
            logp = model.forward_batch(batch, training=True)
            loss = nll_loss(logp, batch.labels, model_cfg.out_classes)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, batch starting {s}")
            T.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            grads = clip_gradients(grads, train_cfg.clip_norm)
            amsgrad_step(arrays, grads, state, lr, train_cfg.weight_decay)
            total += value * len(idx)
            seen += len(idx)
        val_loss = _mean_nll(predict(model, val_graphs), val_labels)
        if not math.isfinite(val_loss):
            raise NonFiniteLoss(f"validation loss became {val_loss} at epoch {epoch}")
        if best is None or val_loss < stopper.best:
            best, best_epoch = _snapshot(model), epoch
        stop = stopper.step(val_loss)
        sched.step(val_loss)
        row = {
            "epoch": epoch,
            "train_loss": total / seen,
            "val_loss": val_loss,
            "lr": lr,
            "seconds": time.perf_counter() - t0,
        }
        rows.append(row)
        log.debug("epoch %d train %.4f val %.4f lr %.2e", epoch, row["train_loss"], val_loss, lr)
        if on_epoch is not None:
            on_epoch(row)
        if stop:
            stopped = True
            break
    _restore(model, best)
    return TrainResult(model, rows, split, best_epoch, stopped)


def log_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["lr"]), f"{r['seconds']:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    counts: np.ndarray  # (k, k) raw counts, rows = true label
    confusion: np.ndarray  # row-normalized percentages
    per_class_recall: np.ndarray
    accuracy: float
    label_names: tuple = LABEL_NAMES

    def property_recalls(self):
        """Recall of the single-defect classes N-O, N-S, N-D."""
        return tuple(float(self.per_class_recall[k]) for k in (1, 2, 3))

    def confusion_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Labels"] + [f"{n} (%)" for n in self.label_names])
        for name, row in zip(self.label_names, self.confusion):
            w.writerow([name] + [f"{v:.2f}" for v in row])
        return buf.getvalue()

    def summary_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        vals = (self.accuracy,) + self.property_recalls()
        w.writerow([f"{100 * v:.2f}" for v in vals])
        return buf.getvalue()


def report_from_predictions(true, pred, n_classes=8, label_names=LABEL_NAMES):
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if len(true) == 0:
        raise EmptySplit("cannot evaluate an empty split")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    totals = counts.sum(axis=1)
    safe = np.maximum(totals, 1)[:, None]
    confusion = 100.0 * counts / safe
    recall = np.diag(counts) / np.maximum(totals, 1)
    accuracy = float(np.trace(counts)) / len(true)
    return EvalReport(counts, confusion, recall, accuracy, tuple(label_names))


def evaluate(model, graphs, labels):
    if len(graphs) == 0:
        raise EmptySplit("cannot evaluate an empty split")
    pred = predict(model, list(graphs)).argmax(axis=1)
    return report_from_predictions(labels, pred, model.cfg.out_classes)


# ---------------------------------------------------------------------------
# checkpoints


def _encode(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": [repr(float(v)) for v in arr.ravel()]}


def _decode(doc):
    return np.array([float(v) for v in doc["data"]], dtype=np.float64).reshape(doc["shape"])


def checkpoint_to_json(model, train_cfg=None, state=None, extra=None):
    doc = {
        "format": "meshgrade-checkpoint",
        "version": 1,
        "model_config": model.cfg.to_dict(),
        "train_config": None if train_cfg is None else asdict(train_cfg),
        "params": {k: _encode(p.data) for k, p in model.parameters().items()},
        "buffers": {k: _encode(v) for k, v in model.buffers().items()},
    }
    if state is not None:
        doc["optimizer"] = {
            "t": state.t,
            "m": {k: _encode(v) for k, v in state.m.items()},
            "v": {k: _encode(v) for k, v in state.v.items()},
            "v_max": {k: _encode(v) for k, v in state.v_max.items()},
        }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1)


def checkpoint_from_json(text):
    """Rebuild a model; returns ``(model, document)``."""
    try:
        doc = json.loads(text)
        if doc.get("format") != "meshgrade-checkpoint":
            raise SchemaError("not a meshgrade checkpoint")
        cfg = ModelConfig(**doc["model_config"])
        model = MQENet.init(cfg, 0)
        params = model.parameters()
        if set(params) != set(doc["params"]):
            raise SchemaError("checkpoint parameters do not match the model config")
        for k, p in params.items():
            value = _decode(doc["params"][k])
            if value.shape != p.shape:
                raise SchemaError(f"shape mismatch for {k}")
            p.data[...] = value
        for k, v in doc["buffers"].items():
            model.set_buffer(k, _decode(v))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise SchemaError(f"bad checkpoint: {exc}") from None
    return model, doc
