"""Multiple instance learning over bags of one-second instances.

A bag's score for class n is the maximum of its instances' class-n
posteriors. The loss gradient for class n flows back only through the
instance that attained that maximum.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn
from .errors import (
    DimensionMismatch,
    DivergedLoss,
    EmptyBag,
    EmptyClass,
    EmptyDataset,
    InvalidConfig,
    ShapeMismatch,
    StalePrediction,
)
from .evalfuse import micro_prf_arrays, threshold_decisions

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class Bag:
    id: str
    instances: np.ndarray  # n_instances x feature shape
    labels: np.ndarray  # multi-hot, n_classes

    def __post_init__(self):
        if len(self.instances) == 0:
            raise EmptyBag(f"bag {self.id!r} has no instances")
        self.instances = np.stack([np.asarray(x, dtype=np.float64) for x in self.instances])
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.ndim != 1 or not np.all((self.labels == 0) | (self.labels == 1)):
            raise DimensionMismatch(f"bag {self.id!r}: labels must be a 0/1 vector")

    def __len__(self):
        return len(self.instances)


@dataclass(frozen=True, eq=False)
class BagPrediction:
    instance_scores: np.ndarray  # n_instances x n_classes
    bag_scores: np.ndarray
    argmax_idx: np.ndarray
    instance_logits: np.ndarray | None = None
    bag_id: str | None = None
    params_ref: tuple | None = field(default=None, repr=False)

    @classmethod
    def from_scores(cls, instance_scores, instance_logits=None, bag_id=None, params_ref=None):
        s = np.asarray(instance_scores, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] == 0:
            raise EmptyBag("need at least one instance row of scores")
        idx = s.argmax(axis=0)  # ties -> lowest instance index
        bag = s[idx, np.arange(s.shape[1])]
        return cls(s, bag, idx, instance_logits, bag_id, params_ref)

    @property
    def bag_logits(self) -> np.ndarray | None:
        if self.instance_logits is None:
            return None
        return self.instance_logits[self.argmax_idx, np.arange(self.instance_logits.shape[1])]


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise InvalidConfig(f"class weights must be positive and finite, got {w}")
        object.__setattr__(self, "w", w)

    def __len__(self):
        return len(self.w)


def _as_weights(weights, n) -> np.ndarray:
    w = weights.w if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise DimensionMismatch(f"{len(w)} class weights for {n} classes")
    return w


def class_weights(label_counts, cap: float | None = 50.0) -> ClassWeights:
    """Inverse-frequency weights (sum N)/(C * N_n), optionally capped."""
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 1):
        missing = [int(i) for i in np.flatnonzero(counts < 1)]
        raise EmptyClass(f"classes {missing} have no positive examples")
    w = counts.sum() / (counts.size * counts)
    if cap is not None:
        w = np.minimum(w, cap)
    return ClassWeights(w)


def _instance_logits(model: nn.Model, x) -> np.ndarray:
    x = np.asarray(x)
    logits, _ = nn.forward_logits(model, x[None])
    return logits[0]


def bag_forward(model: nn.Model, bag: Bag) -> BagPrediction:
    if len(bag) == 0:
        raise EmptyBag(f"bag {bag.id!r} has no instances")
    # one forward per instance: keeps scores bit-identical to the streaming path
    logits = np.stack([_instance_logits(model, x) for x in bag.instances])
    return BagPrediction.from_scores(nn.sigmoid(logits), logits, bag.id, model.params)


def mil_loss(pred: BagPrediction, labels, weights) -> float:
    """Class-weighted binary cross-entropy between bag scores and weak labels."""
    y = np.asarray(labels, dtype=np.float64)
    n = pred.bag_scores.shape[0]
    if y.shape != (n,):
        raise DimensionMismatch(f"{y.size} labels for {n} classes")
    w = _as_weights(weights, n)
    z = pred.bag_logits
    if z is not None:
        per_class = -(y * nn.log_sigmoid(z) + (1 - y) * nn.log_sigmoid(-z))
    else:
        p = np.clip(pred.bag_scores, PROB_CLAMP, 1 - PROB_CLAMP)
        per_class = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(np.sum(w * per_class))


def _routed(model, items, w, scale=1.0):
    """Gradient of the weighted bag losses routed through each class's argmax instance.

    ``items`` holds (instances, argmax_idx, labels) per bag. Only the selected
    instances are run forward again and back-propagated, in one batch.
    Returns (param grads, input grads of the selected rows, selected row indices per bag).
    """
    xs, rows, ys, sels = [], [], [], []
    offset = 0
    for instances, idx, y in items:
        sel, pos = np.unique(idx, return_inverse=True)
        xs.append(instances[sel])
        rows.append(offset + pos)
        ys.append(y)
        sels.append(sel)
        offset += len(sel)
    z, cache = nn.forward_logits(model, np.concatenate(xs))
    r = np.concatenate(rows)
    c = np.tile(np.arange(len(w)), len(items))
    g = np.zeros_like(z)
    g[r, c] = scale * np.tile(w, len(items)) * (nn.sigmoid(z[r, c]) - np.concatenate(ys))
    grads = nn.backward(model, cache, g)
    return grads.params, grads.input, sels


def mil_backward(model: nn.Model, bag: Bag, pred: BagPrediction, labels, weights) -> nn.Gradients:
    if pred.params_ref is not model.params or pred.bag_id != bag.id or len(pred.instance_scores) != len(bag):
        raise StalePrediction(f"prediction does not come from bag_forward on this model and bag {bag.id!r}")
    y = np.asarray(labels, dtype=np.float64)
    w = _as_weights(weights, model.n_classes)
    if y.shape != w.shape:
        raise DimensionMismatch(f"{y.size} labels for {w.size} classes")
    pgrads, sel_grad, (sel,) = _routed(model, [(bag.instances, pred.argmax_idx, y)], w)
    input_grad = np.zeros((len(bag),) + model.input_shape)
    input_grad[sel] = sel_grad
    return nn.Gradients(params=pgrads, input=input_grad.reshape(bag.instances.shape))


@dataclass
class AdamState:
    t: int
    m: tuple
    v: tuple
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, **hyper) -> "AdamState":
        zeros = tuple(np.zeros_like(p) for p in params)
        return cls(0, zeros, tuple(np.zeros_like(p) for p in params), **hyper)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Returns fresh (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {np.shape(g)}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return tuple(new_p), AdamState(t, tuple(new_m), tuple(new_v), state.lr, b1, b2, state.eps)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    selection_pooling: str = "max"  # mean pooling of sparse events never clears 0.5
    selection_metric: str = "micro_f1"
    threshold: float = 0.5
    weight_cap: float | None = 50.0

    def __post_init__(self):
        if self.selection_pooling not in ("max", "mean"):
            raise InvalidConfig(f"selection_pooling must be max or mean, got {self.selection_pooling!r}")
        if self.selection_metric != "micro_f1":
            raise InvalidConfig(f"unsupported selection_metric {self.selection_metric!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise InvalidConfig("epochs >= 0, batch_size >= 1 and lr > 0 required")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: nn.Model
    log: list[dict]
    best_epoch: int
    best_metric: float


def clip_scores(model: nn.Model, bags: Sequence[Bag], pooling: str = "max", chunk: int = 512) -> np.ndarray:
    """Pooled clip posteriors for many bags, using batched forwards."""
    sizes = [len(b) for b in bags]
    stacked = np.concatenate([b.instances for b in bags])
    scores = np.concatenate([nn.predict(model, stacked[i : i + chunk]) for i in range(0, len(stacked), chunk)])
    out = []
    start = 0
    for n in sizes:
        s = scores[start : start + n]
        out.append(s.max(axis=0) if pooling == "max" else s.mean(axis=0))
        start += n
    return np.array(out)


def validation_f1(model, bags, pooling="mean", threshold=0.5) -> float:
    scores = clip_scores(model, bags, pooling)
    ref = np.array([b.labels for b in bags])
    return micro_prf_arrays(threshold_decisions(scores, threshold), ref)["f1"]


def mil_batch_gradient(model: nn.Model, bags: Sequence[Bag], w: np.ndarray):
    """Mean routed MIL loss and gradient over a mini-batch of bags."""
    stacked = np.concatenate([b.instances for b in bags])
    z_all = nn.logits(model, stacked)
    items = []
    loss = 0.0
    start = 0
    for bag in bags:
        z = z_all[start : start + len(bag)]
        start += len(bag)
        idx = z.argmax(axis=0)  # sigmoid is monotone, so this is the score argmax
        y = bag.labels.astype(np.float64)
        bag_z = z[idx, np.arange(z.shape[1])]
        loss += float(np.sum(w * -(y * nn.log_sigmoid(bag_z) + (1 - y) * nn.log_sigmoid(-bag_z))))
        items.append((bag.instances, idx, y))
    grads, _, _ = _routed(model, items, w, 1.0 / len(bags))
    return loss / len(bags), grads


def fit(
    model: nn.Model,
    bags: Sequence[Bag],
    val: Sequence[Bag],
    cfg: TrainConfig,
    batch_gradient: Callable = mil_batch_gradient,
    log_path=None,
) -> TrainResult:
    """Shared epoch loop: seeded shuffling, Adam updates, clip-level checkpoint selection."""
    if not bags or not val:
        raise EmptyDataset("training and validation sets must be non-empty")
    if model.inference_only:
        raise InvalidConfig("cannot train an inference-only model")
    n_classes = model.n_classes
    for b in list(bags) + list(val):
        if b.labels.shape != (n_classes,):
            raise DimensionMismatch(f"bag {b.id!r} has {b.labels.size} labels, model has {n_classes} classes")
    w = class_weights(np.sum([b.labels for b in bags], axis=0), cfg.weight_cap).w

    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(model.params, lr=cfg.lr)
    best = model
    best_metric = validation_f1(model, val, cfg.selection_pooling, cfg.threshold) if cfg.epochs else float("nan")
    best_epoch = 0
    history: list[dict] = []
    sink = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(bags))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = [bags[i] for i in order[start : start + cfg.batch_size]]
                loss, grads = batch_gradient(model, batch, w)
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                    ids = ", ".join(b.id for b in batch)
                    raise DivergedLoss(f"non-finite loss at epoch {epoch}, batch starting {start} (bags: {ids})")
                params, state = adam_step(model.params, grads, state)
                model = model.with_params(params)
                total += loss * len(batch)
            metric = validation_f1(model, val, cfg.selection_pooling, cfg.threshold)
            selected = metric > best_metric
            if selected:
                best, best_metric, best_epoch = model, metric, epoch
            rec = {
                "epoch": epoch,
                "train_loss": total / len(bags),
                "val_metric": metric,
                "selected": bool(selected),
                "pooling": cfg.selection_pooling,
            }
            history.append(rec)
            log.info("epoch %d loss %.5f val_f1 %.4f%s", epoch, rec["train_loss"], metric, " *" if selected else "")
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return TrainResult(best, history, best_epoch, best_metric)


def train(model: nn.Model, bags: Sequence[Bag], val: Sequence[Bag], cfg: TrainConfig = TrainConfig(), log_path=None):
    """Train with the routed MIL loss; returns the best checkpoint by validation micro-F1."""
    return fit(model, bags, val, cfg, mil_batch_gradient, log_path)


@dataclass(frozen=True)
class StreamRecord:
    index: int
    scores: np.ndarray | None
    decisions: np.ndarray | None
    error: str | None = None

    def to_json(self, class_list=None) -> dict:
        if self.error is not None:
            return {"index": self.index, "error": self.error}
        rec = {"index": self.index, "scores": [float(s) for s in self.scores],
               "decisions": [int(d) for d in self.decisions]}
        if class_list is not None:
            rec["events"] = [c for c, d in zip(class_list, self.decisions) if d]
        return rec


def stream_tag(model: nn.Model, source: Iterable, threshold=0.5):
    """Score instances one at a time as they arrive, yielding a record per instance."""
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (model.n_classes,))
    for j, x in enumerate(source):
        try:
            scores = nn.sigmoid(_instance_logits(model, x))
        except ShapeMismatch as e:
            yield StreamRecord(j, None, None, error=str(e))
            continue
        yield StreamRecord(j, scores, threshold_decisions(scores, thr))
