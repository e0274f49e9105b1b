"""Desk-scale supervised training with SGD + momentum and step LR decay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import container
from .autodiff import TrainGraph
from .builders import GraphBuilder
from .datakit import LabeledDataset
from .errors import InvalidArgumentError, TrainingDivergedError, UnsupportedPatternError
from .graph import Graph
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr0: float = 0.01
    momentum: float = 0.9
    lr_step_epochs: int = 7
    lr_gamma: float = 0.1
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr_step_epochs < 1:
            raise InvalidArgumentError("epochs, batch_size and lr_step_epochs must be positive")
        if not self.lr0 > 0:
            raise InvalidArgumentError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidArgumentError("weight_decay must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = 0.0
    checkpoint: Optional[str] = None
    config: Dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{'epoch':>5}  {'lr':>10}  {'loss':>8}  {'train_acc':>9}  {'val_acc':>7}"]
        for r in self.epochs:
            lines.append(f"{r.epoch:>5}  {r.lr:>10.3g}  {r.train_loss:>8.4f}  {r.train_acc:>9.4f}  {r.val_acc:>7.4f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * gamma ** floor(epoch / step)."""
    if epoch < 0:
        raise InvalidArgumentError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_gamma ** (epoch // cfg.lr_step_epochs)


def cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if k < 2:
        raise InvalidArgumentError("cross_entropy needs at least 2 classes")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidArgumentError(f"label outside [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    grad = np.exp(z - lse[:, None])
    grad[rows, labels] -= 1
    return loss, grad / n


def backward(g: Graph, batch: np.ndarray, labels, dtype=np.float32) -> Dict[str, np.ndarray]:
    """Cross-entropy gradients of every trainable tensor, keyed ``node.weight``.

    BatchNorm uses batch statistics, as during training.
    """
    tg = TrainGraph(g, dtype)
    logits = tg.forward(batch, training=True)
    _, dl = cross_entropy(logits, labels)
    return {f"{k[0]}.{k[1]}": v for k, v in tg.backward(dl).items()}


class SGD:
    def __init__(self, params: Dict, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict, lr: float):
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p -= lr * v


def _accuracy(tg: TrainGraph, ds: LabeledDataset, batch_size: int) -> float:
    if len(ds) == 0:
        return 0.0
    correct = 0
    for i in range(0, len(ds), batch_size):
        logits = tg.forward(ds.images[i : i + batch_size], training=False)
        correct += int((logits.argmax(axis=1) == ds.labels[i : i + batch_size]).sum())
    return correct / len(ds)


def train(
    g: Graph,
    train_ds: LabeledDataset,
    val_ds: Optional[LabeledDataset],
    cfg: TrainConfig = TrainConfig(),
    checkpoint=None,
) -> Tuple[Graph, TrainReport]:
    """Train all layers; returns the best-validation-accuracy weights.

    Without a validation set the final epoch's weights are returned. Same
    seed, same data order in, same bits out.
    """
    if len(train_ds) == 0:
        raise InvalidArgumentError("training set is empty")
    if tuple(train_ds.images.shape[1:]) != g.input_shape:
        raise InvalidArgumentError(
            f"image shape {train_ds.images.shape[1:]} does not match model input {g.input_shape}"
        )
    if train_ds.num_classes != g.metadata["num_classes"]:
        raise InvalidArgumentError(
            f"dataset has {train_ds.num_classes} classes, model head has {g.metadata['num_classes']}"
        )
    tg = TrainGraph(g, np.float32)
    opt = SGD(tg.params, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(config=asdict(cfg))
    best_state = None
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            logits = tg.forward(train_ds.images[idx], training=True)
            loss, dl = cross_entropy(logits, train_ds.labels[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {i // cfg.batch_size} (lr {lr:g}); "
                    "try a smaller lr0"
                )
            opt.step(tg.backward(dl), lr)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == train_ds.labels[idx]).sum())
        val_acc = _accuracy(tg, val_ds, 256) if val_ds is not None else 0.0
        rec = EpochRecord(epoch, lr, total_loss / n, correct / n, val_acc)
        report.epochs.append(rec)
        log.info("epoch %d lr %.3g loss %.4f train_acc %.4f val_acc %.4f", epoch, lr, rec.train_loss, rec.train_acc, val_acc)
        if val_ds is None or best_state is None or val_acc > report.best_val_acc:
            report.best_epoch, report.best_val_acc = epoch, val_acc
            best_state = tg.state()
    tg.load_state(best_state)
    out = tg.to_graph()
    out.metadata["class_names"] = list(train_ds.class_names)
    if checkpoint is not None:
        container.save(out, checkpoint)
        report.checkpoint = str(checkpoint)
    return out, report


def replace_head(g: Graph, num_classes: int, seed: int = 0) -> Graph:
    """Swap the final fc (the one feeding the softmax) for a fresh ``in x num_classes`` layer."""
    if num_classes < 2:
        raise InvalidArgumentError("num_classes must be >= 2")
    if g.quantization != "none":
        raise InvalidArgumentError("replace_head needs an unquantized graph")
    out = g.copy()
    soft = out.node(out.outputs[0])
    if soft.op != "softmax":
        raise UnsupportedPatternError("graph does not end in a softmax")
    head = out.node(soft.inputs[0])
    if head.op != "fc":
        raise UnsupportedPatternError(f"no trailing fully-connected layer (found '{head.op}')")
    fin = head.attrs["in_features"]
    b = GraphBuilder(out.input_shape, seed)
    head.weights = {"kernel": b.he_uniform((fin, num_classes), fin), "bias": Tensor(np.zeros(num_classes, np.float32))}
    head.attrs["out_features"] = num_classes
    out.metadata["num_classes"] = num_classes
    out.metadata.pop("class_names", None)
    return out.validate()
