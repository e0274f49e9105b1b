"""Classification metrics, size accounting, comparison tables and model selection."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import container
from .datakit import LabeledDataset
from .engine import Executor, parse_mode
from .errors import InvalidArgumentError, NoFeasibleModelError
from .graph import Graph

MODE_LABELS = {"none": "No optimization", "fp16": "Float16 quantization", "dynamic": "Dynamic range quantization", "full-int": "Full integer quantization"}


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_precision: List[float]
    per_class_recall: List[float]
    per_class_f1: List[float]


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b != 0)


def metrics_from_cm(cm) -> Metrics:
    """Accuracy plus macro (unweighted) precision, recall and F1.

    Classes with a zero denominator score 0 and still count in the macro mean.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise InvalidArgumentError("confusion matrix must be square")
    if np.any(cm < 0):
        raise InvalidArgumentError("confusion matrix has negative counts")
    total = int(cm.sum())
    if total == 0:
        raise InvalidArgumentError("confusion matrix is empty")
    tp = np.diag(cm)
    p = _safe_div(tp, cm.sum(axis=0))
    r = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * p * r, p + r)
    return Metrics(
        accuracy=float(tp.sum() / total),
        precision=float(p.mean()),
        recall=float(r.mean()),
        f1=float(f1.mean()),
        per_class_precision=p.tolist(),
        per_class_recall=r.tolist(),
        per_class_f1=f1.tolist(),
    )


@dataclass
class EvalReport:
    model_id: str
    model: str
    mode: str
    size_bytes: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: Dict[str, Dict[str, float]] = field(default_factory=dict)
    confusion: List[List[int]] = field(default_factory=list)
    num_samples: int = 0
    latency_ms_per_sample: float = 0.0
    model_sha256: str = ""
    config: Dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        known = {f for f in cls.__dataclass_fields__}
        missing = {"model_id", "mode", "size_bytes", "accuracy", "precision", "recall", "f1"} - set(d)
        if missing:
            raise InvalidArgumentError(f"report is missing fields {sorted(missing)}")
        d = {k: v for k, v in d.items() if k in known}
        d.setdefault("model", d["model_id"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "EvalReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"{path}: not a JSON report ({e})") from None


def predict(g: Graph, images: np.ndarray, mode=None, threads: int = 1) -> np.ndarray:
    """Argmax class per image; ties resolve to the lowest index."""
    return Executor(g, mode, threads=threads).run(images).argmax(axis=1)


def evaluate(
    g: Graph,
    ds: LabeledDataset,
    mode=None,
    model: Optional[str] = None,
    threads: int = 1,
    config: Optional[dict] = None,
) -> EvalReport:
    if len(ds) == 0:
        raise InvalidArgumentError("cannot evaluate on an empty dataset")
    mode = parse_mode(mode, g)
    blob = container.serialize(g)
    ex = Executor(g, mode, threads=threads)
    t0 = time.perf_counter()
    probs = ex.run(ds.images)
    elapsed = time.perf_counter() - t0
    k = probs.shape[1]
    if ds.num_classes > k:
        raise InvalidArgumentError(f"dataset has {ds.num_classes} classes, model outputs {k}")
    cm = confusion_matrix(ds.labels, probs.argmax(axis=1), k)
    m = metrics_from_cm(cm)
    names = list(g.metadata.get("class_names") or ds.class_names)
    names += [f"class_{i}" for i in range(len(names), k)]
    per_class = {
        names[i]: {"precision": m.per_class_precision[i], "recall": m.per_class_recall[i], "f1": m.per_class_f1[i]}
        for i in range(k)
    }
    model = model or g.metadata.get("family", "model")
    return EvalReport(
        model_id=f"{model}-{g.quantization}",
        model=model,
        mode=g.quantization,
        size_bytes=len(blob),
        accuracy=m.accuracy,
        precision=m.precision,
        recall=m.recall,
        f1=m.f1,
        per_class=per_class,
        confusion=cm.tolist(),
        num_samples=len(ds),
        latency_ms_per_sample=1000.0 * elapsed / len(ds),
        model_sha256=hashlib.sha256(blob).hexdigest(),
        config=dict(config or {}),
    )


# --- comparison --------------------------------------------------------------

COLUMNS = ["model", "mode", "size_mb", "accuracy", "precision", "recall", "f1", "size_ratio"]
_MODE_ORDER = {"none": 0, "fp16": 1, "dynamic": 2, "full-int": 3}


@dataclass
class ComparisonTable:
    rows: List[dict]

    def to_text(self) -> str:
        head = f"{'Model':<18} {'Technique':<28} {'Size (MB)':>10} {'Acc':>6} {'Pr':>6} {'Re':>6} {'F1':>6} {'Ratio':>7}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r['model']:<18} {MODE_LABELS.get(r['mode'], r['mode']):<28} {r['size_mb']:>10.4f} "
                f"{r['accuracy']:>6.3f} {r['precision']:>6.3f} {r['recall']:>6.3f} {r['f1']:>6.3f} "
                f"{_fmt_ratio(r['size_ratio']):>7}"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in COLUMNS})
        return buf.getvalue()


def _fmt_ratio(x):
    return "-" if x is None else f"{x:.4f}"


def compare(reports: Sequence[EvalReport]) -> ComparisonTable:
    """Group by model; size ratio is relative to that model's unquantized report."""
    if not reports:
        raise InvalidArgumentError("nothing to compare")
    base = {r.model: r.size_bytes for r in reports if r.mode == "none"}
    order = {}
    for r in reports:
        order.setdefault(r.model, len(order))
    rows = []
    for r in sorted(reports, key=lambda r: (order[r.model], _MODE_ORDER.get(r.mode, 9), r.model_id)):
        ref = base.get(r.model)
        rows.append(
            {
                "model": r.model,
                "mode": r.mode,
                "size_mb": r.size_bytes / 1e6,
                "size_bytes": r.size_bytes,
                "accuracy": r.accuracy,
                "precision": r.precision,
                "recall": r.recall,
                "f1": r.f1,
                "size_ratio": (r.size_bytes / ref) if ref else None,
            }
        )
    return ComparisonTable(rows)


# --- selection ---------------------------------------------------------------


@dataclass(frozen=True)
class SizePriority:
    f1_floor: float


@dataclass(frozen=True)
class AccuracyPriority:
    pass


Policy = Union[SizePriority, AccuracyPriority]


def parse_policy(text: str) -> Policy:
    """``"size:0.95"`` or ``"accuracy"``."""
    kind, _, arg = text.partition(":")
    if kind == "size":
        try:
            return SizePriority(float(arg))
        except ValueError:
            raise InvalidArgumentError(f"size policy needs an F1 floor, got '{text}'") from None
    if kind == "accuracy" and not arg:
        return AccuracyPriority()
    raise InvalidArgumentError(f"unknown policy '{text}'")


def select_model(reports: Sequence[EvalReport], policy: Policy) -> str:
    """Pick a model id.

    SizePriority: smallest size with F1 >= floor, ties to the higher F1.
    AccuracyPriority: highest F1, ties to the smaller size. Remaining ties fall
    back to model id order.
    """
    if not reports:
        raise InvalidArgumentError("no reports to select from")
    if isinstance(policy, SizePriority):
        feasible = [r for r in reports if r.f1 >= policy.f1_floor]
        if not feasible:
            best = min(reports, key=lambda r: (-r.f1, r.size_bytes, r.model_id))
            raise NoFeasibleModelError(
                f"no model reaches F1 {policy.f1_floor}; best is {best.model_id} "
                f"(F1 {best.f1:.4f}, {best.size_bytes} bytes)",
                near_miss=best,
            )
        return min(feasible, key=lambda r: (r.size_bytes, -r.f1, r.model_id)).model_id
    if isinstance(policy, AccuracyPriority):
        return min(reports, key=lambda r: (-r.f1, r.size_bytes, r.model_id)).model_id
    raise InvalidArgumentError(f"unknown policy {policy!r}")
