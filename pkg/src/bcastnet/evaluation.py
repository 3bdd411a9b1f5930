"""Accuracy, confusion matrices, run reports and cross-run comparison tables."""
from __future__ import annotations

import csv
import io
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .arch import VARIANT_ORDER, Model, VariantId
from .tensor import no_grad

REPORT_SCHEMA_VERSION = 1
DATASET_ORDER = ("gtzan", "homburg", "extended_ballroom", "fma_small")
MISSING = "—"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    labels: list

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def to_csv(self, normalized: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.labels])
        values = self.normalized() if normalized else self.counts
        for name, row in zip(self.labels, values):
            w.writerow([name, *(f"{v:.4f}" if normalized else int(v) for v in row)])
        return buf.getvalue()


def confusion_matrix(pred: Sequence[int], truth: Sequence[int], k: int,
                     labels: Optional[list] = None) -> ConfusionMatrix:
    pred, truth = np.asarray(pred, dtype=np.int64), np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"{len(pred)} predictions for {len(truth)} labels")
    if pred.size and (max(pred.max(), truth.max()) >= k or min(pred.min(), truth.min()) < 0):
        raise ValueError(f"class index outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return ConfusionMatrix(counts, list(labels) if labels else [str(i) for i in range(k)])


def evaluate(model: Model, batches: Iterable, labels: Optional[list] = None
             ) -> tuple[float, ConfusionMatrix]:
    """Eval-mode accuracy and confusion matrix; argmax ties go to the lower class index."""
    k = model.arch.num_classes
    preds, truth = [], []
    dtype = next(iter(model.params.values())).dtype
    with no_grad():
        for x, y in batches:
            y = np.asarray(y)
            if y.shape[1] != k:
                raise ValueError(f"model predicts {k} classes, data has {y.shape[1]}")
            logits = model.logits(np.asarray(x, dtype=dtype), "eval").data
            preds.append(logits.argmax(axis=1))
            truth.append(y.argmax(axis=1))
    p = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    t = np.concatenate(truth) if truth else np.zeros(0, np.int64)
    cm = confusion_matrix(p, t, k, labels)
    return cm.accuracy, cm


@dataclass
class FoldResult:
    fold: int
    val_accuracy: float
    test_accuracy: float


@dataclass
class EvalReport:
    variant: str
    dataset: str
    folds: list = field(default_factory=list)  # FoldResult
    confusion: Optional[ConfusionMatrix] = None  # of the reported fold
    reported_fold: Optional[int] = None

    def __post_init__(self):
        for r in self.folds:
            for acc in (r.val_accuracy, r.test_accuracy):
                if not (np.isnan(acc) or 0.0 <= acc <= 1.0):
                    raise ValueError(f"accuracy {acc} outside [0, 1]")

    @property
    def mean_val(self) -> float:
        return float(np.mean([r.val_accuracy for r in self.folds])) if self.folds else float("nan")

    @property
    def mean_test(self) -> float:
        return float(np.mean([r.test_accuracy for r in self.folds])) if self.folds else float("nan")

    @property
    def best(self) -> Optional[FoldResult]:
        """Fold with the highest test accuracy (lowest index on ties)."""
        if not self.folds:
            return None
        return max(self.folds, key=lambda r: (r.test_accuracy, -r.fold))

    @property
    def max_test(self) -> float:
        return self.best.test_accuracy if self.folds else float("nan")

    def to_dict(self) -> dict:
        best = self.best
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "variant": self.variant,
            "dataset": self.dataset,
            "folds": [{"fold": r.fold, "val_accuracy": r.val_accuracy,
                       "test_accuracy": r.test_accuracy} for r in self.folds],
            "aggregate": {"mean_val_accuracy": self.mean_val, "mean_test_accuracy": self.mean_test,
                          "max_test_accuracy": self.max_test,
                          "max_fold": best.fold if best else None,
                          "max_fold_val_accuracy": best.val_accuracy if best else None},
            "reported_fold": self.reported_fold,
            "confusion": None if self.confusion is None else {
                "labels": self.confusion.labels, "counts": self.confusion.counts.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')}")
        cm = d.get("confusion")
        return cls(d["variant"], d["dataset"],
                   [FoldResult(f["fold"], f["val_accuracy"], f["test_accuracy"]) for f in d["folds"]],
                   None if cm is None else ConfusionMatrix(np.array(cm["counts"], dtype=np.int64),
                                                           cm["labels"]),
                   d.get("reported_fold"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"


def emit_report(report: EvalReport, out_dir: Union[str, Path],
                history_files: Sequence[Union[str, Path]] = ()) -> list[Path]:
    """Write report.json, confusion.csv and confusion_normalized.csv; copy histories alongside."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json"]
        written[0].write_text(report.to_json(), encoding="utf-8")
        if report.confusion is not None:
            (out / "confusion.csv").write_text(report.confusion.to_csv())
            (out / "confusion_normalized.csv").write_text(report.confusion.to_csv(normalized=True))
            written += [out / "confusion.csv", out / "confusion_normalized.csv"]
        for h in history_files:
            h = Path(h)
            dst = out / h.name
            if h.resolve() != dst.resolve():
                shutil.copyfile(h, dst)
            written.append(dst)
    except OSError as exc:
        raise OSError(f"failed writing report under {out}: {exc}") from exc
    return written


def load_report(path: Union[str, Path]) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ComparisonTable:
    datasets: list
    rows: list  # (variant, {dataset: (val, test)})

    def _cells(self):
        header = ["variant"] + [f"{d} {s}" for d in self.datasets for s in ("val", "test")]
        body = []
        for variant, cells in self.rows:
            row = [variant]
            for d in self.datasets:
                if d in cells:
                    row += [f"{100 * cells[d][0]:.1f}", f"{100 * cells[d][1]:.1f}"]
                else:
                    row += [MISSING, MISSING]
            body.append(row)
        return header, body

    def render(self) -> str:
        header, body = self._cells()
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                  for i, (c, w) in enumerate(zip(r, widths)))
        return "\n".join([fmt(header), *(fmt(r) for r in body)])

    def to_csv(self) -> str:
        header, body = self._cells()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerows([header, *body])
        return buf.getvalue()


def _variant_rank(name: str) -> tuple:
    try:
        return (VARIANT_ORDER.index(VariantId.parse(name)), name)
    except ValueError:
        return (len(VARIANT_ORDER), name)


def compare_runs(reports: Sequence[EvalReport]) -> ComparisonTable:
    """Variant x dataset table of the reported (highest-test) fold's val/test accuracy."""
    if not reports:
        raise ValueError("nothing to compare")
    seen = {r.dataset for r in reports}
    datasets = [d for d in DATASET_ORDER if d in seen] + sorted(seen - set(DATASET_ORDER))
    table: dict = {}
    for r in reports:
        best = r.best
        if best is None:
            continue
        table.setdefault(r.variant, {}).setdefault(r.dataset, (best.val_accuracy, best.test_accuracy))
    rows = [(v, table.get(v, {})) for v in sorted({r.variant for r in reports}, key=_variant_rank)]
    return ComparisonTable(datasets, rows)
