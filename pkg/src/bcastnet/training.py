"""Adam, plateau LR decay, early stopping, k-fold plans, fitting and checkpoints."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import shutil
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .arch import ArchSpec, Model, VariantId, build_arch
from .data import FeatureCache, DatasetManifest, IndexSet, batch_iter
from .layers import smooth_labels, softmax_cross_entropy
from .tensor import Tensor, backward, no_grad, reset_tape

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    lr0: float = 0.01
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    early_stop_patience: int = 10
    min_delta: float = 1e-4
    batch: int = 8
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: Optional[float] = None  # None: take the variant's default
    deterministic: bool = True
    target_train_acc: Optional[float] = None  # stop as soon as an epoch reaches it

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, state: AdamState, lr: float, config: TrainConfig = TrainConfig()) -> None:
    """One bias-corrected Adam update, applied in place to every parameter."""
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    for name, p in params.items():
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


class ReduceLROnPlateau:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement.

    The first observed loss sets the reference; the wait counter restarts after
    every reduction.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3, min_delta: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.wait = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


def reduce_lr_on_plateau(loss_history, lr: float, factor: float = 0.5, patience: int = 3,
                         min_delta: float = 1e-4) -> float:
    """LR after replaying ``loss_history`` from starting rate ``lr``."""
    if len(loss_history) == 0:
        raise ValueError("loss history is empty")
    sched = ReduceLROnPlateau(lr, factor, patience, min_delta)
    for loss in loss_history:
        sched.step(loss)
    return sched.lr


def early_stop(train_loss_history, patience: int = 10, min_delta: float = 1e-4) -> bool:
    """True once the last ``patience`` epochs brought no improvement over the running best.

    The running best starts at the first loss, so the first epoch itself
    counts as a non-improving epoch.
    """
    if len(train_loss_history) == 0:
        return False
    best = train_loss_history[0]
    wait = 0
    for loss in train_loss_history:
        if loss < best - min_delta:
            best = loss
            wait = 0
        else:
            wait += 1
    return wait >= patience


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float


def _targets(y: np.ndarray, eps: float) -> np.ndarray:
    return smooth_labels(y, eps) if eps > 0 else y


def train_epoch(model: Model, batches: Iterable, opt: AdamState, config: TrainConfig,
                lr: float, rng: Optional[np.random.Generator] = None,
                label_smoothing: float = 0.0) -> EpochMetrics:
    """One optimization pass; returns the sample-weighted mean loss and accuracy."""
    total = correct = 0
    loss_sum = 0.0
    for x, y in batches:
        reset_tape()
        model.zero_grad()
        logits = model.logits(Tensor._wrap(np.asarray(x, dtype=_dtype(model))), "train", rng)
        loss = softmax_cross_entropy(logits, _targets(y, label_smoothing).astype(logits.dtype))
        backward(loss)
        adam_step(model.params, opt, lr, config)
        n = len(y)
        total += n
        loss_sum += float(loss.data) * n
        correct += int((logits.data.argmax(axis=1) == np.asarray(y).argmax(axis=1)).sum())
    if total == 0:
        raise ValueError("train_epoch received no batches")
    return EpochMetrics(loss_sum / total, correct / total)


def _dtype(model: Model):
    return next(iter(model.params.values())).dtype


def evaluate_loss(model: Model, batches: Iterable, label_smoothing: float = 0.0) -> EpochMetrics:
    total = correct = 0
    loss_sum = 0.0
    with no_grad():
        for x, y in batches:
            logits = model.logits(np.asarray(x, dtype=_dtype(model)), "eval")
            loss = softmax_cross_entropy(logits, _targets(y, label_smoothing).astype(logits.dtype))
            n = len(y)
            total += n
            loss_sum += float(loss.data) * n
            correct += int((logits.data.argmax(axis=1) == np.asarray(y).argmax(axis=1)).sum())
    if total == 0:
        return EpochMetrics(float("nan"), float("nan"))
    return EpochMetrics(loss_sum / total, correct / total)


# ------------------------------------------------------------------ folds


@dataclass(frozen=True)
class Fold:
    index: int
    train: IndexSet
    val: IndexSet
    test: IndexSet


def kfold_plan(n_samples: int, k: int = 10, seed: int = 0, labels=None) -> list[Fold]:
    """Stratified k-fold rotation: fold i tests on part i, validates on part i+1."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_samples < k:
        raise ValueError(f"need at least k={k} samples, got {n_samples}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(k)]
    labels = None if labels is None else np.asarray(labels)
    if labels is not None:
        if len(labels) != n_samples:
            raise ValueError(f"{len(labels)} labels for {n_samples} samples")
        if np.unique(labels, return_counts=True)[1].min() < k:
            warnings.warn(f"a class has fewer than k={k} samples; using non-stratified folds",
                          stacklevel=2)
            labels = None
    if labels is None:
        groups = [rng.permutation(n_samples)]
    else:
        groups = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    offset = 0
    for g in groups:
        for j, i in enumerate(g):
            parts[(offset + j) % k].append(int(i))
        offset += len(g)
    parts = [tuple(sorted(p)) for p in parts]
    folds = []
    for i in range(k):
        v = (i + 1) % k
        train = tuple(sorted(x for j, p in enumerate(parts) if j not in (i, v) for x in p))
        folds.append(Fold(i, IndexSet(train, "train"), IndexSet(parts[v], "val"),
                          IndexSet(parts[i], "test")))
    return folds


# ------------------------------------------------------------ checkpoints


class CheckpointError(RuntimeError):
    pass


class ArchMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arch: dict
    params: dict
    buffers: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_step: int = 0
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def from_model(cls, model: Model, opt: Optional[AdamState] = None, epoch: int = 0,
                   metrics: Optional[dict] = None, history: Optional[list] = None) -> "Checkpoint":
        params, buffers = model.state_arrays()
        opt = opt or AdamState()
        return cls(model.arch.to_dict(), params, buffers,
                   {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()},
                   opt.step, epoch, dict(metrics or {}), list(history or []))

    def to_model(self) -> Model:
        model = Model.create(ArchSpec.from_dict(self.arch), seed=0)
        model.load_arrays(self.params, self.buffers)
        return model

    def optimizer_state(self) -> AdamState:
        return AdamState(dict(self.adam_m), dict(self.adam_v), self.adam_step)


_GROUPS = ("params", "buffers", "adam_m", "adam_v")


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write a checkpoint directory atomically (temp directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".", dir=path.parent))
    blobs = {}
    for group in _GROUPS:
        for i, (name, arr) in enumerate(sorted(getattr(ckpt, group).items())):
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fname = f"{group}_{i:04d}.f32"
            (tmp / fname).write_bytes(data)
            blobs[f"{group}/{name}"] = {"file": fname, "shape": list(np.shape(arr)),
                                        "sha256": hashlib.sha256(data).hexdigest()}
    manifest = {"format_version": CHECKPOINT_VERSION, "arch": ckpt.arch, "epoch": ckpt.epoch,
                "adam_step": ckpt.adam_step, "metrics": ckpt.metrics, "history": ckpt.history,
                "blobs": blobs}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, Path], expected_arch: Optional[Union[ArchSpec, dict]] = None) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format {manifest.get('format_version')} "
                              f"!= supported {CHECKPOINT_VERSION}")
    if expected_arch is not None:
        want = expected_arch.to_dict() if isinstance(expected_arch, ArchSpec) else expected_arch
        if want != manifest["arch"]:
            raise ArchMismatchError(f"checkpoint holds {manifest['arch']}, expected {want}")
    groups = {g: {} for g in _GROUPS}
    for key, meta in manifest["blobs"].items():
        group, name = key.split("/", 1)
        try:
            data = (path / meta["file"]).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"missing blob {meta['file']}") from exc
        if hashlib.sha256(data).hexdigest() != meta["sha256"]:
            raise CheckpointError(f"checksum mismatch in blob {meta['file']} ({key})")
        groups[group][name] = np.frombuffer(data, dtype="<f4").reshape(meta["shape"]).astype(np.float32)
    return Checkpoint(manifest["arch"], groups["params"], groups["buffers"], groups["adam_m"],
                      groups["adam_v"], manifest["adam_step"], manifest["epoch"],
                      manifest["metrics"], manifest["history"])


def format_history_csv(history: list) -> str:
    lines = [",".join(HISTORY_FIELDS)]
    for row in history:
        lines.append(",".join(
            str(row["epoch"]) if f == "epoch" else f"{row[f]:.10g}" for f in HISTORY_FIELDS))
    return "\n".join(lines) + "\n"


def write_history_csv(history: list, path: Union[str, Path]) -> None:
    Path(path).write_text(format_history_csv(history))


# -------------------------------------------------------------------- fit


@dataclass
class FitResult:
    model: Model  # parameters of the best-validation epoch
    checkpoint: Checkpoint
    history: list
    best_epoch: int


def fit(variant: Union[VariantId, str, ArchSpec], cache: FeatureCache, manifest: DatasetManifest,
        fold: Optional[Fold], config: TrainConfig = TrainConfig(),
        pad_policy: Union[str, int] = "modal") -> FitResult:
    """Train with plateau LR decay and early stopping; keep the best-validation snapshot.

    With ``fold=None`` every sample is used for training and validation
    metrics are computed on the training set in eval mode.  The test split of
    ``fold`` is never read here.
    """
    arch = variant if isinstance(variant, ArchSpec) else build_arch(variant, manifest.num_classes)
    if arch.num_classes != manifest.num_classes:
        raise ValueError(f"arch has {arch.num_classes} classes, dataset has {manifest.num_classes}")
    if fold is None:
        train_set = IndexSet(tuple(range(len(manifest.entries))), "train")
        val_set = IndexSet(train_set.indices, "train")
    else:
        train_set, val_set = fold.train, fold.val
    if len(train_set) == 0:
        raise ValueError("empty training split")
    eps = arch.label_smoothing if config.label_smoothing is None else config.label_smoothing
    model = Model.create(arch, seed=config.seed)
    opt = AdamState()
    sched = ReduceLROnPlateau(config.lr0, config.plateau_factor, config.plateau_patience,
                              config.min_delta)
    rng = np.random.default_rng(config.seed + 1)
    history: list = []
    best = None  # (val_acc, -val_loss, epoch, state)
    train_losses = []
    with deterministic_mode(config.deterministic):
        for epoch in range(1, config.max_epochs + 1):
            lr = sched.lr
            batches = batch_iter(cache, manifest, train_set, config.batch,
                                 shuffle_seed=config.seed * 100003 + epoch,
                                 pad_policy=pad_policy, purpose="train")
            tr = train_epoch(model, batches, opt, config, lr, rng, eps)
            va = evaluate_loss(model, batch_iter(cache, manifest, val_set, config.batch,
                                                 pad_policy=pad_policy, purpose="eval"), eps)
            history.append({"epoch": epoch, "lr": lr, "train_loss": tr.loss,
                            "train_acc": tr.accuracy, "val_loss": va.loss, "val_acc": va.accuracy})
            log.info("epoch %d lr=%.5g loss=%.4f acc=%.3f val_loss=%.4f val_acc=%.3f",
                     epoch, lr, tr.loss, tr.accuracy, va.loss, va.accuracy)
            key = (va.accuracy, -va.loss)
            if best is None or key > best[0]:
                best = (key, epoch, model.state_arrays())
            train_losses.append(tr.loss)
            sched.step(va.loss if fold is not None else tr.loss)
            if config.target_train_acc is not None and tr.accuracy >= config.target_train_acc:
                log.info("target train accuracy reached at epoch %d", epoch)
                break
            if early_stop(train_losses, config.early_stop_patience, config.min_delta):
                log.info("early stop after epoch %d", epoch)
                break
    best_epoch = 0
    if best is not None:
        _, best_epoch, (params, buffers) = best
        model.load_arrays(params, buffers)
    metrics = {}
    if best_epoch:
        row = history[best_epoch - 1]
        metrics = {"best_epoch": best_epoch, "val_acc": row["val_acc"], "val_loss": row["val_loss"]}
    ckpt = Checkpoint.from_model(model, opt, best_epoch, metrics, history)
    return FitResult(model, ckpt, history, best_epoch)
