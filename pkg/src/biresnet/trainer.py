"""Training loop: shuffled mini-batches, Adam with L2, plateau LR decay and checkpointing."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .datapipe import Dataset, DataError
from .model import BiResNet, BiResNetConfig, _atomic_write, save_checkpoint
from .nncore import Adam, NumericalError, rng_for, softmax, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    lr0: float = 0.01
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_epsilon: float = 1e-4
    l2_lambda: float = 1e-4
    seed: int = 0
    intralink_n: int = 1
    eval_batch_size: int = 128

    def __post_init__(self):
        for f in ("batch_size", "epochs", "lr0", "plateau_patience", "eval_batch_size"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_epsilon < 0 or self.l2_lambda < 0 or self.intralink_n < 0:
            raise ValueError("plateau_epsilon, l2_lambda and intralink_n must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


class PlateauScheduler:
    """Multiply the LR by ``factor`` once the monitored metric has sat on a plateau for ``patience`` epochs.

    The epoch that sets a new best (by more than ``epsilon``) is the first
    epoch of its plateau, so ``patience`` identical readings in a row trigger
    a decay. The counter restarts after every decay.
    """

    def __init__(self, lr0: float, factor: float = 0.5, patience: int = 10, epsilon: float = 1e-4):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.epsilon = epsilon
        self.best = -np.inf
        self.count = 0

    def step(self, metric: float) -> float:
        """Record one epoch's metric and return the LR for the next epoch."""
        if metric > self.best + self.epsilon:
            self.best = metric
            self.count = 1
        else:
            self.count += 1
        if self.count >= self.patience:
            self.lr *= self.factor
            self.count = 0
        return self.lr


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    monitor: str = "val_acc"

    def __len__(self) -> int:
        return len(self.epoch)

    def append(self, epoch, loss, val_acc, lr, wall_time) -> None:
        self.epoch.append(int(epoch))
        self.loss.append(float(loss))
        self.val_acc.append(float(val_acc))
        self.lr.append(float(lr))
        self.wall_time.append(float(wall_time))

    def to_csv(self) -> str:
        # wall time is left out so the CSV is reproducible
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_acc", "lr"])
        for row in zip(self.epoch, self.loss, self.val_acc, self.lr):
            w.writerow([row[0]] + [repr(v) for v in row[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        _atomic_write(path, self.to_csv().encode())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.append(row["epoch"], row["loss"], row["val_acc"], row["lr"], float("nan"))
        return h


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def _check_split(split: Dataset, name: str) -> None:
    if split is None or len(split) == 0:
        raise DataError(f"{name} split is empty")


def predict_logits(model, X: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    for start in range(0, len(X), batch_size):
        xb = np.asarray(X[start:start + batch_size], dtype=model.dtype)
        out.append(model.forward(xb, training=False))
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def predict_proba(model, X: np.ndarray, batch_size: int = 128) -> np.ndarray:
    return softmax(predict_logits(model, X, batch_size).astype(np.float64))


def confusion_matrix(y_true, y_pred, num_classes: int = 6) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def evaluate(model, split: Dataset, batch_size: int = 128):
    """Eval-mode accuracy and confusion matrix (rows are true classes)."""
    _check_split(split, "evaluation")
    pred = np.argmax(predict_logits(model, split.X, batch_size), axis=1)
    cm = confusion_matrix(split.labels, pred, model.cfg.num_classes)
    return float(np.trace(cm) / cm.sum()), cm


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled full batches; the remainder is dropped."""
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def _dump_diagnostics(out_dir, payload: dict) -> str | None:
    if out_dir is None:
        return None
    path = os.path.join(out_dir, "nonfinite_dump.json")
    _atomic_write(path, json.dumps(payload, indent=2).encode())
    return path


def build_model(model_cfg: BiResNetConfig | None, cfg: TrainConfig, input_channels: int | None = None,
                dtype=np.float32) -> BiResNet:
    model_cfg = (model_cfg or BiResNetConfig()).replace(intralink_n=cfg.intralink_n)
    if input_channels is not None:
        model_cfg = model_cfg.replace(input_channels=input_channels)
    return BiResNet(model_cfg, seed=cfg.seed, dtype=dtype)


def train(model: BiResNet, train_split: Dataset, val_split: Dataset, cfg: TrainConfig | None = None,
          out_dir=None, progress=None):
    """Run exactly ``cfg.epochs`` epochs. Returns ``(model, history)``.

    With ``out_dir`` set, ``model.brck`` (final), ``best.brck`` (best
    validation accuracy, first occurrence) and ``history.csv``/``history.json``
    are written there.
    """
    cfg = cfg or TrainConfig()
    _check_split(train_split, "training")
    _check_split(val_split, "validation")
    if len(train_split) < cfg.batch_size:
        raise DataError(f"training split has {len(train_split)} records, fewer than one batch of {cfg.batch_size}")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    opt = Adam(model.parameters(), lr=cfg.lr0, weight_decay_l2=cfg.l2_lambda)
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_epsilon)
    history = TrainHistory()
    X = train_split.X
    y = train_split.labels
    best_acc = -1.0
    t0 = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        lr = sched.lr
        opt.lr = lr
        losses = []
        for bi, idx in enumerate(batches(len(y), cfg.batch_size, rng_for(cfg.seed, f"shuffle/{epoch}"))):
            xb = np.asarray(X[idx], dtype=model.dtype)
            opt.zero_grad()
            logits = model.forward(xb, training=True)
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                path = _dump_diagnostics(out_dir, {
                    "epoch": epoch, "batch": bi, "lr": lr, "loss": repr(loss),
                    "logit_range": [float(np.nanmin(logits)), float(np.nanmax(logits))],
                    "param_norms": {p.name: float(np.linalg.norm(p.value)) for p in model.parameters()},
                })
                raise NumericalError(f"non-finite loss at epoch {epoch} batch {bi} (lr={lr})"
                                     + (f"; diagnostics in {path}" if path else ""))
            model.backward(dlogits.astype(model.dtype, copy=False))
            opt.step()
            losses.append(loss)
        val_acc, _ = evaluate(model, val_split, cfg.eval_batch_size)
        history.append(epoch, np.mean(losses), val_acc, lr, time.perf_counter() - t0)
        sched.step(val_acc)
        if out_dir is not None and val_acc > best_acc:
            save_checkpoint(model, os.path.join(out_dir, "best.brck"))
        best_acc = max(best_acc, val_acc)
        log.info("epoch %d loss %.4f val_acc %.4f lr %.5g", epoch, history.loss[-1], val_acc, lr)
        if progress is not None:
            progress(epoch, history)

    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "model.brck"), include_adam=True)
        history.write_csv(os.path.join(out_dir, "history.csv"))
        _atomic_write(os.path.join(out_dir, "history.json"),
                      json.dumps({"train_config": cfg.to_dict(), **history.to_dict()}, indent=2).encode())
    return model, history
