"""Epoch loop, evaluation and run metrics."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Normalizer, iterate_batches
from .errors import NumericalOverflow
from .functional import cross_entropy, log_softmax
from .optim import SGD, Scheduler, TrainConfig
from .tensor import Tensor, no_grad

METRIC_COLUMNS = ["epoch", "train_loss", "val_loss", "val_acc", "lr"]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float  # cumulative wall-clock since the start of training


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_state: dict | None = field(default=None, repr=False)
    failure: dict | None = None

    def __len__(self):
        return len(self.records)

    @property
    def best(self) -> EpochRecord | None:
        return None if self.best_epoch is None else self.records[self.best_epoch - 1]

    def time_to_val_acc(self, target: float) -> float | None:
        for r in self.records:
            if r.val_acc >= target:
                return r.seconds
        return None

    def time_to_best_val(self) -> float | None:
        return None if self.best is None else self.best.seconds

    @staticmethod
    def _row(r: EpochRecord):
        # repr() round-trips floats exactly, which keeps the CSV bitwise reproducible
        return [int(r.epoch)] + [repr(float(v)) for v in (r.train_loss, r.val_loss, r.val_acc, r.lr)]

    def csv_header(self) -> str:
        return ",".join(METRIC_COLUMNS) + "\n"

    def csv_row(self, r: EpochRecord) -> str:
        return ",".join(str(v) for v in self._row(r)) + "\n"

    def to_csv(self) -> str:
        return self.csv_header() + "".join(self.csv_row(r) for r in self.records)

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, f"{r.seconds:.3f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "epochs": len(self.records),
            "best_epoch": self.best_epoch,
            "best_val_loss": None if self.best is None else self.best.val_loss,
            "best_val_acc": None if self.best is None else self.best.val_acc,
            "time_to_80_val_acc": self.time_to_val_acc(80.0),
            "time_to_best_val": self.time_to_best_val(),
            "failure": self.failure,
        }


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask; ties are broken towards the lower class index."""
    k = min(k, logits.shape[1])
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


@dataclass
class EvalResult:
    top1: float
    top5: float
    loss: float

    def as_tuple(self):
        return self.top1, self.top5, self.loss


def predict_logits(model, images: np.ndarray, normalizer: Normalizer | None = None, batch_size=256) -> np.ndarray:
    was_training = model.training
    model.eval()
    outs = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            x = images[s : s + batch_size]
            if normalizer is not None:
                x = normalizer.apply(x)
            outs.append(model(Tensor(x.astype(np.float32))).data)
    model.train(was_training)
    return np.concatenate(outs)


def evaluate(model, ds: Dataset, normalizer: Normalizer | None = None, batch_size=256) -> EvalResult:
    """Top-1 / top-5 accuracy in percent and mean cross-entropy, in eval mode."""
    logits = predict_logits(model, ds.images, normalizer, batch_size)
    logp = log_softmax(logits.astype(np.float64))
    loss = float(-logp[np.arange(len(ds)), ds.labels].mean())
    top1 = 100.0 * float(topk_correct(logits, ds.labels, 1).mean())
    top5 = 100.0 * float(topk_correct(logits, ds.labels, 5).mean())
    return EvalResult(top1, top5, loss)


def train(
    model,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    seed: int,
    normalizer: Normalizer | None = None,
    epochs: int | None = None,
    on_epoch=None,
    clock=time.perf_counter,
) -> RunMetrics:
    """Shuffle, forward, cross-entropy, backward, SGD step; schedule at epoch end.

    Keeps a copy of the state with the lowest validation loss in
    ``metrics.best_state``.  On divergence a :class:`NumericalOverflow` is
    raised with the partial metrics attached as ``exc.metrics``.
    """
    epochs = cfg.epochs if epochs is None else epochs
    normalizer = normalizer or Normalizer.fit(train_ds)
    metrics = RunMetrics()
    if epochs <= 0:
        return metrics
    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), cfg.sgd)
    sched = Scheduler(cfg.schedule, cfg.sgd.lr)
    start = clock()
    best_loss = np.inf

    for epoch in range(1, epochs + 1):
        model.train()
        lr = opt.lr
        tot_loss = 0.0
        tot_correct = 0
        seen = 0
        for b, (x, y) in enumerate(iterate_batches(train_ds, cfg.batch_size, rng, epoch)):
            try:
                logits = model(Tensor(normalizer.apply(x)))
                loss = cross_entropy(logits, y)
                if not np.isfinite(loss.item()):
                    raise NumericalOverflow("training loss is not finite", {"op": "cross_entropy"})
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NumericalOverflow as exc:
                exc.where.update(epoch=epoch, batch=b)
                metrics.failure = dict(exc.where, message=str(exc))
                exc.metrics = metrics
                raise
            tot_loss += loss.item() * len(y)
            tot_correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)

        ev = evaluate(model, val_ds, normalizer, cfg.eval_batch_size)
        if not np.isfinite(ev.loss):
            exc = NumericalOverflow("validation loss is not finite", {"epoch": epoch, "op": "evaluate"})
            metrics.failure = dict(exc.where, message=str(exc))
            exc.metrics = metrics
            raise exc
        rec = EpochRecord(epoch, tot_loss / seen, 100.0 * tot_correct / seen, ev.loss, ev.top1, lr, clock() - start)
        metrics.records.append(rec)
        if ev.loss < best_loss:
            best_loss = ev.loss
            metrics.best_epoch = epoch
            metrics.best_state = model.state_dict()
        opt.lr = sched.step(epoch, ev.loss)
        if on_epoch is not None:
            on_epoch(rec, metrics)
    return metrics
