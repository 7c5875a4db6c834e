"""Desk-scale experiment drivers shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .architectures import create_model
from .data import Dataset, Normalizer, load_cifar10, make_synthetic, stratified_split, stratified_subset
from .optim import preset
from .training import RunMetrics, evaluate, train

CIFAR_ENV = "PUNET_CIFAR_DIR"


def cifar_dir() -> str | None:
    d = os.environ.get(CIFAR_ENV)
    return d if d and os.path.isdir(d) else None


def image_pool(n: int, seed: int, classes: int = 10) -> tuple[Dataset, str]:
    """``n`` stratified images from CIFAR-10 when available, else synthetic."""
    d = cifar_dir()
    if d is not None:
        train_ds, _ = load_cifar10(d)
        return stratified_subset(train_ds, n, seed), "cifar10"
    per_class = -(-n // classes)
    return stratified_subset(make_synthetic(classes, per_class, 32, seed), n, seed), "synthetic"


@dataclass
class OverfitResult:
    source: str
    epochs_to_100: int | None
    final_train_loss: float
    final_train_acc: float
    epochs_run: int
    saw_nonfinite: bool
    seconds: float


def overfit(arch="pure20", n=32, epochs=200, seed=0, log=None) -> OverfitResult:
    """Train on one fixed batch of ``n`` images with the cifar-pure learning rate."""
    ds, source = image_pool(n, seed)
    cfg = replace(preset("cifar-pure"), epochs=epochs, batch_size=n)
    model = create_model(arch, ds.num_classes, seed=seed)
    first = [None]
    nonfinite = [False]

    def on_epoch(rec, _):
        if not (np.isfinite(rec.train_loss) and np.isfinite(rec.val_loss)):
            nonfinite[0] = True
        if first[0] is None and rec.train_acc >= 100.0:
            first[0] = rec.epoch
        if log is not None:
            log(rec)

    t0 = time.perf_counter()
    # the training batch doubles as the monitored set
    m = train(model, ds, ds, cfg, seed, on_epoch=on_epoch)
    last = m.records[-1]
    return OverfitResult(source, first[0], last.train_loss, last.train_acc, len(m), nonfinite[0], time.perf_counter() - t0)


@dataclass
class SmokeResult:
    source: str
    metrics: RunMetrics
    heldout_top1: float
    heldout_top5: float
    n_train: int
    n_heldout: int
    seconds: float


def desk_smoke(arch="pure20", n=2000, heldout=500, epochs=10, seed=0, batch_size=64, log=None) -> SmokeResult:
    """Train on ``n - heldout`` stratified images and score the held-out rest."""
    pool, source = image_pool(n, seed)
    train_ds, held = stratified_split(pool, (1 - heldout / n, heldout / n), seed, names=["train", "val"])
    cfg = replace(preset("cifar-pure"), epochs=epochs, batch_size=batch_size)
    model = create_model(arch, pool.num_classes, seed=seed)
    norm = Normalizer.fit(train_ds)
    t0 = time.perf_counter()
    m = train(model, train_ds, held, cfg, seed, norm, on_epoch=(lambda r, _: log(r)) if log else None)
    r = evaluate(model, held, norm)
    return SmokeResult(source, m, r.top1, r.top5, len(train_ds), len(held), time.perf_counter() - t0)
