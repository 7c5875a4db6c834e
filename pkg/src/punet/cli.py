"""Command-line entry point: ``punet {train,eval,noise-eval,gradcheck,params}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .architectures import ARCH_NAMES, arch_spec, build_network, count_params, init_parameters
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .data import (
    CIFAR_AUGMENT,
    Dataset,
    NoiseConfig,
    Normalizer,
    augment,
    load_cifar10,
    load_image_folder,
    make_synthetic,
    noise_degradation,
    poisson_corrupt,
    stratified_split,
    stratified_subset,
)
from .errors import CheckpointError, FormatError, InvalidConfig, NumericalOverflow
from .optim import PRESETS, ScheduleSpec, SGDConfig, TrainConfig, preset
from .training import evaluate, train
from .verification import audit_params, reports_csv, run_registry

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5


@dataclass
class RunConfig:
    arch: str | None = None
    dataset: str = "synthetic"
    classes: int | None = None
    split: list[float] = field(default_factory=lambda: [0.9, 0.05, 0.05])
    subset: int | None = None
    synthetic_per_class: int = 20
    image_size: int | None = None
    augment: bool = False
    preset: str | None = None
    epochs: int | None = None
    lr: float | None = None
    wd: float | None = None
    momentum: float | None = None
    schedule: str | None = None
    milestones: list[int] | None = None
    batch_size: int | None = None
    grad_clip: float | None = None
    seed: int | None = None
    out: str | None = None
    checkpoint: str | None = None
    noise_peak: float = 255.0
    eval_split: str = "test"

    def validate(self, need_seed=False, need_arch=True):
        if self.arch is None:
            if need_arch:
                raise InvalidConfig("--arch is required")
        elif self.arch.lower() not in ARCH_NAMES:
            raise InvalidConfig(f"unknown architecture {self.arch!r}; choose from {', '.join(ARCH_NAMES)}")
        if need_seed and self.seed is None:
            raise InvalidConfig("--seed is required for training runs")
        if self.preset is not None:
            preset(self.preset)
        if self.schedule is not None and self.schedule not in ("multistep", "plateau", "constant"):
            raise InvalidConfig(f"unknown schedule {self.schedule!r}")
        if not (self.dataset == "synthetic" or self.dataset.startswith(("cifar10:", "folder:"))):
            raise InvalidConfig(f"--dataset must be synthetic, cifar10:<dir> or folder:<dir>, got {self.dataset!r}")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1) > 1e-9:
            raise InvalidConfig(f"--split needs three non-negative fractions summing to 1, got {self.split}")
        if self.noise_peak <= 0:
            raise InvalidConfig("--noise-peak must be positive")
        return self

    def train_config(self) -> TrainConfig:
        base = preset(self.preset) if self.preset else TrainConfig(SGDConfig(0.01, 0.9, 0.001), ScheduleSpec("constant"), 10, 128)
        sgd = base.sgd
        if self.lr is not None:
            sgd.lr = self.lr
        if self.wd is not None:
            sgd.weight_decay = self.wd
        if self.momentum is not None:
            sgd.momentum = self.momentum
        if self.grad_clip is not None:
            sgd.grad_clip = self.grad_clip
        if self.schedule is not None:
            base.schedule.kind = self.schedule
        if self.milestones is not None:
            base.schedule.milestones = list(self.milestones)
        if self.epochs is not None:
            base.epochs = self.epochs
        if self.batch_size is not None:
            base.batch_size = self.batch_size
        sgd.validate()
        base.schedule.validate()
        return base


# -- data resolution -------------------------------------------------------------


def load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset | None]:
    """Deterministically rebuild (train, val, test) from the config.

    ``test`` is None when the split gives it a zero fraction.
    """
    seed = cfg.seed or 0
    kind, _, path = cfg.dataset.partition(":")
    if kind == "cifar10":
        pool, test = load_cifar10(path)
        if cfg.subset:
            pool = stratified_subset(pool, cfg.subset, seed)
        val_frac = cfg.split[1] / (cfg.split[0] + cfg.split[1])
        train_ds, val_ds = stratified_split(pool, (1 - val_frac, val_frac), seed, names=["train", "val"])
    else:
        if kind == "folder":
            pool = load_image_folder(path, cfg.image_size)
        else:
            pool = make_synthetic(cfg.classes or 10, cfg.synthetic_per_class, cfg.image_size or 32, seed)
        if cfg.subset:
            pool = stratified_subset(pool, cfg.subset, seed)
        if len(cfg.split) == 3 and cfg.split[2] == 0:
            # no test part requested; everything not trained on is validation
            train_ds, val_ds = stratified_split(pool, cfg.split[:2], seed, names=["train", "val"])
            test = None
        else:
            train_ds, val_ds, test = stratified_split(pool, cfg.split, seed)
    return train_ds, val_ds, test


def _num_classes(cfg: RunConfig, ds: Dataset) -> int:
    return cfg.classes or ds.num_classes


# -- commands ----------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    cfg.validate(need_seed=True)
    tcfg = cfg.train_config()
    arch = arch_spec(cfg.arch, cfg.classes or 10)
    if cfg.out is None:
        raise InvalidConfig("--out is required for train")
    try:
        train_ds, val_ds, _ = load_splits(cfg)
    except (OSError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    arch.num_classes = _num_classes(cfg, train_ds)
    normalizer = Normalizer.fit(train_ds)
    if cfg.augment:
        train_ds = augment(train_ds, CIFAR_AUGMENT, cfg.seed)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_network(arch)
    init_parameters(model, cfg.seed)
    nparams = count_params(model)
    ckpt_meta = {"normalization": normalizer.to_dict(), "config": asdict(cfg)}

    metrics_f = open(out / "metrics.csv", "w", newline="")
    metrics_f.write("epoch,train_loss,val_loss,val_acc,lr\n")
    metrics_f.flush()

    def on_epoch(rec, metrics):
        metrics_f.write(metrics.csv_row(rec))
        metrics_f.flush()
        print(f"epoch {rec.epoch:>3}  train_loss {rec.train_loss:.4f}  val_loss {rec.val_loss:.4f}  val_acc {rec.val_acc:6.2f}%  lr {rec.lr:.3g}")

    manifest = {
        "config": asdict(cfg),
        "train_config": tcfg.to_dict(),
        "arch": arch.to_dict(),
        "params": nparams,
        "normalization": normalizer.to_dict(),
        "sizes": {"train": len(train_ds), "val": len(val_ds)},
    }
    print(f"{arch.name}: {nparams:,} parameters, {len(train_ds)} train / {len(val_ds)} val samples")
    t0 = time.perf_counter()
    status, code = "completed", EXIT_OK
    try:
        metrics = train(model, train_ds, val_ds, tcfg, cfg.seed, normalizer, on_epoch=on_epoch)
    except NumericalOverflow as exc:
        metrics = exc.metrics
        status, code = "diverged", EXIT_DIVERGED
        print(f"numerical divergence: {exc} at {exc.where}", file=sys.stderr)
    finally:
        metrics_f.close()

    (out / "timing.csv").write_text(metrics.timing_csv())
    if metrics.best_state is not None:
        save_checkpoint(out / "best.ckpt", model, dict(ckpt_meta, epoch=metrics.best_epoch), state=metrics.best_state)
    if status == "completed":
        save_checkpoint(out / "final.ckpt", model, dict(ckpt_meta, epoch=len(metrics)))
    manifest.update(status=status, wall_clock_seconds=time.perf_counter() - t0, summary=metrics.summary())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return code


def _load_model_for_eval(cfg: RunConfig):
    if cfg.checkpoint is None:
        raise InvalidConfig("--checkpoint is required")
    ckpt = load_checkpoint(cfg.checkpoint)
    if cfg.arch is None:
        model = ckpt.build()
    else:
        model = build_network(arch_spec(cfg.arch, ckpt.arch.num_classes))
        load_into(model, ckpt)
    norm = ckpt.meta.get("normalization")
    return model, (Normalizer.from_dict(norm) if norm else None)


def _eval_dataset(cfg: RunConfig) -> Dataset:
    train_ds, val_ds, test = load_splits(cfg)
    ds = {"train": train_ds, "val": val_ds, "test": test}[cfg.eval_split]
    if ds is None:
        raise InvalidConfig(f"the configured split has no {cfg.eval_split!r} part")
    return ds


def _write_out(cfg: RunConfig, name: str, payload: dict):
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / name).write_text(json.dumps(payload, indent=2, sort_keys=True))


def cmd_eval(cfg: RunConfig) -> int:
    cfg.validate(need_arch=False)
    model, norm = _load_model_for_eval(cfg)
    ds = _eval_dataset(cfg)
    r = evaluate(model, ds, norm)
    print(f"split={cfg.eval_split} n={len(ds)} top1={r.top1!r} top5={r.top5!r} loss={r.loss!r}")
    _write_out(cfg, "eval.json", {"split": cfg.eval_split, "n": len(ds), "top1": r.top1, "top5": r.top5, "loss": r.loss})
    return EXIT_OK


def cmd_noise_eval(cfg: RunConfig) -> int:
    cfg.validate(need_arch=False)
    model, norm = _load_model_for_eval(cfg)
    ds = _eval_dataset(cfg)
    noisy = poisson_corrupt(ds, NoiseConfig(cfg.noise_peak, cfg.seed or 0))
    clean = evaluate(model, ds, norm).top1
    dirty = evaluate(model, noisy, norm).top1
    if clean > 0:
        drop = noise_degradation(clean, dirty)
        print(f"clean_acc={clean!r} noisy_acc={dirty!r} drop_pct={drop!r}")
    else:
        drop = None
        print(f"clean_acc={clean!r} noisy_acc={dirty!r} drop_pct=undefined")
    _write_out(cfg, "noise_eval.json", {"clean_acc": clean, "noisy_acc": dirty, "drop_pct": drop, "peak": cfg.noise_peak})
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, seeds=(0,)) -> int:
    reports = [r for s in seeds for r in run_registry(seed=s)]
    for r in reports:
        print(r.line())
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} gradient checks passed")
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "gradcheck.csv").write_text(reports_csv(reports))
    return EXIT_FAILED if failed else EXIT_OK


def cmd_params(cfg: RunConfig) -> int:
    cfg.validate()
    model = build_network(arch_spec(cfg.arch, cfg.classes or 10))
    audit = audit_params(model)
    for line in audit.lines():
        print(line)
    print(f"total parameters: {audit.total} ({audit.total / 1e6:.2f} M)")
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "params.csv").write_text(audit.to_csv())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "noise-eval": cmd_noise_eval, "gradcheck": cmd_gradcheck, "params": cmd_params}


# -- argument parsing ------------------------------------------------------------


def _floats(s):
    return [float(v) for v in s.split(",")]


def _ints(s):
    return [int(v) for v in s.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="punet", description="Product-unit residual networks")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML file with option values; flags override it")
    common.add_argument("--out")
    common.add_argument("--seed", type=int)
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="synthetic | cifar10:<dir> | folder:<dir>")
    data.add_argument("--split", type=_floats, help="train,val,test fractions (default 0.9,0.05,0.05)")
    data.add_argument("--subset", type=int, help="stratified subsample of the training pool")
    data.add_argument("--synthetic-per-class", type=int)
    data.add_argument("--image-size", type=int)
    data.add_argument("--classes", type=int)
    arch = argparse.ArgumentParser(add_help=False)
    arch.add_argument("--arch", help=", ".join(ARCH_NAMES))

    t = sub.add_parser("train", parents=[common, data, arch], help="train a model")
    t.add_argument("--preset", help=", ".join(PRESETS))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--wd", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--schedule", choices=["multistep", "plateau", "constant"])
    t.add_argument("--milestones", type=_ints)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--augment", action="store_true", default=None)

    for name in ("eval", "noise-eval"):
        e = sub.add_parser(name, parents=[common, data, arch])
        e.add_argument("--checkpoint")
        e.add_argument("--eval-split", choices=["train", "val", "test"])
        if name == "noise-eval":
            e.add_argument("--noise-peak", type=float)

    g = sub.add_parser("gradcheck", parents=[common])
    g.add_argument("--seeds", type=_ints, default=[0])
    pp = sub.add_parser("params", parents=[common, arch])
    pp.add_argument("--classes", type=int)
    return p


def _read_config_file(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        d = yaml.safe_load(text) or {}
    else:
        d = json.loads(text)
    # a run manifest nests the resolved options under "config"
    return d.get("config", d) if isinstance(d, dict) else {}


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    names = {f.name for f in fields(RunConfig)}
    values = {}
    if getattr(ns, "config", None):
        fromfile = _read_config_file(ns.config)
        unknown = set(fromfile) - names
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        values.update(fromfile)
    for k, v in vars(ns).items():
        if k in names and v is not None:
            values[k] = v
    return RunConfig(**values)


def _apply_thread_cap():
    n = os.environ.get("PUNET_THREADS")
    if n:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(n))


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    _apply_thread_cap()
    try:
        cfg = resolve_config(ns)
        if ns.command == "gradcheck":
            return cmd_gradcheck(cfg, seeds=tuple(ns.seeds))
        return COMMANDS[ns.command](cfg)
    except InvalidConfig as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericalOverflow as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
