"""Gradient checks, the per-op check registry, and parameter audits."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from . import tensor as T
from .architectures import count_params
from .product_unit import pu_forward, threshold_value
from .tensor import Tensor, backward, no_grad

FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    op: str
    input_shapes: list
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    passed: bool
    failing: tuple | None = None  # (input index, flat coordinate, analytic, numeric)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        shapes = " ".join("x".join(map(str, s)) or "scalar" for s in self.input_shapes)
        tail = "" if self.failing is None else f"  first failure: input {self.failing[0]} coord {self.failing[1]}"
        return f"{status}  {self.op:<28} rel={self.max_rel_error:.2e} abs={self.max_abs_error:.2e} tol={self.tolerance:.0e}  [{shapes}]{tail}"


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


def gradcheck(op, inputs, tolerance=1e-4, seed=0, step=FD_STEP, name=None) -> GradCheckReport:
    """Compare tape gradients of ``sum(R * op(*inputs))`` with central differences.

    ``R`` is a fixed random projection so every output element contributes.
    Inputs that require grad are perturbed one coordinate at a time.
    """
    # separate stream from any generator the caller used to draw ``inputs``
    rng = np.random.default_rng([seed, 7919])
    out = op(*inputs)
    proj = rng.standard_normal(out.shape)

    def scalar():
        with no_grad():
            return float(np.sum(op(*inputs).data * proj))

    for t in inputs:
        t.grad = None
    loss = T.sum_(T.mul(out, Tensor(proj)))
    backward(loss)

    max_rel = max_abs = 0.0
    failing = None
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = scalar()
            flat[j] = orig - step
            fm = scalar()
            flat[j] = orig
            num = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[j]
            rel = float(relative_error(a, num))
            max_rel = max(max_rel, rel)
            max_abs = max(max_abs, abs(a - num))
            if rel > tolerance and failing is None:
                failing = (i, j, float(a), float(num))
    return GradCheckReport(
        name or getattr(op, "__name__", "op"),
        [list(t.shape) for t in inputs],
        max_rel,
        max_abs,
        tolerance,
        max_rel <= tolerance,
        failing,
    )


# -- registry ---------------------------------------------------------------


@dataclass
class GradCase:
    """A randomized gradcheck configuration for one registered op."""

    op: str
    label: str
    build: object  # rng -> (fn, inputs)
    near_kink: object = None  # inputs -> bool; resample when True


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _spread(rng, shape, scale=0.1):
    """Values with pairwise gaps >= scale/2, so max-pooling has no near ties."""
    n = int(np.prod(shape))
    v = (rng.permutation(n) + rng.uniform(0.25, 0.75, n)) * scale
    return v.reshape(shape) - v.mean()


def _bn_case(training):
    def build(rng):
        x = _t(rng.normal(0, 1, (2, 3, 4, 4)))
        g = _t(rng.uniform(0.5, 1.5, 3))
        b = _t(rng.normal(0, 1, 3))
        rm = rng.normal(0, 0.5, 3)
        rv = rng.uniform(0.5, 2, 3)

        def fn(x, g, b):
            # fresh copies so finite differences do not see drifting running stats
            return F.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training)

        return fn, [x, g, b]

    return build


def _pu_case(k, cin, stride, padding):
    def build(rng):
        x = _t(rng.uniform(0.05, 2.5, (1, cin, 4 + k, 4 + k)))
        w = _t(rng.uniform(-0.5, 0.5, (2, cin, k, k)))
        th = _t(rng.normal(0, 0.5))
        fn = lambda x, w, th: pu_forward(x, w, th, stride, padding)
        return fn, [x, w, th]

    def near(inputs):
        x, _, th = inputs
        return bool(np.any(np.abs(x.data - threshold_value(th.data)) < 1e-3))

    return build, near


def _conv_case(k, stride, padding):
    def build(rng):
        x = _t(rng.normal(0, 1, (2, 2, 5, 5)))
        w = _t(rng.normal(0, 0.5, (3, 2, k, k)))
        return (lambda x, w: F.conv2d(x, w, stride, padding)), [x, w]

    return build


def _cases() -> list[GradCase]:
    cases = [
        GradCase("add", "broadcast", lambda r: (T.add, [_t(r.normal(size=(3, 4))), _t(r.normal(size=(1, 4)))])),
        GradCase("sub", "broadcast", lambda r: (T.sub, [_t(r.normal(size=(2, 3, 1))), _t(r.normal(size=(3, 5)))])),
        GradCase("mul", "broadcast", lambda r: (T.mul, [_t(r.normal(size=(3, 4))), _t(r.normal(size=(4,)))])),
        GradCase("div", "broadcast", lambda r: (T.div, [_t(r.normal(size=(3, 4))), _t(r.uniform(0.5, 2, (3, 1)))])),
        GradCase("neg", "", lambda r: (T.neg, [_t(r.normal(size=(3, 4)))])),
        GradCase("log", "", lambda r: (T.log, [_t(r.uniform(0.2, 3, (3, 4)))])),
        GradCase("exp", "", lambda r: (T.exp, [_t(r.normal(size=(3, 4)))])),
        GradCase("sigmoid", "", lambda r: (T.sigmoid, [_t(r.normal(0, 2, (3, 4)))])),
        GradCase("softplus", "", lambda r: (T.softplus, [_t(r.normal(0, 2, (3, 4)))])),
        GradCase(
            "clamp_min",
            "tensor bound",
            lambda r: (T.clamp_min, [_t(r.normal(size=(3, 4))), _t(r.normal(0, 0.3))]),
            lambda ins: bool(np.any(np.abs(ins[0].data - ins[1].data) < 1e-3)),
        ),
        GradCase("relu", "", lambda r: (T.relu, [_t(r.normal(size=(3, 4)))]), lambda ins: bool(np.any(np.abs(ins[0].data) < 1e-3))),
        GradCase("sum", "axis 1", lambda r: ((lambda x: T.sum_(x, axis=1)), [_t(r.normal(size=(3, 4, 2)))])),
        GradCase("mean", "axes (2,3)", lambda r: ((lambda x: T.mean(x, axis=(2, 3), keepdims=True)), [_t(r.normal(size=(2, 3, 4, 4)))])),
        GradCase("reshape", "", lambda r: ((lambda x: T.reshape(x, (4, 6))), [_t(r.normal(size=(2, 3, 4)))])),
        GradCase("batchnorm2d", "training", _bn_case(True)),
        GradCase("batchnorm2d", "eval", _bn_case(False)),
        GradCase("maxpool2d", "k3 s2 p1", lambda r: ((lambda x: F.maxpool2d(x, 3, 2, 1)), [_t(_spread(r, (2, 2, 6, 6)))])),
        GradCase("maxpool2d", "k2 s2 p0", lambda r: ((lambda x: F.maxpool2d(x, 2, 2, 0)), [_t(_spread(r, (1, 2, 4, 4)))])),
        GradCase(
            "linear",
            "with bias",
            lambda r: (F.linear, [_t(r.normal(size=(4, 5))), _t(r.normal(size=(3, 5))), _t(r.normal(size=(3,)))]),
        ),
        GradCase(
            "cross_entropy",
            "10 classes",
            lambda r: ((lambda z, y=r.integers(0, 10, 6): F.cross_entropy(z, y)), [_t(r.normal(0, 2, (6, 10)))]),
        ),
    ]
    for k in (1, 2, 3):
        for stride in (1, 2):
            for padding in (0, 1):
                cases.append(GradCase("conv2d", f"k{k} s{stride} p{padding}", _conv_case(k, stride, padding)))
    for k in (1, 2, 3):
        for cin in (1, 2):
            for stride in (1, 2):
                build, near = _pu_case(k, cin, stride, 0)
                cases.append(GradCase("pu_forward", f"k{k} cin{cin} s{stride}", build, near))
    build, near = _pu_case(3, 2, 1, 1)
    cases.append(GradCase("pu_forward", "k3 cin2 s1 p1", build, near))
    return cases


T.OPS.setdefault("pu_forward", pu_forward)
GRADCHECK_CASES: list[GradCase] = _cases()


def run_case(case: GradCase, seed=0, tolerance=1e-4, max_tries=100) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        fn, inputs = case.build(rng)
        if case.near_kink is None or not case.near_kink(inputs):
            break
    else:
        raise RuntimeError(f"{case.op}: could not sample away from the kink")
    label = f"{case.op} {case.label}".strip()
    return gradcheck(fn, inputs, tolerance=tolerance, seed=seed, name=label)


def run_registry(seed=0, tolerance=1e-4) -> list[GradCheckReport]:
    return [run_case(c, seed, tolerance) for c in GRADCHECK_CASES]


def uncovered_ops() -> set[str]:
    return set(T.OPS) - {c.op for c in GRADCHECK_CASES}


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["op", "input_shapes", "max_rel_error", "max_abs_error", "tolerance", "passed", "failing"])
    for r in reports:
        w.writerow([r.op, ";".join("x".join(map(str, s)) for s in r.input_shapes), f"{r.max_rel_error:.6e}", f"{r.max_abs_error:.6e}", r.tolerance, r.passed, "" if r.failing is None else r.failing])
    return buf.getvalue()


# -- parameter audit -----------------------------------------------------------


@dataclass
class ParamAudit:
    entries: list[tuple[str, tuple, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(c for _, _, c in self.entries)

    @property
    def theta_entries(self):
        return [e for e in self.entries if e[0].endswith(".theta")]

    def lines(self) -> list[str]:
        out = [f"{name:<48} {'x'.join(map(str, shape)) or '[]':<16} {count:>12,}" for name, shape, count in self.entries]
        out.append(f"{'total':<48} {'':<16} {self.total:>12,}")
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "shape", "count"])
        for name, shape, count in self.entries:
            w.writerow([name, "x".join(map(str, shape)), count])
        w.writerow(["total", "", self.total])
        return buf.getvalue()


def audit_params(model) -> ParamAudit:
    audit = ParamAudit([(name, tuple(p.shape), int(p.size)) for name, p in model.named_parameters()])
    assert audit.total == count_params(model)
    return audit
