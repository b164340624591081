"""Central finite-difference checker for the analytic adjoints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass
class GradientCheckReport:
    max_abs_error: float
    max_rel_error: float
    worst_index: int
    passed: bool
    tolerance: float
    checked: int = 0

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} checked={self.checked} max_abs_error={self.max_abs_error:.3e} "
            f"max_rel_error={self.max_rel_error:.3e} worst_index={self.worst_index} tol={self.tolerance:g}"
        )


def finite_difference_check(
    f: Callable[..., float],
    inputs: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    floor: float = 1e-3,
    indices: Optional[Sequence[Sequence[int]]] = None,
) -> GradientCheckReport:
    """Compare ``analytic`` against central differences of the scalar ``f(*inputs)``.

    Inputs are perturbed in place and restored. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    near-zero gradients from turning rounding noise into huge ratios.
    ``worst_index`` is a flat index into the concatenation of all inputs.
    ``indices`` optionally restricts the check to given flat indices per input.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if len(inputs) != len(analytic):
        raise ValueError("one analytic gradient per input is required")
    max_abs = max_rel = 0.0
    worst = -1
    base = 0
    checked = 0
    for k, (x, g) in enumerate(zip(inputs, analytic)):
        if np.shape(g) != np.shape(x):
            raise ValueError(f"gradient {k} has shape {np.shape(g)}, input has {np.shape(x)}")
        flat = x.reshape(-1)
        if not np.shares_memory(flat, x):
            raise ValueError(f"input {k} must be contiguous so it can be perturbed in place")
        gflat = np.asarray(g).reshape(-1)
        idx = range(flat.size) if indices is None else indices[k]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f(*inputs)
            flat[i] = orig - epsilon
            fm = f(*inputs)
            flat[i] = orig
            num = (fp - fm) / (2.0 * epsilon)
            err = abs(gflat[i] - num)
            rel = err / max(abs(gflat[i]), abs(num), floor)
            checked += 1
            if err > max_abs:
                max_abs = err
            if rel > max_rel or worst < 0:
                max_rel = max(rel, max_rel)
                worst = base + int(i)
        base += flat.size
    return GradientCheckReport(max_abs, max_rel, worst, max_rel <= tolerance, tolerance, checked)


# ---------------------------------------------------------------------------
# randomized per-operator suites
# ---------------------------------------------------------------------------

SUITES = ("bilinear", "DC", "RDC", "FRDC", "conv", "bn", "ce", "relu")


def _projected(forward, out_shape, rng):
    """Scalar loss sum(R * forward(...)) and its upstream gradient R."""
    r = rng.normal(size=out_shape)
    return (lambda *a: float((forward(*a) * r).sum())), r


def _merge(reports):
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradientCheckReport(
        max(r.max_abs_error for r in reports), worst.max_rel_error, worst.worst_index,
        all(r.passed for r in reports), worst.tolerance, sum(r.checked for r in reports),
    )


def check_operator(name: str, rng: np.random.Generator, tolerance: float = 1e-4,
                   epsilon: float = 1e-6, inject_fault: bool = False) -> GradientCheckReport:
    """Finite-difference check of one operator on one random small instance.

    ``inject_fault`` scales one analytic weight-gradient entry by 1.1.
    """
    from . import deform as D
    from . import ops

    def corrupt(g):
        if inject_fault:
            g = g.copy()
            flat = g.reshape(-1)
            j = int(np.argmax(np.abs(flat)))
            flat[j] *= 1.1
        return g

    if name == "bilinear":
        plane = rng.normal(size=(4, 5))
        u = np.array([rng.uniform(0.1, 3.9)])
        v = np.array([rng.uniform(0.1, 2.9)])
        f = lambda p, uu, vv: D.bilinear_sample(p, uu[0], vv[0])
        dp, du, dv = D.bilinear_sample_backward(plane, u[0], v[0])
        return finite_difference_check(f, [plane, u, v], [corrupt(dp), np.array([du]), np.array([dv])],
                                       epsilon, tolerance)
    if name in ("DC", "RDC", "FRDC"):
        n, c, o, h, w = 1, 2, 2, 5, 6
        x = rng.normal(size=(n, c, h, w))
        if name == "FRDC":
            kshape = (3, 1) if rng.random() < 0.5 else (1, 3)
            geom = D.KernelGeometry(*kshape, dilation=int(rng.integers(1, 3)))
        else:
            geom = D.KernelGeometry(3, 3, dilation=int(rng.integers(1, 3)))
        wt = rng.normal(size=(o, c, geom.kh, geom.kw))
        b = rng.normal(size=o)
        oh, ow = geom.output_size(h, w)
        off = rng.uniform(-1.5, 1.5, size=(n, D.offset_channels(name, geom), oh, ow))
        fwd = lambda xx, ww, bb, oo: D.deform_forward(xx, ww, bb, oo, geom, name)[0]
        f, r = _projected(fwd, (n, o, oh, ow), rng)
        _, cache = D.deform_forward(x, wt, b, off, geom, name)
        dx, dw, db, doff = D.deform_backward(r, cache)
        return finite_difference_check(f, [x, wt, b, off], [dx, corrupt(dw), db, doff], epsilon, tolerance)
    if name == "conv":
        stride = int(rng.integers(1, 3))
        dil = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        x = rng.normal(size=(2, 2, 6, 7))
        wt = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        y = ops.conv2d(x, wt, b, stride, dil, pad)
        f, r = _projected(lambda xx, ww, bb: ops.conv2d(xx, ww, bb, stride, dil, pad), y.shape, rng)
        dx, dw, db = ops.conv2d_backward(r, x, wt, stride, dil, pad)
        return finite_difference_check(f, [x, wt, b], [dx, corrupt(dw), db], epsilon, tolerance)
    if name == "bn":
        x = rng.normal(size=(3, 2, 3, 4)) * rng.uniform(0.5, 2.0) + rng.normal()
        scale = rng.normal(size=2)
        shift = rng.normal(size=2)

        def fwd(xx, ss, tt):
            return ops.batch_normalize(xx, ops.NormStatistics.fresh(2), ss, tt, "train")[0]

        f, r = _projected(fwd, x.shape, rng)
        _, cache = ops.batch_normalize(x, ops.NormStatistics.fresh(2), scale, shift, "train")
        dx, ds, dt = ops.batch_normalize_backward(r, cache)
        return finite_difference_check(f, [x, scale, shift], [dx, corrupt(ds), dt], epsilon, tolerance)
    if name == "ce":
        logits = rng.normal(size=(1, 4, 2, 2)) * 2
        labels = rng.integers(0, 4, size=(1, 2, 2))
        labels[0, 0, 0] = 255 if rng.random() < 0.3 else labels[0, 0, 0]
        f = lambda lg: ops.softmax_cross_entropy(lg, labels, 255, 2.0)[0]
        _, g = ops.softmax_cross_entropy(logits, labels, 255, 2.0)
        return finite_difference_check(f, [logits], [corrupt(g)], epsilon, tolerance)
    if name == "relu":
        x = rng.normal(size=(2, 3, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        f, r = _projected(ops.relu, x.shape, rng)
        return finite_difference_check(f, [x], [corrupt(ops.relu_backward(r, x))], epsilon, tolerance)
    raise ValueError(f"unknown operator {name!r}; expected one of {SUITES}")


def run_suite(name: str, seed: int = 0, instances: int = 20, tolerance: float = 1e-4,
              inject_fault: bool = False) -> GradientCheckReport:
    rng = np.random.default_rng(seed)
    return _merge([check_operator(name, rng, tolerance, inject_fault=inject_fault) for _ in range(instances)])
