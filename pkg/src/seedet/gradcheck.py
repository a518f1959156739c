"""Finite-difference verification of every differentiable operator.

Each check builds a scalar objective from one op, computes analytic
gradients through the tape, and compares against central differences in
float64. The suite is what `seedet gradcheck` runs and what the operator
acceptance test asserts on.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-5
REL_FLOOR = 1e-8  # denominators below this count as zero agreement


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    elementwise: bool
    seconds: float

    def ok(self, tol_general: float = 1e-4, tol_elementwise: float = 1e-6) -> bool:
        return self.max_rel_err < (tol_elementwise if self.elementwise else tol_general)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function wrt arr (in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    # a fixed random projection makes the scalar sensitive to every output
    return T.tsum(t * w)


def _check(name: str, build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray],
           elementwise: bool) -> CheckResult:
    t0 = time.perf_counter()
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    T.clear_tape()
    loss = build(tensors)
    T.backward(loss)
    worst = 0.0
    for tsr, arr in zip(tensors, arrays):

        def f() -> float:
            with T.no_grad():
                fresh = [Tensor(a) for a in arrays]
                return float(build(fresh).data)

        num = numerical_grad(f, arr)
        worst = max(worst, rel_err(tsr.grad, num))
    T.clear_tape()
    return CheckResult(name, worst, elementwise, time.perf_counter() - t0)


def run_suite(verbose: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(np.random.SeedSequence(20240214))
    results: list[CheckResult] = []

    def add(name, build, arrays, elementwise=False):
        res = _check(name, build, [np.asarray(a, dtype=np.float64) for a in arrays], elementwise)
        results.append(res)
        if verbose:
            status = "ok" if res.ok() else "FAIL"
            print(f"  {name:<22} max rel err {res.max_rel_err:.3e}  [{status}]")

    u = rng.standard_normal

    # elementwise suite
    w1 = u((3, 4))
    add("add", lambda ts: _weighted_sum(ts[0] + ts[1], w1), [u((3, 4)), u((3, 4))], True)
    add("add_broadcast", lambda ts: _weighted_sum(ts[0] + ts[1], w1), [u((3, 4)), u((1, 4))], True)
    add("mul", lambda ts: _weighted_sum(ts[0] * ts[1], w1), [u((3, 4)), u((3, 4))], True)
    add("relu", lambda ts: _weighted_sum(T.relu(ts[0]), w1), [u((3, 4)) + 0.05], True)
    add("sigmoid", lambda ts: _weighted_sum(T.sigmoid(ts[0]), w1), [2.0 * u((3, 4))], True)
    add("exp", lambda ts: _weighted_sum(T.texp(ts[0]), w1), [u((3, 4))], True)
    add("log", lambda ts: _weighted_sum(T.tlog(ts[0]), w1), [np.abs(u((3, 4))) + 0.5], True)
    add("power", lambda ts: _weighted_sum(T.power(ts[0], 2.0), w1),
        [np.abs(u((3, 4))) + 0.5], True)
    add("clip", lambda ts: _weighted_sum(T.clip(ts[0], -0.5, 0.5), w1), [2.0 * u((3, 4))], True)
    wsl = u((2, 3))
    add("smooth_l1", lambda ts: _weighted_sum(T.smooth_l1(ts[0]), wsl),
        [np.array([[-2.0, -0.6, -0.2], [0.3, 0.7, 1.9]])], True)

    # reductions and shape ops
    w2 = u((4, 3))
    wsum = u(4)
    add("sum_axis", lambda ts: T.tsum(T.tsum(ts[0], axis=(0, 2)) * wsum), [u((2, 4, 3))], True)
    add("mean", lambda ts: T.tsum(T.tmean(ts[0], axis=1) * w2[:, 0]), [u((4, 5))], True)
    add("reshape", lambda ts: _weighted_sum(T.reshape(ts[0], (3, 4)), w1), [u((4, 3))], True)
    add("transpose", lambda ts: _weighted_sum(T.transpose(ts[0], (1, 0)), w1), [u((4, 3))], True)
    wg = u((2, 4))
    add("getitem_slice", lambda ts: _weighted_sum(ts[0][1:3, :], wg), [u((5, 4))], True)
    idx = np.array([0, 2, 2, 4])
    wi = u((4, 3))
    add("getitem_fancy", lambda ts: _weighted_sum(ts[0][idx], wi), [u((5, 3))], True)
    wc = u((5, 3))
    add("concat", lambda ts: _weighted_sum(T.concat([ts[0], ts[1]], axis=0), wc),
        [u((2, 3)), u((3, 3))], True)

    # dense / SE path
    wd = u((5, 3))
    add("dense", lambda ts: _weighted_sum(T.dense(ts[0], ts[1], ts[2]), wd),
        [u((5, 4)), u((3, 4)), u(3)])
    wgap = u((2, 3))
    add("global_avg_pool", lambda ts: _weighted_sum(T.global_avg_pool(ts[0]), wgap),
        [u((2, 3, 4, 4, 4))])
    wsc = u((2, 3, 2, 2, 2))
    add("scale_channels", lambda ts: _weighted_sum(T.scale_channels(ts[0], ts[1]), wsc),
        [u((2, 3, 2, 2, 2)), u((2, 3))])

    # convolution family
    wcv = u((2, 4, 3, 3, 3))
    add("conv3d_s1", lambda ts: _weighted_sum(
        T.conv3d(ts[0], ts[1], ts[2], stride=1, pad=1), wcv),
        [u((2, 3, 3, 3, 3)), u((4, 3, 3, 3, 3)), u(4)])
    wcv2 = u((2, 4, 2, 2, 2))
    add("conv3d_s2", lambda ts: _weighted_sum(
        T.conv3d(ts[0], ts[1], stride=2, pad=1), wcv2),
        [u((2, 3, 4, 4, 4)), u((4, 3, 3, 3, 3))])
    wct = u((2, 4, 6, 6, 6))
    add("conv3d_transpose", lambda ts: _weighted_sum(
        T.conv3d_transpose(ts[0], ts[1], stride=2, pad=0), wct),
        [u((2, 3, 3, 3, 3)), u((3, 4, 2, 2, 2))])
    wmp = u((1, 2, 2, 2, 2))
    add("max_pool3d", lambda ts: _weighted_sum(T.max_pool3d(ts[0], 2, 2), wmp),
        [u((1, 2, 4, 4, 4))])

    # batch norm, both modes
    wbn = u((3, 2, 2, 2, 2))
    running = (np.zeros(2), np.ones(2))
    add("batch_norm_train", lambda ts: _weighted_sum(
        T.batch_norm(ts[0], ts[1], ts[2], running[0].copy(), running[1].copy(),
                     training=True), wbn),
        [u((3, 2, 2, 2, 2)), np.abs(u(2)) + 0.5, u(2)])
    rm, rv = u(2) * 0.1, np.abs(u(2)) + 0.5
    add("batch_norm_eval", lambda ts: _weighted_sum(
        T.batch_norm(ts[0], ts[1], ts[2], rm, rv, training=False), wbn),
        [u((3, 2, 2, 2, 2)), np.abs(u(2)) + 0.5, u(2)])

    return results


def suite_passed(results: list[CheckResult]) -> bool:
    return all(r.ok() for r in results)
