"""Central finite-difference checks of every op and block, in float64."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from treenet import ops, tensor
from treenet.blocks import BlockSpec, build_osa_block, build_srb, build_tree_block_basic, build_tree_block_complete
from treenet.layers import ECA, Linear, Module
from treenet.tensor import Tensor, no_grad

F64 = np.float64


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_points: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} max_rel_err={self.max_rel_err:.3e}  points={self.n_points}"


def rel_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: list,
    n_points: int = 10,
    eps: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between backward() and central differences.

    ``loss_fn`` rebuilds the scalar loss from the current ``.data`` of
    ``tensors``; ``n_points`` random coordinates are probed per tensor.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_points, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, rel_error(float(analytic.reshape(-1)[i]), numeric))
    return worst


@contextlib.contextmanager
def corrupted_backward(kind: str, factor: float = 1.1):
    """Scale the input gradients of one op kind; used to prove the checker bites."""
    tensor._grad_corruption[kind] = factor
    try:
        yield
    finally:
        tensor._grad_corruption.pop(kind, None)


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=F64)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Fixed random linear functional, so every output element matters."""
    r = Tensor(rng.standard_normal(out.shape), dtype=F64)
    return lambda y: ops.sum_all(ops.mul(y, r))


def _wrap(fn, tensors, rng):
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), tensors


def _module_case(module: Module, x: Tensor, rng):
    module.astype(F64)
    module.train()
    params = [p for _, p in module.named_parameters()]
    return _wrap(lambda: module(x), [x] + params, rng)


def _op_cases(rng):
    cases = {}

    x = _t(rng, 2, 3, 5, 5)
    w = _t(rng, 4, 3, 3, 3)
    b = _t(rng, 4)
    cases["conv2d 3x3 s1 p1 +bias"] = lambda: _wrap(lambda: ops.conv2d(x, w, b, 1, 1), [x, w, b], rng)
    x2 = _t(rng, 2, 4, 7, 6)
    w2 = _t(rng, 6, 4, 3, 3)
    cases["conv2d 3x3 s2 p1"] = lambda: _wrap(lambda: ops.conv2d(x2, w2, None, 2, 1), [x2, w2], rng)
    w3 = _t(rng, 5, 4, 1, 1)
    cases["conv2d 1x1"] = lambda: _wrap(lambda: ops.conv2d(x2, w3), [x2, w3], rng)
    w4 = _t(rng, 6, 2, 3, 3)
    cases["conv2d grouped g=2"] = lambda: _wrap(lambda: ops.conv2d(x2, w4, None, 1, 1, groups=2), [x2, w4], rng)

    xb = _t(rng, 4, 3, 5, 5)
    gamma = Tensor(1 + 0.1 * rng.standard_normal(3), requires_grad=True, dtype=F64)
    beta = _t(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    cases["batch_norm train"] = lambda: _wrap(
        lambda: ops.batch_norm(xb, gamma, beta, rm.copy(), rv.copy(), True), [xb, gamma, beta], rng
    )
    rm2, rv2 = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    cases["batch_norm eval"] = lambda: _wrap(lambda: ops.batch_norm(xb, gamma, beta, rm2, rv2, False), [xb, gamma, beta], rng)

    xr = _t(rng, 2, 3, 4, 4)
    cases["relu"] = lambda: _wrap(lambda: ops.relu(xr), [xr], rng)
    cases["sigmoid"] = lambda: _wrap(lambda: ops.sigmoid(xr), [xr], rng)
    xp = _t(rng, 2, 2, 8, 8)
    cases["max_pool2d 3x3 s2 p1"] = lambda: _wrap(lambda: ops.max_pool2d(xp), [xp], rng)
    cases["global_avg_pool"] = lambda: _wrap(lambda: ops.global_avg_pool(xr), [xr], rng)
    xa, xc = _t(rng, 2, 3, 4, 4), _t(rng, 2, 5, 4, 4)
    cases["concat_channels"] = lambda: _wrap(lambda: ops.concat_channels([xr, xc, xa]), [xr, xc, xa], rng)
    cases["add"] = lambda: _wrap(lambda: ops.add(xr, xa), [xr, xa], rng)
    wc = _t(rng, 2, 3, 1, 1)
    cases["multiply_channelwise"] = lambda: _wrap(lambda: ops.multiply_channelwise(xr, wc), [xr, wc], rng)
    v = _t(rng, 3, 9)
    k = _t(rng, 5)
    cases["conv1d_channels k=5"] = lambda: _wrap(lambda: ops.conv1d_channels(v, k), [v, k], rng)
    xf, wf, bf = _t(rng, 3, 5), _t(rng, 5, 7), _t(rng, 7)
    cases["fully_connected"] = lambda: _wrap(lambda: ops.fully_connected(xf, wf, bf), [xf, wf, bf], rng)
    logits = _t(rng, 4, 10)
    labels = rng.integers(0, 10, size=4)
    cases["softmax_cross_entropy"] = lambda: (lambda: ops.softmax_cross_entropy(logits, labels)[0], [logits])
    return cases


def _block_cases(rng):
    cases = {}

    def srb():
        return _module_case(build_srb(4, 4, rng=rng), _t(rng, 2, 4, 5, 5), rng)

    def eca():
        return _module_case(ECA(8, 3, rng=rng), _t(rng, 2, 8, 4, 4), rng)

    def osa():
        spec = BlockSpec(l=3, k=4, kp=4, k_cat=6, k_in=6, kind="osa")
        return _module_case(build_osa_block(spec, rng=rng), _t(rng, 2, 6, 5, 5), rng)

    def tree_basic():
        spec = BlockSpec(l=3, k=4, kp=3, k_cat=6, k_in=5)
        return _module_case(build_tree_block_basic(spec, rng=rng), _t(rng, 2, 5, 5, 5), rng)

    def tree_complete():
        spec = BlockSpec(l=3, k=4, kp=3, k_cat=8, k_in=8, eca_kernel=3)
        return _module_case(build_tree_block_complete(spec, rng=rng), _t(rng, 2, 8, 5, 5), rng)

    def chain():
        x = _t(rng, 2, 3, 6, 6)
        w = _t(rng, 4, 3, 3, 3, scale=0.5)
        fc = Linear(4 * 6 * 6, 5, rng=rng, dtype=F64)
        labels = rng.integers(0, 5, size=2)

        def fn():
            h = ops.relu(ops.conv2d(x, w, None, 1, 1))
            return ops.softmax_cross_entropy(fc(ops.reshape(h, (2, -1))), labels)[0]

        return fn, [x, w, fc.weight, fc.bias]

    cases["block SRB"] = srb
    cases["block ECA"] = eca
    cases["block OSA"] = osa
    cases["block Tree basic"] = tree_basic
    cases["block Tree complete"] = tree_complete
    cases["chain conv2d+relu+fc+loss"] = chain
    return cases


def run_gradchecks(seed: int = 0, tolerance: float = 1e-4, n_points: int = 10, eps: float = 1e-6) -> list:
    """Check every op and block; returns one :class:`CheckResult` per case."""
    rng = np.random.default_rng(seed)
    results = []
    for name, make in {**_op_cases(rng), **_block_cases(rng)}.items():
        fn, tensors = make()
        err = check_gradients(fn, tensors, n_points=n_points, eps=eps, seed=seed)
        results.append(CheckResult(name, err, n_points, err < tolerance))
    return results
