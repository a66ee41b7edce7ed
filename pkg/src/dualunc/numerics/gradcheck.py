"""Central finite-difference checks of the reverse-mode gradients.

Checks run in float64. The error reported for a check is the largest
element-wise relative error ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
over all inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ops
from .tensor import Tensor

TOLERANCE = 1e-3
ABS_FLOOR = 1e-6
EPS = 1e-5  # ~ cube root of float64 machine epsilon, balances truncation and roundoff

# A check builds (scalar-valued function of tensors, list of float64 input arrays).
CheckBuilder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def numeric_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = EPS):
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            up = fn(*[Tensor(a) for a in arrays]).item()
            arr[idx] = orig - eps
            down = fn(*[Tensor(a) for a in arrays]).item()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def analytic_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]):
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*inputs).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def max_relative_error(analytic, numeric, floor: float = ABS_FLOOR) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = EPS) -> float:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = analytic_gradient(fn, arrays)
    numeric = numeric_gradient(fn, arrays, eps)
    return max_relative_error(analytic, numeric)


def run_checks(registry: Mapping[str, CheckBuilder], seed: int = 0,
               tolerance: float = TOLERANCE) -> list[CheckResult]:
    if not registry:
        raise ValueError("gradient-check registry is empty; refusing a vacuous pass")
    results = []
    for i, (name, build) in enumerate(registry.items()):
        rng = np.random.default_rng([seed, i])
        fn, arrays = build(rng)
        err = check(fn, arrays)
        results.append(CheckResult(name, err, bool(err <= tolerance)))
    return results


# ------------------------------------------------------------------ op checks
def _weights(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_zero(rng, *shape):
    # keeps ReLU/abs kinks further than the FD step from every sample point
    x = rng.uniform(0.1, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, *shape):
    # well-separated values so max-pool winners do not swap under perturbation
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape))


def _project(rng, shape):
    """A fixed random projection turning any tensor into a scalar loss."""
    w = rng.standard_normal(shape)
    return lambda t: ops.sum(ops.mul(t, Tensor(w)))


def _build_add(rng):
    proj = _project(rng, (3, 4))
    return (lambda a, b: proj(ops.add(a, b))), [_weights(rng, 3, 4), _weights(rng, 1, 4)]


def _build_sub(rng):
    proj = _project(rng, (3, 4))
    return (lambda a, b: proj(ops.sub(a, b))), [_weights(rng, 3, 4), _weights(rng, 3, 1)]


def _build_mul(rng):
    proj = _project(rng, (2, 3))
    return (lambda a, b: proj(ops.mul(a, b))), [_weights(rng, 2, 3), _weights(rng, 2, 3)]


def _build_div(rng):
    proj = _project(rng, (2, 3))
    return (lambda a, b: proj(ops.div(a, b))), [_weights(rng, 2, 3), rng.uniform(0.5, 2, (2, 3))]


def _build_power(rng):
    proj = _project(rng, (5,))
    return (lambda a: proj(ops.power(a, 2.0))), [_weights(rng, 5)]


def _build_exp_log(rng):
    proj = _project(rng, (4,))
    return (lambda a: proj(ops.log(ops.exp(a) + 1.0))), [_weights(rng, 4)]


def _build_clip(rng):
    proj = _project(rng, (6,))
    return (lambda a: proj(ops.clip(a, -0.5, 0.5))), [_away_from_zero(rng, 6) * 0.9]


def _build_relu(rng):
    proj = _project(rng, (3, 5))
    return (lambda a: proj(ops.relu(a))), [_away_from_zero(rng, 3, 5)]


def _build_sum_mean(rng):
    proj = _project(rng, (3,))
    return (lambda a: proj(ops.sum(a, axis=1)) + ops.mean(ops.mul(a, a))), [_weights(rng, 3, 4)]


def _build_matmul(rng):
    proj = _project(rng, (3, 2))
    return (lambda a, b, c: proj(ops.linear(a, b, c))), [
        _weights(rng, 3, 4), _weights(rng, 4, 2), _weights(rng, 2)]


def _build_reshape_concat(rng):
    proj = _project(rng, (2, 5, 2))

    def fn(a, b):
        return proj(ops.concat([ops.reshape(a, (2, 3, 2)), b], axis=1))
    return fn, [_weights(rng, 2, 6), _weights(rng, 2, 2, 2)]


def _build_tile(rng):
    proj = _project(rng, (2, 4, 3, 3))

    def fn(h, z):
        return proj(ops.concat([h, ops.tile_spatial(z, 3, 3)], axis=1))
    return fn, [_weights(rng, 2, 1, 3, 3), _weights(rng, 2, 3)]


def _build_softmax(rng):
    proj = _project(rng, (3, 5))
    return (lambda a: proj(ops.softmax(a))), [_weights(rng, 3, 5)]


def _build_log_softmax(rng):
    proj = _project(rng, (3, 5))
    return (lambda a: proj(ops.log_softmax(a))), [_weights(rng, 3, 5)]


def _build_conv_valid(rng):
    proj = _project(rng, (2, 3, 3, 4))
    return (lambda x, w, b: proj(ops.conv2d(x, w, b, padding="valid"))), [
        _weights(rng, 2, 2, 5, 6), _weights(rng, 3, 2, 3, 3), _weights(rng, 3)]


def _build_conv_same(rng):
    proj = _project(rng, (2, 2, 5, 6))
    return (lambda x, w, b: proj(ops.conv2d(x, w, b, padding="same"))), [
        _weights(rng, 2, 3, 5, 6), _weights(rng, 2, 3, 4, 3), _weights(rng, 2)]


def _build_maxpool(rng):
    proj = _project(rng, (2, 2, 2, 3))
    return (lambda x: proj(ops.maxpool2x2(x))), [_distinct(rng, 2, 2, 4, 6)]


def _build_dropout(rng):
    proj = _project(rng, (4, 6))
    mask = ops.dropout_mask((4, 6), 0.5, rng, dtype=np.float64)
    return (lambda x: proj(ops.dropout(x, 0.5, mode="sample", mask=mask))), [_weights(rng, 4, 6)]


OP_CHECKS: dict[str, CheckBuilder] = {
    "add": _build_add,
    "sub": _build_sub,
    "mul": _build_mul,
    "div": _build_div,
    "power": _build_power,
    "exp_log": _build_exp_log,
    "clip": _build_clip,
    "relu": _build_relu,
    "sum_mean": _build_sum_mean,
    "matmul_linear": _build_matmul,
    "reshape_concat": _build_reshape_concat,
    "tile_concat": _build_tile,
    "softmax": _build_softmax,
    "log_softmax": _build_log_softmax,
    "conv2d_valid": _build_conv_valid,
    "conv2d_same": _build_conv_same,
    "maxpool2x2": _build_maxpool,
    "dropout": _build_dropout,
}
