"""
Checking the gradients
======================

Every layer and the full training loss are compared against central finite
differences in float64.
"""

import numpy as np

from dualunc.model import loss_gradchecks
from dualunc.numerics import Tensor, ops
from dualunc.numerics.gradcheck import OP_CHECKS, check, run_checks

###############################################################################
# A hand-written check: softmax cross-entropy through a convolution.

rng = np.random.default_rng(0)
x = rng.standard_normal((2, 1, 6, 6))
w = rng.standard_normal((3, 1, 3, 3))
target = np.eye(3)[[0, 2]]


def loss(x, w):
    logits = ops.mean(ops.mean(ops.conv2d(x, w), axis=3), axis=2)
    return -ops.sum(ops.log_softmax(logits) * Tensor(target))


print(f"conv + log_softmax: max relative error {check(loss, [x, w]):.2e}")

###############################################################################
# The registered suite: 18 layer checks and one check per model parameter
# tensor for each KL direction.

results = run_checks({**OP_CHECKS, **loss_gradchecks()})
worst = max(results, key=lambda r: r.max_rel_error)
print(f"{sum(r.passed for r in results)}/{len(results)} pass; worst {worst.name} "
      f"at {worst.max_rel_error:.1e}")
