"""
Labels uncertainty versus epistemic uncertainty
===============================================

Train the dual model on the simulated experts, then split its predictive
variance into a latent part (LU) and a dropout part (EU).
"""

import tempfile

from dualunc.data import load_idx, simulate_experts
from dualunc.model import DualUncertaintyModel, ModelConfig, train
from dualunc.numerics import make_optimizer, make_rng
from dualunc.sample_data import find_mnist, write_mnist_sample
from dualunc.uncertainty import changed_groups, decompose

paths = find_mnist() or write_mnist_sample(tempfile.mkdtemp())
train_set = load_idx(paths["train_images"], paths["train_labels"]).subset(range(2000))
test_set = load_idx(paths["test_images"], paths["test_labels"], split="test")
experts = simulate_experts(train_set, seed=0)

###############################################################################
# Every (image, expert) pair is one training example. A few epochs are enough
# for the latent code to pick up the 2/5 ambiguity.

model = DualUncertaintyModel(ModelConfig(), seed=0)
opt = make_optimizer("adam", model.parameters(), lr=1e-3)
log = train(model, experts, opt, epochs=3, rng=make_rng(1), eval_set=test_set,
            callback=lambda r: print(f"epoch {r.epoch}: loss {r.total:.3f} acc {r.accuracy:.3f}"))

###############################################################################
# LU samples the prior latent with dropout off; EU samples dropout masks with
# the latent fixed at the prior mean.

groups = changed_groups((2, 5))
report = decompose(model, test_set, T=20, seed=0)
for (signal, group), st in report.group_stats(groups).items():
    print(f"{signal} {group:9s} mean {st['mean']:.5f}  (variance {st['variance']:.2e})")

###############################################################################
# The absolute numbers depend on training length; the ratio is what matters.

stats = report.group_stats(groups)
for signal in ("LU", "EU"):
    ratio = stats[(signal, "changed")]["mean"] / stats[(signal, "unchanged")]["mean"]
    print(f"{signal} changed/unchanged: {ratio:.1f}x")
