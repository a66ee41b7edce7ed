"""
Referring uncertain cases
=========================

Rank test images by uncertainty and hand the most uncertain ones to a human.
The curve shows accuracy on what the model keeps.
"""

import tempfile

from dualunc.data import load_idx, simulate_experts
from dualunc.model import DualUncertaintyModel, ModelConfig, train
from dualunc.numerics import make_optimizer, make_rng
from dualunc.sample_data import find_mnist, write_mnist_sample
from dualunc.uncertainty import decompose, referral_curve

paths = find_mnist() or write_mnist_sample(tempfile.mkdtemp())
train_set = load_idx(paths["train_images"], paths["train_labels"]).subset(range(2000))
test_set = load_idx(paths["test_images"], paths["test_labels"], split="test")

model = DualUncertaintyModel(ModelConfig(), seed=0)
train(model, simulate_experts(train_set, seed=0),
      make_optimizer("adam", model.parameters()), epochs=2, rng=make_rng(1))
report = decompose(model, test_set, T=20)

###############################################################################
# Ties in the signal are split evenly, so a signal that is constant everywhere
# gives a flat curve at the overall accuracy.

print("retained   LU-ranked  EU-ranked")
lu = referral_curve(report, test_set.labels, "LU")
eu = referral_curve(report, test_set.labels, "EU")
for (frac, a), (_, b) in zip(lu, eu):
    print(f"{frac:8.0%}   {a:9.4f}  {b:9.4f}")
