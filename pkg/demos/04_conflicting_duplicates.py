"""
Contradictory duplicates
========================

Duplicate 30% of the 3s and 8s with the other label attached. After training,
those two classes should carry most of the labels uncertainty.
"""

import tempfile

import numpy as np

from dualunc.data import MultiExpertDataset, load_idx, make_conflicts
from dualunc.model import DualUncertaintyModel, ModelConfig, train
from dualunc.numerics import make_optimizer, make_rng
from dualunc.sample_data import find_mnist, write_mnist_sample
from dualunc.uncertainty import changed_groups, decompose

paths = find_mnist() or write_mnist_sample(tempfile.mkdtemp())
train_set = load_idx(paths["train_images"], paths["train_labels"]).subset(range(2000))
test_set = load_idx(paths["test_images"], paths["test_labels"], split="test")

rng = np.random.default_rng(0)
pool = np.flatnonzero(np.isin(train_set.labels, [3, 8]))
chosen = np.sort(rng.choice(pool, int(0.3 * len(pool)), replace=False))
conflicted, cset = make_conflicts(train_set, (3, 8), chosen)
print(f"{len(cset)} duplicated images, per class {cset.class_counts}")
a, b = cset.pairs[0]
print(f"pair {a}/{b}: labels {conflicted.labels[a]} and {conflicted.labels[b]}")

###############################################################################
# Train on the augmented set as if it came from one annotator.

model = DualUncertaintyModel(ModelConfig(), seed=0)
train(model, MultiExpertDataset.single(conflicted), make_optimizer("adam", model.parameters()),
      epochs=4, rng=make_rng(1))

stats = decompose(model, test_set, T=20).group_stats(changed_groups((3, 8)))
for (signal, group), st in stats.items():
    print(f"{signal} {group:9s} {st['mean']:.5f}")

###############################################################################
# The absolute numbers depend on training length; the ratio is what matters.

for signal in ("LU", "EU"):
    ratio = stats[(signal, "changed")]["mean"] / stats[(signal, "unchanged")]["mean"]
    print(f"{signal} changed/unchanged: {ratio:.1f}x")
