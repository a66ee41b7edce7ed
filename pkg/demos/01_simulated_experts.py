"""
Simulating disagreeing annotators
=================================

Four simulated experts relabel MNIST. Three of them swap digits 2 and 5 on a
random quarter of those images; the fourth copies the ground truth.
"""

import tempfile

import numpy as np

from dualunc.data import load_idx, simulate_experts
from dualunc.sample_data import find_mnist, write_mnist_sample

paths = find_mnist() or write_mnist_sample(tempfile.mkdtemp())
train = load_idx(paths["train_images"], paths["train_labels"])
print(f"{len(train)} training images of shape {train.image_shape}")

###############################################################################
# Draw the expert labels. The protocol is recorded alongside the labels.

ds = simulate_experts(train, k=4, swap_pair=(2, 5), fraction=0.25, affected=(0, 1, 2), seed=0)
print(ds.protocol)

###############################################################################
# How often does each expert disagree with the truth, per class?

pair = np.isin(train.labels, [2, 5])
for j in range(ds.experts):
    flipped = ds.perturbed_mask[:, j]
    print(f"expert {j}: {flipped[pair].mean():.3f} of digits 2/5 swapped, "
          f"{flipped[~pair].sum()} changes elsewhere")

###############################################################################
# A single image can now carry contradictory labels.

i = np.flatnonzero(ds.perturbed_mask.any(axis=1))[0]
print(f"image {i}: truth {train.labels[i]}, experts say {ds.expert_labels[:, i].tolist()}")
