"""Locate MNIST IDX files, or build a small real-MNIST stand-in.

Full MNIST is never downloaded. When it is not on disk, the 5000-image
MNIST sample bundled with ``mlxtend`` (500 images per digit) can be split
and written out as IDX files so the rest of the pipeline runs unchanged.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .data import write_idx

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def find_mnist(directory=None) -> dict[str, Path] | None:
    """Return IDX paths under ``directory`` (default ``$MNIST_DIR``), plain or gzipped."""
    directory = directory or os.environ.get("MNIST_DIR")
    if not directory:
        return None
    root = Path(directory)
    found = {}
    for key, stem in MNIST_FILES.items():
        for cand in (root / stem, root / f"{stem}.gz"):
            if cand.exists():
                found[key] = cand
                break
        else:
            return None
    return found


def write_mnist_sample(out_dir, test_per_class: int = 100, seed: int = 0) -> dict[str, Path]:
    """Split the bundled 5000-image MNIST sample into train/test IDX files."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("the MNIST sample needs the optional 'mlxtend' package") from exc
    pixels, labels = mnist_data()
    images = pixels.reshape(-1, 28, 28).astype(np.uint8)
    labels = labels.astype(np.uint8)
    rng = np.random.default_rng(seed)
    test_idx = np.concatenate([
        rng.choice(np.flatnonzero(labels == c), test_per_class, replace=False)
        for c in range(10)])
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    train_order = rng.permutation(np.flatnonzero(~test_mask))
    test_order = rng.permutation(test_idx)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {key: out / stem for key, stem in MNIST_FILES.items()}
    write_idx(paths["train_images"], images[train_order])
    write_idx(paths["train_labels"], labels[train_order])
    write_idx(paths["test_images"], images[test_order])
    write_idx(paths["test_labels"], labels[test_order])
    return paths
