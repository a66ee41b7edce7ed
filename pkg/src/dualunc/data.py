"""Image/label ingestion and simulated multi-annotator labels.

IDX files (the MNIST distribution format) are parsed bit-exactly. Multiple
experts are simulated by copying the ground truth and swapping a random
fraction of two classes for a chosen subset of experts. Conflicting
duplicates give a second, single-label way of injecting disagreement.

Dataset container layout (all integers little-endian)::

    magic      4 bytes  b"MXDS"
    version    uint32   (currently 1)
    N, k, H, W, c       uint32 each
    meta_len   uint32
    meta       meta_len bytes of UTF-8 JSON (split, protocol), sorted keys
    images     N*H*W float32
    labels     N int32           ground truth
    experts    k*N int32         expert-major
    mask       N*k uint8         sample-major, 1 = label differs from truth
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .numerics.random import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CONTAINER_MAGIC = b"MXDS"
CONTAINER_VERSION = 1


class IdxFormatError(ValueError):
    """Malformed IDX input; the message names the byte offset."""


class ContainerFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledImageSet:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError(f"images must be (N, H, W), got {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if self.labels.shape != (len(self.images),):
            raise ValueError(
                f"{len(self.images)} images but labels have shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, indices) -> "LabeledImageSet":
        indices = np.asarray(indices)
        return LabeledImageSet(self.images[indices], self.labels[indices], self.split,
                               self.num_classes)


@dataclass(frozen=True)
class ExpertProtocol:
    """Recipe that generated a set of expert labels."""

    experts: int
    swap_pair: tuple[int, int]
    fraction: float
    affected: tuple[int, ...]
    seed: int

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExpertProtocol":
        return cls(int(d["experts"]), tuple(d["swap_pair"]), float(d["fraction"]),
                   tuple(d["affected"]), int(d["seed"]))


@dataclass(frozen=True, eq=False)
class MultiExpertDataset:
    base: LabeledImageSet
    expert_labels: np.ndarray  # (k, N) int64
    perturbed_mask: np.ndarray  # (N, k) bool
    protocol: ExpertProtocol | None = None

    def __post_init__(self):
        n = len(self.base)
        if self.expert_labels.ndim != 2 or self.expert_labels.shape[1] != n:
            raise ValueError(f"expert_labels must be (k, {n}), got {self.expert_labels.shape}")
        if self.perturbed_mask.shape != (n, self.experts):
            raise ValueError(f"perturbed_mask must be ({n}, {self.experts}), "
                             f"got {self.perturbed_mask.shape}")
        if not np.array_equal(self.perturbed_mask, (self.expert_labels != self.base.labels).T):
            raise ValueError("perturbed_mask disagrees with expert_labels vs ground truth")

    @property
    def experts(self) -> int:
        return self.expert_labels.shape[0]

    def __len__(self) -> int:
        return len(self.base)

    @classmethod
    def single(cls, base: LabeledImageSet) -> "MultiExpertDataset":
        """Wrap a plain labeled set as one expert that agrees with itself."""
        return cls(base, base.labels[None, :].copy(), np.zeros((len(base), 1), dtype=bool))


@dataclass(frozen=True, eq=False)
class ConflictSet:
    source_indices: np.ndarray  # original positions of the duplicated samples
    pairs: np.ndarray  # (u, 2) output positions: [kept-label copy, contradicting copy]
    class_counts: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.source_indices)


# ------------------------------------------------------------------------ IDX
def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, what: str = "idx") -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{what}: truncated at byte offset {len(raw)}, magic needs 4 bytes")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{what}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(
            f"{what}: truncated at byte offset {len(raw)}, header needs {header_end} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) < header_end + count:
        raise IdxFormatError(
            f"{what}: truncated at byte offset {len(raw)}, expected {header_end + count} bytes "
            f"for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10
             ) -> LabeledImageSet:
    """Read an IDX image file and its label file (plain or ``.gz``)."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise IdxFormatError(
            f"count mismatch at byte offset 4: {len(images)} images in {images_path} "
            f"but {len(labels)} labels in {labels_path}")
    return LabeledImageSet(images.astype(np.float32) / np.float32(255.0),
                           labels.astype(np.int64), split, num_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"IDX writer expects uint8 data, got {array.dtype}")
    magic = 0x00000800 | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    data = header + array.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


# ------------------------------------------------------------ expert labels
def swap_labels(labels: np.ndarray, selected: np.ndarray, a: int, b: int) -> np.ndarray:
    """Exchange classes a and b at the boolean positions ``selected``."""
    out = labels.copy()
    out[selected & (labels == a)] = b
    out[selected & (labels == b)] = a
    return out


def simulate_experts(
    base: LabeledImageSet,
    k: int = 4,
    swap_pair: tuple[int, int] = (2, 5),
    fraction: float = 0.25,
    affected: Sequence[int] = (0, 1, 2),
    seed: int = 0,
) -> MultiExpertDataset:
    """Replicate the ground truth for ``k`` experts and perturb the affected ones.

    For each affected expert independently, every sample of class ``a`` (resp.
    ``b``) is relabelled ``b`` (resp. ``a``) with probability ``fraction``.
    """
    a, b = swap_pair
    if a == b:
        raise ValueError(f"swap classes must differ, got {swap_pair}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    affected = tuple(sorted(set(int(j) for j in affected)))
    if any(j < 0 or j >= k for j in affected):
        raise ValueError(f"affected experts {affected} not within 0..{k - 1}")
    present = set(np.unique(base.labels).tolist())
    missing = [c for c in (a, b) if c not in present]
    if missing:
        raise ValueError(f"swap classes {missing} do not occur in the dataset")
    rng = make_rng(seed)
    experts = np.tile(base.labels, (k, 1))
    for j in range(k):
        draw = rng.random(len(base)) < fraction  # drawn for every expert: stable streams
        if j in affected:
            experts[j] = swap_labels(base.labels, draw, a, b)
    protocol = ExpertProtocol(k, (a, b), float(fraction), affected, int(seed))
    return MultiExpertDataset(base, experts, (experts != base.labels).T, protocol)


def make_conflicts(
    base: LabeledImageSet,
    target_classes: Sequence[int],
    uncertain_indices: Sequence[int],
    negative_label: Mapping[int, int] | None = None,
) -> tuple[LabeledImageSet, ConflictSet]:
    """Duplicate uncertain samples with contradictory labels.

    Each uncertain sample keeps its original label in place (the "positive"
    copy) and a second copy carrying ``negative_label[label]`` is appended in
    index order. By default the target classes contradict each other
    cyclically, so for two classes ``{a, b}`` an uncertain ``a`` is duplicated
    as ``b`` and vice versa.
    """
    targets = sorted(set(int(t) for t in target_classes))
    if not targets:
        raise ValueError("target_classes is empty")
    idx = np.asarray(uncertain_indices, dtype=np.int64).reshape(-1)
    uniq, counts = np.unique(idx, return_counts=True)
    if np.any(counts > 1):
        raise ValueError(
            f"overlapping duplicate requests for indices {uniq[counts > 1].tolist()}")
    if len(idx) and (idx.min() < 0 or idx.max() >= len(base)):
        raise ValueError(f"uncertain indices must lie in [0, {len(base)})")
    if negative_label is None:
        if len(targets) < 2:
            raise ValueError("need two target classes or an explicit negative_label map")
        negative_label = {t: targets[(i + 1) % len(targets)] for i, t in enumerate(targets)}
    idx = np.sort(idx)
    src = base.labels[idx]
    bad = [int(i) for i, y in zip(idx, src) if y not in targets]
    if bad:
        raise ValueError(f"uncertain samples {bad[:5]} are not in target classes {targets}")
    neg = np.array([negative_label[int(y)] for y in src], dtype=np.int64)
    if np.any(neg == src):
        raise ValueError("negative_label maps a class onto itself; duplicates would agree")
    images = np.concatenate([base.images, base.images[idx]])
    labels = np.concatenate([base.labels, neg])
    n = len(base)
    pairs = np.stack([idx, n + np.arange(len(idx))], axis=1)
    counts = {t: int(np.sum(src == t)) for t in targets}
    return (LabeledImageSet(images, labels, base.split, base.num_classes),
            ConflictSet(idx, pairs, counts))


def expert_minibatches(
    ds: MultiExpertDataset, batch: int, rng: np.random.Generator
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """One epoch of shuffled (sample, expert) pairs.

    Yields ``(images, labels, expert_ids, sample_ids)``; every pair in
    ``range(N) x range(k)`` appears exactly once per epoch.
    """
    if batch < 1:
        raise ValueError(f"batch size must be >= 1, got {batch}")
    n, k = len(ds), ds.experts
    order = rng.permutation(n * k)
    for start in range(0, n * k, batch):
        flat = order[start : start + batch]
        samples, experts = flat // k, flat % k
        yield (ds.base.images[samples], ds.expert_labels[experts, samples], experts, samples)


# ------------------------------------------------------------------ container
def dataset_to_bytes(ds: MultiExpertDataset) -> bytes:
    base = ds.base
    n, (h, w), k = len(base), base.image_shape, ds.experts
    meta = {"split": base.split,
            "protocol": ds.protocol.to_dict() if ds.protocol else None}
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    header = CONTAINER_MAGIC + struct.pack("<7I", CONTAINER_VERSION, n, k, h, w,
                                           base.num_classes, len(meta_bytes))
    return b"".join([
        header,
        meta_bytes,
        base.images.astype("<f4").tobytes(),
        base.labels.astype("<i4").tobytes(),
        ds.expert_labels.astype("<i4").tobytes(),
        ds.perturbed_mask.astype(np.uint8).tobytes(),
    ])


def dataset_from_bytes(raw: bytes) -> MultiExpertDataset:
    if raw[:4] != CONTAINER_MAGIC:
        raise ContainerFormatError(f"bad container magic {raw[:4]!r}, expected {CONTAINER_MAGIC!r}")
    if len(raw) < 32:
        raise ContainerFormatError(f"container truncated at byte offset {len(raw)}")
    version, n, k, h, w, c, meta_len = struct.unpack("<7I", raw[4:32])
    if version != CONTAINER_VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    off = 32
    expected = off + meta_len + 4 * n * h * w + 4 * n + 4 * k * n + n * k
    if len(raw) != expected:
        raise ContainerFormatError(f"container has {len(raw)} bytes, header implies {expected}")
    meta = json.loads(raw[off : off + meta_len])
    off += meta_len

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr

    images = take("<f4", n * h * w, (n, h, w)).astype(np.float32)
    labels = take("<i4", n, (n,)).astype(np.int64)
    experts = take("<i4", k * n, (k, n)).astype(np.int64)
    mask = take(np.uint8, n * k, (n, k)).astype(bool)
    protocol = ExpertProtocol.from_dict(meta["protocol"]) if meta["protocol"] else None
    return MultiExpertDataset(LabeledImageSet(images, labels, meta["split"], c), experts, mask,
                              protocol)


def save_dataset(ds: MultiExpertDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> MultiExpertDataset:
    return dataset_from_bytes(Path(path).read_bytes())
