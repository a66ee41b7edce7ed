"""Dropout classifier fused with a conditional Gaussian annotator latent.

The classifier is a LeNet-style trunk (two conv/pool blocks and one hidden
fully-connected layer with dropout). An annotator code ``z`` is tiled over the
spatial extent of the last feature vector, concatenated on the channel axis
and passed through the output layer and softmax. Two encoders produce
diagonal Gaussians over ``z``: the prior sees the image only, the posterior
sees the image and a one-hot label. Training draws ``z`` from the posterior,
inference from the prior.

Training objective per minibatch::

    total = nll + (1 - d) / (2 N) * ||theta||^2 + beta * KL

where ``theta`` is the classifier weights (biases and encoders excluded) and
``N`` the minibatch size unless ``penalty_n`` fixes it.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .data import LabeledImageSet, MultiExpertDataset, expert_minibatches
from .numerics import Tensor, no_grad, ops, parameter
from .numerics.optim import Optimizer

KL_DIRECTIONS = ("prior_posterior", "posterior_prior")
FUSION_MODES = ("latent", "constant", "none")
LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"DUCP"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, breakdown: "LossBreakdown"):
        super().__init__(f"non-finite loss at step {step}: {breakdown.as_dict()}")
        self.step = step


class ArchitectureMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 10
    image_size: tuple[int, int] = (28, 28)
    conv_channels: tuple[int, int] = (8, 16)
    hidden: int = 128
    encoder_channels: tuple[int, int] = (4, 8)
    encoder_hidden: int = 64
    latent_dim: int = 6
    fusion_hidden: int = 0
    beta: float = 1.0
    dropout: float = 0.5
    kl_direction: str = "prior_posterior"
    fusion: str = "latent"
    penalty_n: int = 0  # 0: use the minibatch size

    def __post_init__(self):
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must satisfy 0 <= d < 1, got {self.dropout}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.fusion != "none" and self.latent_dim < 1:
            raise ValueError("latent fusion needs latent_dim >= 1")
        h, w = self.image_size
        for side in (h, w):
            if side % 2 or (side // 2 - 4) < 2 or (side // 2 - 4) % 2:
                raise ValueError(f"image side {side} does not fit the conv/pool trunk")

    @property
    def trunk_out(self) -> tuple[int, int]:
        h, w = self.image_size
        return (h // 2 - 4) // 2, (w // 2 - 4) // 2

    @property
    def fused_latent_dim(self) -> int:
        return 0 if self.fusion == "none" else self.latent_dim

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class DiagonalGaussian:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.mu.data)) and np.all(np.isfinite(self.log_var.data)))


@dataclass
class LossBreakdown:
    nll: Tensor
    weight_penalty: Tensor
    kl: Tensor
    total: Tensor
    beta: float

    def as_dict(self) -> dict[str, float]:
        return {"nll": self.nll.item(), "weight_penalty": self.weight_penalty.item(),
                "kl": self.kl.item(), "total": self.total.item()}


# --------------------------------------------------------------- free functions
def sample_latent(g: DiagonalGaussian, rng: np.random.Generator | None = None,
                  eps: np.ndarray | None = None) -> Tensor:
    """Reparameterized draw ``mu + exp(log_var / 2) * eps``."""
    if eps is None:
        eps = rng.standard_normal(g.mu.shape)
    eps = Tensor(np.asarray(eps, dtype=g.mu.dtype))
    log_var = ops.clip(g.log_var, LOGVAR_MIN, LOGVAR_MAX)
    return g.mu + ops.exp(log_var * 0.5) * eps


def kl_diag_gaussians(p: DiagonalGaussian, q: DiagonalGaussian) -> Tensor:
    """KL(p || q) in closed form, summed over latent dims, averaged over the batch."""
    if p.mu.shape != q.mu.shape:
        raise ValueError(f"KL between Gaussians of shapes {p.mu.shape} and {q.mu.shape}")
    var_ratio = ops.exp(p.log_var - q.log_var)
    diff = p.mu - q.mu
    per_dim = (q.log_var - p.log_var + var_ratio + diff * diff * ops.exp(-q.log_var) - 1.0) * 0.5
    return ops.mean(ops.sum(per_dim, axis=-1))


def nll_from_probs(probs: Tensor, labels: np.ndarray) -> Tensor:
    onehot = ops.one_hot(labels, probs.shape[1], dtype=probs.dtype)
    logp = ops.log(ops.clip(probs, PROB_FLOOR, None))
    return -ops.mean(ops.sum(logp * onehot, axis=1))


# ------------------------------------------------------------------------ model
class DualUncertaintyModel:
    """Classifier parameters plus prior/posterior encoder parameters.

    Parameter names are prefixed ``cls.``, ``prior.`` and ``post.``; weights end
    in ``.w`` and biases in ``.b``.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # ---------------------------------------------------------------- params
    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = parameter(data, name=name)

    def _conv(self, rng, name, cin, cout, k=5):
        std = np.sqrt(2.0 / (cin * k * k))
        self._add(f"{name}.w", rng.standard_normal((cout, cin, k, k)) * std)
        self._add(f"{name}.b", np.zeros(cout))

    def _fc(self, rng, name, fan_in, fan_out, gain=2.0, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else \
            rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(fan_out))

    def _fused_fc(self, rng, name, fan_out, gain):
        cfg = self.config
        w = rng.standard_normal((cfg.hidden, fan_out)) * np.sqrt(gain / cfg.hidden)
        w = np.concatenate([w, np.zeros((cfg.fused_latent_dim, fan_out))])
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(fan_out))

    def _init_params(self, rng) -> None:
        cfg = self.config
        c1, c2 = cfg.conv_channels
        th, tw = cfg.trunk_out
        self._conv(rng, "cls.conv1", 1, c1)
        self._conv(rng, "cls.conv2", c1, c2)
        self._fc(rng, "cls.fc1", c2 * th * tw, cfg.hidden)
        # the layer reading the fused vector starts with zero rows for z, so its
        # feature rows are drawn exactly as in a plain classifier of the same seed
        if cfg.fusion_hidden:
            self._fused_fc(rng, "cls.fuse", cfg.fusion_hidden, gain=2.0)
            self._fc(rng, "cls.out", cfg.fusion_hidden, cfg.num_classes, gain=1.0)
        else:
            self._fused_fc(rng, "cls.out", cfg.num_classes, gain=1.0)
        if cfg.fusion == "latent":
            e1, e2 = cfg.encoder_channels
            for enc, extra in (("prior", 0), ("post", cfg.num_classes)):
                self._conv(rng, f"{enc}.conv1", 1, e1)
                self._conv(rng, f"{enc}.conv2", e1, e2)
                self._fc(rng, f"{enc}.fc", e2 * th * tw + extra, cfg.encoder_hidden)
                self._fc(rng, f"{enc}.mu", cfg.encoder_hidden, cfg.latent_dim, zero=True)
                self._fc(rng, f"{enc}.logvar", cfg.encoder_hidden, cfg.latent_dim, zero=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def classifier_weights(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith("cls.") and n.endswith(".w")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # --------------------------------------------------------------- forward
    def _as_input(self, x) -> Tensor:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        h, w = self.config.image_size
        if arr.ndim != 3 or arr.shape[1:] != (h, w):
            raise ValueError(f"expected images of shape (B, {h}, {w}), got {arr.shape}")
        dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32
        return Tensor(arr.reshape(arr.shape[0], 1, h, w).astype(dtype, copy=False))

    def _trunk(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        out = ops.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], padding="same")
        out = ops.maxpool2x2(ops.relu(out))
        out = ops.conv2d(out, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], padding="valid")
        out = ops.maxpool2x2(ops.relu(out))
        return ops.flatten(out)

    def _dense(self, name: str, x: Tensor) -> Tensor:
        return ops.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _require_latent(self, what: str) -> None:
        if self.config.fusion != "latent":
            raise ValueError(f"{what} needs fusion='latent', model has fusion={self.config.fusion!r}")

    def encode_prior(self, x) -> DiagonalGaussian:
        self._require_latent("encode_prior")
        hidden = ops.relu(self._dense("prior.fc", self._trunk("prior", self._as_input(x))))
        return DiagonalGaussian(self._dense("prior.mu", hidden), self._dense("prior.logvar", hidden))

    def encode_posterior(self, x, y_onehot) -> DiagonalGaussian:
        self._require_latent("encode_posterior")
        xt = self._as_input(x)
        y = np.asarray(y_onehot.data if isinstance(y_onehot, Tensor) else y_onehot)
        if y.shape != (xt.shape[0], self.config.num_classes):
            raise ValueError(f"expected one-hot labels of shape ({xt.shape[0]}, "
                             f"{self.config.num_classes}), got {y.shape}")
        feats = ops.concat([self._trunk("post", xt), Tensor(y.astype(xt.dtype))], axis=1)
        hidden = ops.relu(self._dense("post.fc", feats))
        return DiagonalGaussian(self._dense("post.mu", hidden), self._dense("post.logvar", hidden))

    def features(self, x) -> Tensor:
        """Last hidden feature vector of the classifier before dropout."""
        return ops.relu(self._dense("cls.fc1", self._trunk("cls", self._as_input(x))))

    def head(self, h: Tensor, z: Tensor | None) -> Tensor:
        """Fuse ``z`` into the (already dropped-out) features and return probabilities."""
        cfg = self.config
        if cfg.fused_latent_dim:
            if z is None or z.shape != (h.shape[0], cfg.latent_dim):
                got = None if z is None else z.shape
                raise ValueError(f"latent batch must be ({h.shape[0]}, {cfg.latent_dim}), got {got}")
            fmap = ops.reshape(h, (h.shape[0], h.shape[1], 1, 1))
            fused = ops.concat([fmap, ops.tile_spatial(z, 1, 1)], axis=1)
            h = ops.reshape(fused, (h.shape[0], -1))
        if cfg.fusion_hidden:
            h = ops.relu(self._dense("cls.fuse", h))
        return ops.softmax(self._dense("cls.out", h))

    def constant_latent(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.config.latent_dim), dtype=np.float32))

    def classify(self, x, z: Tensor | None, dropout_mode: str = "off",
                 rng: np.random.Generator | None = None, mask: np.ndarray | None = None) -> Tensor:
        """Class probabilities for images ``x`` under annotator codes ``z``."""
        h = self.features(x)
        h = ops.dropout(h, self.config.dropout, rng=rng, mode=dropout_mode, mask=mask)
        if self.config.fusion == "constant":
            z = self.constant_latent(h.shape[0])
        return self.head(h, z)

    # ------------------------------------------------------------------ loss
    def training_loss(self, x, labels, rng: np.random.Generator,
                      beta: float | None = None) -> LossBreakdown:
        cfg = self.config
        labels = np.asarray(labels)
        beta = cfg.beta if beta is None else beta
        batch = len(labels)
        onehot = ops.one_hot(labels, cfg.num_classes)
        if cfg.fusion == "latent":
            posterior = self.encode_posterior(x, onehot)
            prior = self.encode_prior(x)
            z = sample_latent(posterior, rng)
            if cfg.kl_direction == "prior_posterior":
                kl = kl_diag_gaussians(prior, posterior)
            else:
                kl = kl_diag_gaussians(posterior, prior)
        else:
            z = None
            kl = Tensor(np.zeros((), dtype=np.float32))
        probs = self.classify(x, z, dropout_mode="train", rng=rng)
        nll = nll_from_probs(probs, labels)
        n = cfg.penalty_n or batch
        sq = ops.sum(ops.concat([ops.reshape(w * w, (-1,)) for w in self.classifier_weights()],
                                axis=0))
        penalty = sq * ((1.0 - cfg.dropout) / (2.0 * n))
        total = nll + penalty + kl * beta
        return LossBreakdown(nll, penalty, kl, total, beta)

    # ------------------------------------------------------------- inference
    def point_probs(self, x, batch_size: int = 500) -> np.ndarray:
        """Dropout off, ``z`` at the prior mean (or the constant code)."""
        out = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                xb = x[s : s + batch_size]
                z = self.encode_prior(xb).mu if self.config.fusion == "latent" else None
                out.append(self.classify(xb, z, dropout_mode="off").data)
        return np.concatenate(out)

    def predict(self, x, batch_size: int = 500) -> np.ndarray:
        return self.point_probs(x, batch_size).argmax(axis=1)

    def accuracy(self, ds: LabeledImageSet) -> float:
        return float(np.mean(self.predict(ds.images) == ds.labels))


# ----------------------------------------------------------------------- train
@dataclass
class EpochRecord:
    epoch: int
    nll: float
    weight_penalty: float
    kl: float
    total: float
    accuracy: float | None
    seconds: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float | None:
        return self.epochs[-1].accuracy if self.epochs else None


def train(
    model: DualUncertaintyModel,
    ds: MultiExpertDataset,
    opt: Optimizer,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 64,
    eval_set: LabeledImageSet | None = None,
    beta_warmup: bool = False,
    callback: Callable[[EpochRecord], None] | None = None,
) -> TrainingLog:
    """Minibatch training over every (sample, expert) pair each epoch.

    With ``beta_warmup`` the KL weight ramps linearly from 0 to ``beta`` over
    the first epoch. Raises :class:`NonFiniteLossError` naming the step.
    """
    if len(ds.base) == 0:
        raise ValueError("cannot train on an empty dataset")
    if ds.base.image_shape != tuple(model.config.image_size):
        raise ValueError(f"dataset images {ds.base.image_shape} do not match model input "
                         f"{tuple(model.config.image_size)}")
    log = TrainingLog()
    steps_per_epoch = -(-len(ds) * ds.experts // batch_size)
    step = 0
    for epoch in range(epochs):
        start = time.perf_counter()
        sums = np.zeros(4)
        count = 0
        for images, labels, _, _ in expert_minibatches(ds, batch_size, rng):
            beta = model.config.beta
            if beta_warmup:
                beta *= min(1.0, step / steps_per_epoch)
            model.zero_grad()
            lb = model.training_loss(images, labels, rng, beta=beta)
            if not np.isfinite(lb.total.item()):
                raise NonFiniteLossError(step, lb)
            lb.total.backward()
            opt.step()
            vals = lb.as_dict()
            log.step_losses.append(vals["total"])
            sums += len(labels) * np.array([vals["nll"], vals["weight_penalty"], vals["kl"],
                                            vals["total"]])
            count += len(labels)
            step += 1
        acc = model.accuracy(eval_set) if eval_set is not None else None
        means = sums / count
        rec = EpochRecord(epoch, *map(float, means), accuracy=acc,
                          seconds=time.perf_counter() - start)
        log.epochs.append(rec)
        if callback:
            callback(rec)
    return log


# ------------------------------------------------------------------ checkpoint
def save_checkpoint(model: DualUncertaintyModel, path) -> None:
    """Versioned container: magic, version, JSON config, named float32 arrays."""
    meta = json.dumps({"config": model.config.to_dict()}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta,
              struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape))
        chunks.append(p.data.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expect: ModelConfig | None = None) -> DualUncertaintyModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, meta_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    config = ModelConfig.from_dict(json.loads(raw[off : off + meta_len])["config"])
    if expect is not None and expect != config:
        diffs = {k: (v, getattr(config, k)) for k, v in asdict(expect).items()
                 if getattr(config, k) != v}
        raise ArchitectureMismatchError(f"checkpoint architecture differs (expected, found): {diffs}")
    off += meta_len
    (count,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    model = DualUncertaintyModel(config)
    for _ in range(count):
        (nlen,) = struct.unpack("<H", raw[off : off + 2])
        name = raw[off + 2 : off + 2 + nlen].decode()
        off += 2 + nlen
        ndim = raw[off]
        shape = struct.unpack(f"<{ndim}I", raw[off + 1 : off + 1 + 4 * ndim])
        off += 1 + 4 * ndim
        size = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        if name not in model.params or model.params[name].shape != shape:
            raise ArchitectureMismatchError(f"{path}: unexpected parameter {name} {shape}")
        model.params[name].data = data.astype(np.float32)
    return model


# ------------------------------------------------------------- gradient checks
def loss_gradchecks(seed: int = 0) -> dict:
    """Finite-difference checks of the full training loss w.r.t. every parameter tensor.

    Small float64 models (12x12 images) are used; each check perturbs one
    parameter tensor while the rest stay fixed.
    """
    checks = {}
    for direction in KL_DIRECTIONS:
        cfg = ModelConfig(num_classes=3, image_size=(12, 12), conv_channels=(2, 2), hidden=4,
                          encoder_channels=(2, 2), encoder_hidden=3, latent_dim=2,
                          fusion_hidden=3, kl_direction=direction)
        probe = DualUncertaintyModel(cfg, seed=seed)
        for name in probe.params:
            checks[f"loss[{direction}]:{name}"] = _loss_check_builder(cfg, name)
    return checks


def _loss_check_builder(cfg: ModelConfig, target: str):
    def build(rng):
        model = DualUncertaintyModel(cfg, seed=int(rng.integers(1 << 30)))
        for n, p in model.params.items():
            # non-zero heads so encoder gradients are exercised away from init
            # small log-variance heads keep exp(-log_var) and hence the loss O(1)
            scale = 0.02 if ".logvar." in n else 0.3
            p.data = (p.data + rng.standard_normal(p.shape) * scale).astype(np.float64)
        x = rng.uniform(0, 1, (3, *cfg.image_size))
        labels = rng.integers(0, cfg.num_classes, 3)
        seed = int(rng.integers(1 << 30))

        def fn(w: Tensor) -> Tensor:
            saved = model.params[target]
            model.params[target] = w
            try:
                return model.training_loss(x, labels, np.random.default_rng(seed)).total
            finally:
                model.params[target] = saved

        return fn, [model.params[target].data.copy()]

    return build
