"""Monte-Carlo decomposition into labels and epistemic uncertainty.

* ``LU``: dropout off (the deterministic expectation network), ``z`` drawn
  ``T`` times from the prior encoder's Gaussian.
* ``EU``: ``z`` fixed at the prior mean, ``T`` dropout masks.

For each mode the predictive mean is the average of the ``T`` softmax outputs
and the predictive variance is the per-class population second moment minus
the squared mean, taken over the same passes. Scalar aggregates average the
per-class variances.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import LabeledImageSet
from .model import DiagonalGaussian, DualUncertaintyModel, sample_latent
from .numerics import Tensor, no_grad, ops
from .numerics.ops import dropout_mask
from .numerics.random import substream

MODES = ("LU", "EU")
VARIANCE_FLOOR = -1e-9
DECILES = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)
REPORT_HEADER = "# dual-uncertainty report v1"

_LATENT_STREAM, _DROPOUT_STREAM = 0, 1


def _check_mode(mode: str, T: int) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if T < 1:
        raise ValueError(f"need at least one pass, got T={T}")


def draw_noise(model: DualUncertaintyModel, mode: str, T: int, batch: int,
               rng: np.random.Generator) -> np.ndarray:
    """Noise for ``T`` passes over a batch: latent eps (LU) or dropout masks (EU)."""
    cfg = model.config
    if mode == "LU":
        return rng.standard_normal((T, batch, max(cfg.latent_dim, 1))).astype(np.float32)
    return dropout_mask((T, batch, cfg.hidden), cfg.dropout, rng)


def mc_outputs(model: DualUncertaintyModel, x, mode: str, noise: np.ndarray) -> np.ndarray:
    """Softmax outputs of ``T`` stochastic passes, shape (T, B, c).

    ``noise`` comes from :func:`draw_noise` (possibly assembled per sample).
    The trunk is evaluated once; only the stochastic tail is repeated.
    """
    T, batch = noise.shape[:2]
    _check_mode(mode, T)
    cfg = model.config
    with no_grad():
        h = model.features(x)
        if h.shape[0] != batch:
            raise ValueError(f"noise is for {batch} samples but x holds {h.shape[0]}")
        hidden = h.shape[1]
        if cfg.fusion == "latent":
            prior = model.encode_prior(x)
        h_rep = Tensor(np.broadcast_to(h.data, (T, batch, hidden)).reshape(T * batch, hidden))
        if mode == "LU":
            if cfg.fusion == "latent":
                mu = np.broadcast_to(prior.mu.data, (T, batch, cfg.latent_dim))
                lv = np.broadcast_to(prior.log_var.data, (T, batch, cfg.latent_dim))
                g = DiagonalGaussian(Tensor(mu.reshape(T * batch, -1)), Tensor(lv.reshape(T * batch, -1)))
                z = sample_latent(g, eps=noise.reshape(T * batch, -1)[:, : cfg.latent_dim])
            elif cfg.fusion == "constant":
                z = model.constant_latent(T * batch)
            else:
                z = None
            probs = model.head(h_rep, z)
        else:
            masked = ops.dropout(h_rep, cfg.dropout, mode="sample",
                                 mask=noise.reshape(T * batch, hidden))
            if cfg.fusion == "latent":
                z = Tensor(np.broadcast_to(prior.mu.data, (T, batch, cfg.latent_dim))
                           .reshape(T * batch, -1))
            elif cfg.fusion == "constant":
                z = model.constant_latent(T * batch)
            else:
                z = None
            probs = model.head(masked, z)
    return probs.data.reshape(T, batch, -1)


def pass_moments(outputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance over axis 0 of stored passes.

    The variance is ``E[f^2] - E[f]^2`` evaluated on outputs shifted by the
    first pass (the identity is shift-invariant), so identical passes give
    exactly zero. Values above the -1e-9 floor but below zero are clamped.
    """
    f = np.asarray(outputs, dtype=np.float64)
    mean = f.mean(axis=0)
    shifted = f - f[0]
    var = (shifted * shifted).mean(axis=0) - shifted.mean(axis=0) ** 2
    if np.any(var < VARIANCE_FLOOR):
        raise FloatingPointError(f"variance below numerical floor: {var.min()}")
    return mean, np.maximum(var, 0.0)


def predictive_moments(model, x, mode: str, T: int, rng: np.random.Generator):
    _check_mode(mode, T)
    noise = draw_noise(model, mode, T, len(x), rng)
    return pass_moments(mc_outputs(model, x, mode, noise))


def predictive_mean(model, x, mode: str, T: int, rng: np.random.Generator) -> np.ndarray:
    return predictive_moments(model, x, mode, T, rng)[0]


def predictive_variance(model, x, mode: str, T: int, rng: np.random.Generator) -> np.ndarray:
    return predictive_moments(model, x, mode, T, rng)[1]


# ---------------------------------------------------------------------- report
@dataclass(eq=False)
class UncertaintyReport:
    ids: np.ndarray
    truth: np.ndarray
    predictive_mean: np.ndarray  # LU mean: annotators marginalised at fixed weights
    eu_mean: np.ndarray
    lu_variance: np.ndarray  # (N, c)
    eu_variance: np.ndarray  # (N, c)

    @property
    def predicted_class(self) -> np.ndarray:
        return self.predictive_mean.argmax(axis=1)

    @property
    def lu(self) -> np.ndarray:
        return self.lu_variance.mean(axis=1)

    @property
    def eu(self) -> np.ndarray:
        return self.eu_variance.mean(axis=1)

    def signal(self, name: str) -> np.ndarray:
        if name not in MODES:
            raise ValueError(f"signal must be one of {MODES}, got {name!r}")
        return self.lu if name == "LU" else self.eu

    def __len__(self) -> int:
        return len(self.ids)

    def group_stats(self, groups: Mapping[str, Iterable[int]]) -> dict[tuple[str, str], dict]:
        """Mean and variance of each signal's aggregate over samples whose true class is in a group."""
        out = {}
        for sig in MODES:
            values = self.signal(sig)
            for gname, classes in groups.items():
                sel = np.isin(self.truth, list(classes))
                v = values[sel]
                out[(sig, gname)] = {
                    "n": int(sel.sum()),
                    "mean": float(v.mean()) if len(v) else float("nan"),
                    "variance": float(v.var()) if len(v) else float("nan"),
                }
        return out


def changed_groups(changed: Sequence[int], num_classes: int = 10) -> dict[str, list[int]]:
    changed = sorted(set(int(c) for c in changed))
    return {"unchanged": [c for c in range(num_classes) if c not in changed],
            "changed": changed}


def decompose(
    model: DualUncertaintyModel,
    ds: LabeledImageSet,
    T: int = 20,
    seed: int = 0,
    *,
    latent_seed: int | None = None,
    dropout_seed: int | None = None,
    ids: np.ndarray | None = None,
    batch_size: int = 250,
) -> UncertaintyReport:
    """LU and EU for every sample.

    Each sample ``i`` draws its latent noise from substream ``(latent_seed, i)``
    and its dropout masks from ``(dropout_seed, i)``, so reports do not depend
    on batch size or evaluation order.
    """
    if len(ds) == 0:
        raise ValueError("cannot decompose an empty evaluation set")
    _check_mode("LU", T)
    latent_seed = seed if latent_seed is None else latent_seed
    dropout_seed = seed if dropout_seed is None else dropout_seed
    ids = np.arange(len(ds)) if ids is None else np.asarray(ids)
    cfg = model.config
    lu_mean, lu_var, eu_mean, eu_var = [], [], [], []
    for s in range(0, len(ds), batch_size):
        xb = ds.images[s : s + batch_size]
        bid = ids[s : s + batch_size]
        eps = np.stack([
            substream(latent_seed, int(i), _LATENT_STREAM)
            .standard_normal((T, max(cfg.latent_dim, 1))).astype(np.float32)
            for i in bid], axis=1)
        masks = np.stack([
            dropout_mask((T, cfg.hidden), cfg.dropout, substream(dropout_seed, int(i), _DROPOUT_STREAM))
            for i in bid], axis=1)
        m, v = pass_moments(mc_outputs(model, xb, "LU", eps))
        lu_mean.append(m)
        lu_var.append(v)
        m, v = pass_moments(mc_outputs(model, xb, "EU", masks))
        eu_mean.append(m)
        eu_var.append(v)
    return UncertaintyReport(ids, ds.labels.copy(), np.concatenate(lu_mean),
                             np.concatenate(eu_mean), np.concatenate(lu_var),
                             np.concatenate(eu_var))


def referral_curve(report: UncertaintyReport, truth, signal: str,
                   fractions: Sequence[float] = DECILES) -> list[tuple[float, float]]:
    """Accuracy on the retained samples after referring the most uncertain ones.

    Samples are ordered by descending uncertainty; the top ``1 - f`` are
    referred. Samples tied with the last retained value are counted
    fractionally, i.e. as the expected accuracy under a uniformly random
    tie-break, so a constant signal yields the overall accuracy at every point.
    """
    truth = np.asarray(truth)
    if len(truth) != len(report):
        raise ValueError(f"report has {len(report)} samples but truth has {len(truth)}")
    u = report.signal(signal)
    correct = (report.predicted_class == truth).astype(np.float64)
    order = np.argsort(u, kind="stable")  # ascending: most certain first
    u_sorted, c_sorted = u[order], correct[order]
    n = len(u)
    curve = []
    for f in fractions:
        keep = int(round(f * n))
        if keep == 0:
            curve.append((float(f), float("nan")))
            continue
        threshold = u_sorted[keep - 1]
        below = u_sorted < threshold
        tied = u_sorted == threshold
        n_below = int(below.sum())
        tie_share = (keep - n_below) / tied.sum()
        hits = c_sorted[below].sum() + tie_share * c_sorted[tied].sum()
        curve.append((float(f), float(hits / keep)))
    return curve


# --------------------------------------------------------------- serialization
def write_report(report: UncertaintyReport, path, groups: Mapping[str, Iterable[int]] | None = None
                 ) -> None:
    """Tab-separated per-sample rows followed by a ``# summary`` block."""
    c = report.lu_variance.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(REPORT_HEADER + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "truth", "pred", "lu", "eu"] + [f"lu_{k}" for k in range(c)]
                   + [f"eu_{k}" for k in range(c)])
        for i in range(len(report)):
            w.writerow([int(report.ids[i]), int(report.truth[i]), int(report.predicted_class[i]),
                        repr(float(report.lu[i])), repr(float(report.eu[i]))]
                       + [repr(float(v)) for v in report.lu_variance[i]]
                       + [repr(float(v)) for v in report.eu_variance[i]])
        if groups:
            fh.write("# summary\n")
            w.writerow(["signal", "group", "n", "mean", "variance"])
            for (sig, g), st in report.group_stats(groups).items():
                w.writerow([sig, g, st["n"], repr(st["mean"]), repr(st["variance"])])


def read_report(path) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Parse :func:`write_report` output into column arrays and summary rows."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise ValueError(f"{path}: not an uncertainty report")
    body = lines[1:]
    cut = body.index("# summary") if "# summary" in body else len(body)
    rows = list(csv.reader(body[:cut], delimiter="\t"))
    header, data = rows[0], rows[1:]
    cols = {name: np.array([float(r[j]) for r in data]) for j, name in enumerate(header)}
    summary = []
    if cut < len(body):
        srows = list(csv.DictReader(body[cut + 1 :], delimiter="\t"))
        for r in srows:
            summary.append({"signal": r["signal"], "group": r["group"], "n": int(r["n"]),
                            "mean": float(r["mean"]), "variance": float(r["variance"])})
    return cols, summary
