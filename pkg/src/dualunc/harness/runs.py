"""Pipeline steps operating on a self-describing run directory.

Layout of ``cfg.out``::

    config.txt          resolved configuration (every key)
    train.mxd test.mxd  dataset containers (conflicts.mxd when requested)
    checkpoint.ducp     trained parameters
    metrics.csv         per-epoch loss breakdown and held-out accuracy
    record.json         run record: config, metrics, accuracy, artifact hashes
    report_{split}.tsv  per-sample uncertainty reports
    summary.csv/.md     group statistics, one row per (signal, split)
    referral.csv        accuracy-vs-retention curves for LU and EU
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..data import (
    LabeledImageSet,
    MultiExpertDataset,
    load_dataset,
    load_idx,
    make_conflicts,
    save_dataset,
    simulate_experts,
)
from ..model import DualUncertaintyModel, load_checkpoint, save_checkpoint, train
from ..numerics import make_optimizer
from ..numerics.gradcheck import OP_CHECKS, CheckResult, run_checks
from ..numerics.random import substream
from ..uncertainty import changed_groups, decompose, referral_curve, write_report
from .config import ConfigError, ExperimentConfig, dump_config

log = logging.getLogger(__name__)

TRAIN_FILE, TEST_FILE, CONFLICT_FILE = "train.mxd", "test.mxd", "conflicts.mxd"
CHECKPOINT_FILE = "checkpoint.ducp"
SIGNALS, SPLITS = ("EU", "LU"), ("train", "test")


@dataclass
class RunRecord:
    config: dict
    metrics: list[dict]
    final_accuracy: float | None
    checkpoint: str
    wall_clock: float
    artifacts: dict[str, str] = field(default_factory=dict)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    return out


def _limit(ds: LabeledImageSet, n: int) -> LabeledImageSet:
    return ds if n <= 0 or n >= len(ds) else ds.subset(np.arange(n))


def _load_split(cfg: ExperimentConfig, split: str) -> LabeledImageSet:
    images = getattr(cfg, f"{split}_images")
    labels = getattr(cfg, f"{split}_labels")
    if not images or not labels:
        raise ConfigError(f"{split}_images and {split}_labels must be set")
    for p in (images, labels):
        if not Path(p).exists():
            raise ConfigError(f"{split} file not found: {p}")
    ds = load_idx(images, labels, split=split)
    return _limit(ds, cfg.train_limit if split == "train" else cfg.test_limit)


# --------------------------------------------------------------------- prepare
def cmd_prepare(cfg: ExperimentConfig) -> dict[str, Path]:
    """Write the simulated multi-expert train set, the clean test set and optional conflicts."""
    out = _run_dir(cfg)
    train_set = _load_split(cfg, "train")
    test_set = _load_split(cfg, "test")
    experts = simulate_experts(train_set, k=cfg.experts, swap_pair=tuple(cfg.swap_pair),
                               fraction=cfg.fraction, affected=cfg.affected, seed=cfg.seed)
    paths = {"train": out / TRAIN_FILE, "test": out / TEST_FILE}
    save_dataset(experts, paths["train"])
    save_dataset(MultiExpertDataset.single(test_set), paths["test"])
    if cfg.conflict_classes:
        rng = substream(cfg.seed, 7)
        pool = np.flatnonzero(np.isin(train_set.labels, cfg.conflict_classes))
        chosen = np.sort(rng.choice(pool, int(round(cfg.conflict_fraction * len(pool))),
                                    replace=False))
        conflicted, cset = make_conflicts(train_set, cfg.conflict_classes, chosen)
        paths["conflicts"] = out / CONFLICT_FILE
        save_dataset(MultiExpertDataset.single(conflicted), paths["conflicts"])
        log.info("conflicts: %d duplicated samples %s", len(cset), cset.class_counts)
    return paths


def _training_set(cfg: ExperimentConfig, out: Path) -> MultiExpertDataset:
    name = {"experts": TRAIN_FILE, "conflicts": CONFLICT_FILE, "clean": TRAIN_FILE}[cfg.label_source]
    path = out / name
    if not path.exists():
        raise ConfigError(f"{path} missing; run 'prepare' first")
    ds = load_dataset(path)
    if cfg.label_source == "clean":
        ds = MultiExpertDataset.single(ds.base)
    return ds


# ----------------------------------------------------------------------- train
def cmd_train(cfg: ExperimentConfig) -> RunRecord:
    out = _run_dir(cfg)
    ds = _training_set(cfg, out)
    test = load_dataset(out / TEST_FILE).base
    mcfg = cfg.model_config(ds.base.image_shape)
    model = DualUncertaintyModel(mcfg, seed=cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.parameters(), lr=cfg.lr)
    start = time.perf_counter()
    rng = substream(cfg.seed, 1)
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "nll", "weight_penalty", "kl", "total", "accuracy"])

        def on_epoch(rec):
            writer.writerow([rec.epoch, repr(rec.nll), repr(rec.weight_penalty), repr(rec.kl),
                             repr(rec.total), repr(rec.accuracy)])
            fh.flush()
            log.info("epoch %d total=%.4f acc=%.4f (%.1fs)", rec.epoch, rec.total,
                     rec.accuracy, rec.seconds)

        history = train(model, ds, opt, cfg.epochs, rng, batch_size=cfg.batch_size,
                        eval_set=test, beta_warmup=cfg.beta_warmup, callback=on_epoch)
    ckpt = out / CHECKPOINT_FILE
    save_checkpoint(model, ckpt)
    record = RunRecord(
        config=json.loads(json.dumps(asdict(cfg))),
        metrics=[{k: v for k, v in asdict(e).items() if k != "seconds"} for e in history.epochs],
        final_accuracy=history.final_accuracy,
        checkpoint=str(ckpt),
        wall_clock=time.perf_counter() - start,
    )
    record.artifacts = {p.name: _sha256(p) for p in
                        (out / TRAIN_FILE, out / TEST_FILE, ckpt, metrics_path)}
    if (out / CONFLICT_FILE).exists():
        record.artifacts[CONFLICT_FILE] = _sha256(out / CONFLICT_FILE)
    (out / "record.json").write_text(json.dumps(asdict(record), indent=2, sort_keys=True))
    return record


# -------------------------------------------------------------------- evaluate
def cmd_evaluate(cfg: ExperimentConfig, checkpoint=None) -> dict:
    """Per-sample reports, grouped summary table and referral curves for a checkpoint."""
    out = _run_dir(cfg)
    ds = _training_set(cfg, out)
    train_eval = _limit(ds.base, cfg.eval_train_limit)
    test = load_dataset(out / TEST_FILE).base
    model = load_checkpoint(checkpoint or out / CHECKPOINT_FILE,
                            expect=cfg.model_config(ds.base.image_shape))
    groups = changed_groups(cfg.changed_classes(), model.config.num_classes)
    stats, curves, accuracy = {}, {}, {}
    for split, subset in (("train", train_eval), ("test", test)):
        report = decompose(model, subset, T=cfg.T, seed=cfg.seed + (0 if split == "train" else 1))
        write_report(report, out / f"report_{split}.tsv", groups)
        stats[split] = report.group_stats(groups)
        accuracy[split] = float(np.mean(report.predicted_class == subset.labels))
        for sig in SIGNALS:
            curves[(split, sig)] = referral_curve(report, subset.labels, sig)

    rows = []
    for sig in SIGNALS:
        for split in SPLITS:
            u, c = stats[split][(sig, "unchanged")], stats[split][(sig, "changed")]
            rows.append({"signal": sig, "split": split,
                         "unchanged_mean": u["mean"], "unchanged_variance": u["variance"],
                         "changed_mean": c["mean"], "changed_variance": c["variance"],
                         "ratio": c["mean"] / u["mean"] if u["mean"] > 0 else float("inf")})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    (out / "summary.md").write_text(_summary_markdown(rows, cfg))
    with open(out / "referral.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "signal", "retained", "accuracy"])
        for (split, sig), curve in curves.items():
            for frac, acc in curve:
                w.writerow([split, sig, frac, repr(acc)])
    result = {"summary": rows, "accuracy_lu_mean": accuracy,
              "referral": {f"{s}/{g}": c for (s, g), c in curves.items()}}
    (out / "evaluation.json").write_text(json.dumps(result, indent=2))
    return result


def _summary_markdown(rows: list[dict], cfg: ExperimentConfig) -> str:
    cell = {(r["signal"], r["split"]): r for r in rows}
    lines = [
        f"Uncertainty summary: method={cfg.method}, seed={cfg.seed}, T={cfg.T}, "
        f"changed classes={list(cfg.changed_classes())}",
        "",
        "mean (variance) of the per-sample aggregate",
        "",
        "| | train unchanged | train changed | test unchanged | test changed |",
        "|---|---|---|---|---|",
    ]
    for sig in SIGNALS:
        parts = []
        for split in SPLITS:
            r = cell[(sig, split)]
            parts.append(f"{r['unchanged_mean']:.4f} ({r['unchanged_variance']:.4f})")
            parts.append(f"{r['changed_mean']:.4f} ({r['changed_variance']:.4f})")
        lines.append(f"| {sig} | " + " | ".join(parts) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------- report
def _run_row(run: Path) -> dict:
    record = json.loads((run / "record.json").read_text())
    with open(run / "summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    row = {"run": str(run), "method": record["config"]["method"],
           "seed": record["config"]["seed"], "accuracy": record["final_accuracy"]}
    for r in summary:
        for g in ("unchanged", "changed"):
            row[f"{r['signal']}_{r['split']}_{g}"] = float(r[f"{g}_mean"])
    return row


def cmd_report(run_dirs: Sequence, out) -> dict:
    """Cross-run comparison (markdown + CSV); runs with missing artifacts are skipped."""
    rows, warnings = [], []
    for run in map(Path, run_dirs):
        missing = [f for f in ("record.json", "summary.csv") if not (run / f).exists()]
        if missing:
            warnings.append(f"skipped {run}: missing {', '.join(missing)}")
            continue
        rows.append(_run_row(run))
    if not rows:
        raise ConfigError("no completed runs to report: " + "; ".join(warnings))
    metric_keys = ["accuracy"] + [f"{s}_{sp}_{g}" for s in SIGNALS for sp in SPLITS
                                  for g in ("unchanged", "changed")]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    aggregates = []
    for method in sorted({r["method"] for r in rows}):
        group = [r for r in rows if r["method"] == method]
        agg = {"run": f"{method} mean", "method": method, "seed": "all"}
        agg_sd = {"run": f"{method} sd", "method": method, "seed": "all"}
        for k in metric_keys:
            vals = np.array([r[k] for r in group], dtype=float)
            agg[k] = float(vals.mean())
            agg_sd[k] = float(vals.std(ddof=1)) if len(vals) > 1 else None
        aggregates.append((agg, agg_sd, len(group)))
    with_sd = any(n > 1 for _, _, n in aggregates)
    header = ["run", "method", "seed"] + metric_keys
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r.get(k) for k in header])
        for agg, sd, n in aggregates:
            w.writerow([agg.get(k) for k in header])
            if n > 1:
                w.writerow([sd.get(k) for k in header])
    lines = ["# Run comparison", "", "| run | method | seed | " + " | ".join(metric_keys) + " |",
             "|" + "---|" * (len(metric_keys) + 3)]
    for r in rows:
        lines.append(f"| {r['run']} | {r['method']} | {r['seed']} | "
                     + " | ".join(_fmt(r[k]) for k in metric_keys) + " |")
    for agg, sd, n in aggregates:
        cells = [(_fmt(agg[k]) + (f" ± {_fmt(sd[k])}" if n > 1 else "")) for k in metric_keys]
        lines.append(f"| {agg['method']} mean{'±sd' if n > 1 else ''} ({n} runs) | "
                     f"{agg['method']} | all | " + " | ".join(cells) + " |")
    if warnings:
        lines += ["", "Warnings:"] + [f"- {w}" for w in warnings]
    (out / "comparison.md").write_text("\n".join(lines) + "\n")
    return {"rows": rows, "aggregates": [a for a, _, _ in aggregates], "warnings": warnings,
            "has_sd": with_sd}


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.4f}"


# ------------------------------------------------------------------- gradcheck
def _corrupted_relu(rng):
    """Sentinel check whose gradient is deliberately doubled."""
    from ..numerics import ops
    from ..numerics.tensor import make_node

    def bad_relu(a):
        pos = a.data > 0
        return make_node(a.data * pos, (a,), lambda g: (2.0 * g * pos,))

    w = rng.standard_normal((3, 4))
    x = rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    from ..numerics import Tensor
    return (lambda a: ops.sum(ops.mul(bad_relu(a), Tensor(w)))), [x]


def default_gradchecks() -> dict:
    from ..model import loss_gradchecks
    return {**OP_CHECKS, **loss_gradchecks()}


def cmd_gradcheck(registry: dict | None = None, corrupt: bool = False, seed: int = 0
                  ) -> list[CheckResult]:
    registry = dict(default_gradchecks() if registry is None else registry)
    if corrupt:
        registry["corrupted_relu_sentinel"] = _corrupted_relu
    return run_checks(registry, seed=seed)
