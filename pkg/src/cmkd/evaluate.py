"""Metrics, cross-validation and robustness sweeps."""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import features
from .features import MULTI_LABEL, SINGLE_LABEL

log = logging.getLogger(__name__)

CONTAMINATIONS = ("freq_mask", "time_mask", "time_shift", "noise")


@dataclass
class EvalReport:
    metric_name: str
    value: float
    per_class: list[float]
    n_samples: int
    contamination: tuple | None = None
    dropped_classes: list[int] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Scores are ranked descending with ties kept in input order.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = np.asarray(labels)[order] > 0
    if not hits.any():
        raise ValueError("average precision is undefined without positives")
    ranks = np.flatnonzero(hits) + 1
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(np.arange(1, len(ranks) + 1) / ranks) / len(ranks)


def mean_average_precision(scores, labels) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-D shapes")
    positives = (labels > 0).sum(0)
    if not positives.any():
        raise ValueError("label matrix has no positives")
    dropped = [int(c) for c in np.flatnonzero(positives == 0)]
    if dropped:
        log.warning("dropping %d classes without positives from mAP: %s", len(dropped), dropped)
    per_class = [average_precision(scores[:, c], labels[:, c]) if positives[c] else float("nan")
                 for c in range(labels.shape[1])]
    kept = [ap for ap in per_class if not math.isnan(ap)]
    value = math.fsum(kept) / len(kept)
    return EvalReport("mAP", value, per_class, len(scores), dropped_classes=dropped)


def accuracy(preds, labels, num_classes: int | None = None) -> EvalReport:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    correct = preds == labels
    C = int(max(preds.max(initial=0), labels.max(initial=0)) + 1) if num_classes is None else num_classes
    per_class = [float(correct[labels == c].mean()) if (labels == c).any() else float("nan")
                 for c in range(C)]
    return EvalReport("accuracy", float(correct.mean()), per_class, len(labels))


# ------------------------------------------------------------ inference

def predict(model, specs: np.ndarray, task: str, batch_size: int = 128,
            policy: str = "average") -> np.ndarray:
    """Post-activation predictions ``(n, C)`` in eval mode."""
    from .distill import activation, inference_logits

    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(specs), batch_size):
            x = torch.as_tensor(specs[start:start + batch_size], dtype=torch.float32)
            logits = inference_logits(model(x), policy, task)
            out.append(activation(logits, task).numpy())
    return np.concatenate(out)


def score(preds: np.ndarray, labels: np.ndarray, task: str) -> EvalReport:
    if task == MULTI_LABEL:
        return mean_average_precision(preds, labels)
    return accuracy(preds.argmax(1), labels.argmax(1), labels.shape[1])


def evaluate_model(model, data, batch_size: int = 128, policy: str = "average") -> EvalReport:
    return score(predict(model, data.specs, data.task, batch_size, policy), data.labels, data.task)


# ------------------------------------------------------ cross-validation

@dataclass
class CVResult:
    mean: float
    std: float
    per_repeat: list[float]
    per_fold: list[list[float]]


def cross_validate(dataset, pipeline, n_folds: int = 5, repeats: int = 3,
                   seeds=None) -> CVResult:
    """k-fold cross-validation repeated ``repeats`` times.

    ``pipeline(train_set, test_set, seed) -> float`` trains everything it needs
    (teachers included) on ``train_set`` only. Each repeat's score is the mean
    over folds; mean and std are taken over repeats. ``seeds`` defaults to
    ``0..repeats-1``.
    """
    if dataset.folds is None:
        raise ValueError("dataset has no fold assignment")
    present = set(np.unique(dataset.folds).tolist())
    missing = [k for k in range(1, n_folds + 1) if k not in present]
    if missing:
        raise ValueError(f"missing folds: {missing}")
    seeds = list(range(repeats)) if seeds is None else list(seeds)
    if len(seeds) != repeats:
        raise ValueError("need one seed per repeat")

    per_fold = []
    for seed in seeds:
        scores = []
        for k in range(1, n_folds + 1):
            test = dataset.folds == k
            scores.append(float(pipeline(dataset.subset(np.flatnonzero(~test)),
                                         dataset.subset(np.flatnonzero(test)), seed)))
        per_fold.append(scores)
    # exact rational arithmetic: identical repeats give std exactly 0
    per_repeat = [float(statistics.mean(s)) for s in per_fold]
    return CVResult(float(statistics.mean(per_repeat)), float(statistics.pstdev(per_repeat)),
                    per_repeat, per_fold)


# ----------------------------------------------------------- robustness

def contaminate(spec: np.ndarray, kind: str, level, rng: np.random.Generator) -> np.ndarray:
    if kind == "freq_mask":
        return features.mask(spec, "freq", int(level), rng)
    if kind == "time_mask":
        return features.mask(spec, "time", int(level), rng)
    if kind == "time_shift":
        return features.time_shift(spec, int(level), rng)
    if kind == "noise":
        return features.add_noise(spec, float(level), rng)
    raise ValueError(f"unknown contamination {kind!r}; expected one of {CONTAMINATIONS}")


@dataclass
class DropCurve:
    kind: str
    levels: list
    clean: float
    mean: list[float]
    std: list[float]
    runs: list[list[float]]

    def rows(self, metric: str):
        for lvl, m, s in zip(self.levels, self.mean, self.std):
            yield {"metric": metric, "kind": self.kind, "level": lvl, "mean": m, "std": s}


def robustness_sweep(model, eval_data, kind: str, levels, runs: int = 3, seed: int = 0,
                     batch_size: int = 128, policy: str = "average") -> DropCurve:
    """Relative metric drop (percent) under each contamination level.

    Every clip is contaminated independently at each level; each level is
    evaluated ``runs`` times with distinct seeds.
    """
    if kind not in CONTAMINATIONS:
        raise ValueError(f"unknown contamination {kind!r}; expected one of {CONTAMINATIONS}")
    task = eval_data.task
    clean = score(predict(model, eval_data.specs, task, batch_size, policy), eval_data.labels, task).value
    all_runs = []
    for level in levels:
        drops = []
        for r in range(runs):
            rng = np.random.default_rng([seed, r])
            dirty = np.stack([contaminate(s, kind, level, rng) for s in eval_data.specs])
            value = score(predict(model, dirty, task, batch_size, policy), eval_data.labels, task).value
            drops.append(100.0 * (clean - value) / clean)
        all_runs.append(drops)
    return DropCurve(kind, list(levels), float(clean),
                     [float(np.mean(d)) for d in all_runs], [float(np.std(d)) for d in all_runs],
                     all_runs)


def write_reports(out_dir, reports: dict[str, EvalReport], curves=()):
    """JSON with per-class detail and a ``metric,kind,level,mean,std`` summary CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"reports": {k: r.to_dict() for k, r in reports.items()},
               "robustness": [asdict(c) for c in curves]}
    (out_dir / "eval.json").write_text(json.dumps(payload, indent=2))
    with open(out_dir / "eval_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["metric", "kind", "level", "mean", "std"])
        w.writeheader()
        for name, r in reports.items():
            w.writerow({"metric": f"{name}/{r.metric_name}", "kind": "clean", "level": 0,
                        "mean": r.value, "std": 0.0})
        for c in curves:
            for row in c.rows("drop_pct"):
                w.writerow(row)
