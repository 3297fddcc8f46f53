"""Training loop and training-recipe utilities."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .distill import KDSpec, activation, freeze, inference_logits, kd_total_loss, teacher_predict
from .evaluate import evaluate_model
from .features import AugmentSpec, augment_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    initial_lr: float = 5e-4
    batch_size: int = 24
    epochs: int = 50
    mixup_ratio: float = 0.5
    spec_augment: tuple = (48, 192)
    class_balancing: bool = True
    label_smoothing: float = 0.1
    seed: int = 0
    patience: int = 2
    lr_factor: float = 0.5
    noise_amp_max: float = 0.05
    noise_mode: str = "per_clip"
    shift_max: int = 10
    shift_wrap: bool = True
    balance_mode: str = "max"
    wa_start_epoch: int | None = None
    head_policy: str = "average"
    eval_batch_size: int = 256

    def __post_init__(self):
        self.spec_augment = tuple(self.spec_augment)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")

    def augment_spec(self) -> AugmentSpec:
        return AugmentSpec(freq_mask_max=self.spec_augment[0], time_mask_max=self.spec_augment[1],
                           mixup_ratio=self.mixup_ratio, noise_amp_max=self.noise_amp_max,
                           shift_max=self.shift_max, label_smoothing=self.label_smoothing,
                           noise_mode=self.noise_mode, shift_wrap=self.shift_wrap,
                           rng_seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec_augment"] = list(self.spec_augment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)


_SHARED = dict(label_smoothing=0.1, noise_amp_max=0.05, shift_max=10)
TRAIN_PRESETS = {
    "fsd50k_cnn": dict(initial_lr=5e-4, batch_size=24, epochs=50, mixup_ratio=0.5,
                       spec_augment=(48, 192), class_balancing=True, **_SHARED),
    "fsd50k_ast": dict(initial_lr=5e-5, batch_size=12, epochs=50, mixup_ratio=0.5,
                       spec_augment=(48, 192), class_balancing=True, **_SHARED),
    # AudioSet recipes need the 2M-clip corpus; kept for completeness only
    "audioset_cnn": dict(initial_lr=1e-4, batch_size=120, epochs=30, mixup_ratio=0.5,
                         spec_augment=(48, 192), class_balancing=True, **_SHARED),
    "audioset_ast": dict(initial_lr=1e-5, batch_size=12, epochs=5, mixup_ratio=0.5,
                         spec_augment=(48, 192), class_balancing=True, **_SHARED),
    "esc50_cnn": dict(initial_lr=1e-4, batch_size=48, epochs=25, mixup_ratio=0.0,
                      spec_augment=(24, 96), class_balancing=False, **_SHARED),
    "esc50_ast": dict(initial_lr=1e-5, batch_size=48, epochs=25, mixup_ratio=0.0,
                      spec_augment=(24, 96), class_balancing=False, **_SHARED),
    "mini": dict(initial_lr=1e-3, batch_size=64, epochs=5, mixup_ratio=0.5,
                 spec_augment=(24, 20), class_balancing=True, **_SHARED),
}
TRAIN_PRESETS["esc50"] = TRAIN_PRESETS["esc50_cnn"]


def train_config(preset: str, **overrides) -> TrainConfig:
    if preset not in TRAIN_PRESETS:
        raise ValueError(f"unknown training preset {preset!r}; known: {sorted(TRAIN_PRESETS)}")
    return TrainConfig(**{**TRAIN_PRESETS[preset], **overrides})


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------- pieces

class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the validation metric
    (maximized) has failed to improve for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, patience: int = 2, factor: float = 0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = -np.inf
        self.bad_epochs = 0

    def step(self, val_metric: float) -> float:
        if val_metric > self.best:
            self.best = val_metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler(state: PlateauScheduler, val_metric: float) -> float:
    return state.step(val_metric)


def class_balanced_weights(labels: np.ndarray, mode: str = "max") -> np.ndarray:
    """Per-sample sampling weights from inverse class frequency, mean 1.

    A sample's weight is the max (or sum) of ``1 / count`` over its positive
    classes.
    """
    pos = np.asarray(labels) > 0.5
    counts = pos.sum(0)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise ValueError(f"classes without positive samples: {empty.tolist()}")
    inv = np.where(pos, 1.0 / counts, 0.0)
    if mode == "max":
        w = inv.max(1)
    elif mode == "sum":
        w = inv.sum(1)
    else:
        raise ValueError(f"unknown balancing mode {mode!r}")
    return w / w.mean()


def weight_average(checkpoints: list[Checkpoint], start_epoch: int = 1) -> Checkpoint:
    """Elementwise mean of the checkpoints with ``epoch >= start_epoch``.

    The stack is sorted along the checkpoint axis before summing, so the
    result does not depend on list order.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    hashes = {c.config_hash for c in checkpoints}
    if len(hashes) > 1:
        raise ValueError(f"checkpoints come from different configs: {sorted(hashes)}")
    last = max(c.epoch for c in checkpoints)
    if start_epoch > last:
        raise ValueError(f"start_epoch {start_epoch} is after the last epoch {last}")
    chosen = [c for c in checkpoints if c.epoch >= start_epoch]
    names = set(chosen[0].params)
    params = {}
    for name in sorted(names):
        arrays = [np.asarray(c.params.get(name)) for c in chosen]
        shapes = {a.shape for a in arrays}
        if len(shapes) > 1:
            raise ValueError(f"shape mismatch for {name}: {sorted(shapes)}")
        stack = np.sort(np.stack(arrays).astype(np.float64), axis=0)
        params[name] = stack.mean(0).astype(arrays[0].dtype)
    final = max(chosen, key=lambda c: c.epoch)
    return Checkpoint(params, epoch=final.epoch, config_hash=final.config_hash, seed=final.seed,
                      extra={"averaged_from": start_epoch})


def ensemble_predict(models, spec, task: str, policy: str = "average") -> np.ndarray:
    """Mean post-activation prediction of several models."""
    models = list(models)
    if not models:
        raise ValueError("ensemble needs at least one model")
    if len({m.spec.num_classes for m in models}) > 1:
        raise ValueError("ensemble members disagree on num_classes")
    x = torch.as_tensor(np.asarray(spec), dtype=torch.float32)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    preds = []
    with torch.no_grad():
        for m in models:
            m.eval()
            preds.append(activation(inference_logits(m(x), policy, task), task).numpy())
    return np.mean(preds, axis=0)


# --------------------------------------------------------------- loop

@dataclass
class RunArtifacts:
    run_dir: Path | None
    history: list[dict]
    batch_losses: list[list[float]]
    best_epoch: int
    best_metric: float
    checkpoints: list = field(default_factory=list)
    averaged_metric: float | None = None
    wa_start_epoch: int | None = None

    @property
    def final_metric(self) -> float:
        return self.history[-1]["val_metric"]


def _draw_order(rng, n, weights):
    if weights is None:
        return rng.permutation(n)
    return rng.choice(n, size=n, replace=True, p=weights / weights.sum())


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def format_float(x) -> str:
    return repr(float(x))


def train(model, data, cfg: TrainConfig, kd: KDSpec | None = None, teachers=(),
          run_dir=None, config_hash: str = "") -> RunArtifacts:
    """Train ``model`` on ``data = (train_set, val_set)``.

    With ``kd`` set, ``teachers`` are frozen and every batch is scored with
    :func:`kd_total_loss`; otherwise only the ground-truth loss is used. All
    randomness derives from ``cfg.seed``, so a rerun reproduces the loss and
    metric history exactly. When ``run_dir`` is given the run writes
    ``metrics.csv``, ``losses.csv``, ``checkpoints/epoch_{k}.ckpt`` and
    ``final/{best,averaged}.ckpt``.
    """
    train_set, val_set = data
    task = train_set.task
    if kd is not None and kd.task != task:
        raise ValueError(f"KD task {kd.task} does not match dataset task {task}")
    teachers = [freeze(t) for t in teachers]
    if kd is not None and kd.lam < 1.0 and len(teachers) != kd.n_teachers:
        raise ValueError(f"KD spec names {kd.n_teachers} teachers but {len(teachers)} were given")
    for t in teachers:
        if t.spec.num_classes != train_set.num_classes:
            raise ValueError("teacher/student class-count mismatch")

    torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr, weight_decay=0.0)
    sched = PlateauScheduler(cfg.initial_lr, cfg.patience, cfg.lr_factor)
    aug = cfg.augment_spec()
    weights = (class_balanced_weights(train_set.labels, cfg.balance_mode)
               if cfg.class_balancing else None)
    use_kd = kd is not None and kd.lam < 1.0
    n_distill = 0 if not use_kd else (1 if kd.teacher_mode == "ensemble" else kd.n_teachers)

    history, batch_rows, ckpts = [], [], []
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = _draw_order(rng, len(train_set), weights)
        lr = opt.param_groups[0]["lr"]
        model.train()
        totals = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            clean = train_set.specs[idx]
            augmented, targets = augment_batch(clean, train_set.labels[idx], aug, task, rng)
            out = model(torch.from_numpy(augmented))
            y = torch.from_numpy(targets)
            if use_kd:
                t_logits = [teacher_predict(t, clean, augmented, kd.consistent, task) for t in teachers]
                parts = kd_total_loss(out.logits, y, kd, t_logits, z_dis=out.dis_logits)
            else:
                plain = kd or KDSpec(lam=1.0, task=task)
                parts = kd_total_loss(out.logits, y, plain)
            if not torch.isfinite(parts.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b}: total={float(parts.total)}, "
                    f"ground_truth={float(parts.ground_truth)}, distill={float(parts.distill)}, lr={lr}")
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            opt.step()
            totals.append(parts.total.item())
            batch_rows.append([epoch, b] + parts.as_row())

        val = evaluate_model(model, val_set, cfg.eval_batch_size, cfg.head_policy).value
        train_loss = float(np.mean(totals))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_metric": val, "lr": lr})
        log.info("epoch %d  train_loss %.4f  val %.4f  lr %.2e", epoch, train_loss, val, lr)
        ckpt = Checkpoint.from_model(model, epoch=epoch, val_metric=val,
                                     config_hash=config_hash, seed=cfg.seed)
        if run_dir is not None:
            path = run_dir / "checkpoints" / f"epoch_{epoch}.ckpt"
            save_checkpoint(path, ckpt)
            ckpts.append(path)
        else:
            ckpts.append(ckpt)
        new_lr = sched.step(val)
        for group in opt.param_groups:
            group["lr"] = new_lr

    best = max(history, key=lambda h: h["val_metric"])
    art = RunArtifacts(run_dir, history, batch_rows, best["epoch"], best["val_metric"], ckpts)
    _finalize(model, art, val_set, cfg, n_distill)
    return art


def _load(c):
    return c if isinstance(c, Checkpoint) else load_checkpoint(c)


def _finalize(model, art: RunArtifacts, val_set, cfg: TrainConfig, n_distill: int):
    """Weight averaging (start epoch picked on validation) and on-disk outputs."""
    final_state = Checkpoint.from_model(model)
    all_ckpts = [_load(c) for c in art.checkpoints]
    starts = [cfg.wa_start_epoch] if cfg.wa_start_epoch else range(1, len(all_ckpts) + 1)
    best_avg, best_start, best_val = None, None, -np.inf
    for s in starts:
        avg = weight_average(all_ckpts, s)
        avg.load_into(model)
        val = evaluate_model(model, val_set, cfg.eval_batch_size, cfg.head_policy).value
        if val > best_val:
            best_avg, best_start, best_val = avg, s, val
    best_avg.val_metric = best_val
    art.averaged_metric, art.wa_start_epoch = best_val, best_start
    final_state.load_into(model)

    if art.run_dir is None:
        return
    run_dir = art.run_dir
    _write_csv(run_dir / "metrics.csv", ["epoch", "train_loss", "val_metric", "lr"],
               [[h["epoch"], format_float(h["train_loss"]), format_float(h["val_metric"]),
                 format_float(h["lr"])] for h in art.history])
    _write_csv(run_dir / "losses.csv",
               ["epoch", "batch", "total", "ground_truth"] + [f"distill_{i}" for i in range(n_distill)],
               [r[:2] + [format_float(v) for v in r[2:]] for r in art.batch_losses])
    (run_dir / "final").mkdir(exist_ok=True)
    save_checkpoint(run_dir / "final" / "best.ckpt", all_ckpts[art.best_epoch - 1])
    save_checkpoint(run_dir / "final" / "averaged.ckpt", best_avg)
    summary = {"best_epoch": art.best_epoch, "best_metric": art.best_metric,
               "final_metric": art.final_metric, "averaged_metric": art.averaged_metric,
               "wa_start_epoch": art.wa_start_epoch}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))


def load_run_model(run_dir, which: str = "final"):
    """Rebuild a trained model from a run directory (``final``, ``best`` or ``averaged``)."""
    from .models import ModelSpec, build_model

    run_dir = Path(run_dir)
    spec = ModelSpec.from_dict(json.loads((run_dir / "model.json").read_text()))
    model = build_model(spec)
    if which == "final":
        path = sorted((run_dir / "checkpoints").glob("epoch_*.ckpt"),
                      key=lambda p: int(p.stem.split("_")[1]))[-1]
    else:
        path = run_dir / "final" / f"{which}.ckpt"
    load_checkpoint(path).load_into(model)
    return model.eval()
