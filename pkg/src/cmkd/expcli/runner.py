"""Stage runner: teachers -> student (+ no-KD baseline) -> evaluate -> probe -> analyze [-> cv].

Output layout under ``output_dir``::

    config.json                 frozen config, hash and seed
    teachers/<name>/            one training run per teacher
    student/  baseline/         training runs (same seed; baseline without KD)
    eval/eval.json, eval/eval_summary.csv
    probe/robustness.json, probe/robustness.csv
    analyze/attention.json, analyze/similarity.csv, analyze/analyze.json
    cv/cv.json                  only when a [cv] table is present

Each training run directory holds ``config.json``, ``model.json``,
``metrics.csv``, ``losses.csv``, ``checkpoints/epoch_{k}.ckpt`` and
``final/{best,averaged}.ckpt``. A finished stage leaves a ``.done`` marker
stamped with the config hash and seed; ``resume=True`` skips such stages.
Downstream stages always reload models from disk, so a resumed run and a
fresh run see byte-identical inputs.
"""
from __future__ import annotations

import csv
import json
import logging
from functools import cached_property
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from ..analyze import collect, prediction_similarity, svcca_similarity
from ..data import Dataset, load_manifest, make_synthetic
from ..evaluate import cross_validate, evaluate_model, robustness_sweep, write_reports
from ..models import build_model, model_spec
from ..train import load_run_model, train
from .config import ConfigError, ExperimentConfig, StageConfig

log = logging.getLogger(__name__)

STUDENT, BASELINE = "student", "baseline"


class MissingArtifact(RuntimeError):
    """A stage needs an output (teacher run, trained model) that does not exist."""


class OutputDirLocked(RuntimeError):
    pass


def stage_seed(seed: int, index: int) -> int:
    """Independent seed for the ``index``-th teacher."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0] % (2**31))


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if ds.synthetic is not None:
        kw = {k: (float(v) if k == "snr" else int(v)) for k, v in ds.synthetic.items()}
        return make_synthetic(task=ds.task, seed=ds.seed, **kw)
    path = Path(ds.path)
    if not path.exists():
        raise ConfigError("dataset.path", f"manifest not found: {path}")
    return load_manifest(path, ds.num_classes, ds.task, root=ds.root, frames=ds.frames,
                         cache_dir=ds.cache_dir)


def _write_json(path: Path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class Experiment:
    def __init__(self, cfg: ExperimentConfig, resume: bool = False):
        self.cfg = cfg
        self.resume = resume
        self.out = Path(cfg.output_dir)
        self.hash = cfg.hash
        self.seed = cfg.seed
        self._lock = None

    # ------------------------------------------------------------ plumbing

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.out / ".cmkd.lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise OutputDirLocked(f"{self.out} is in use by another experiment process") from None
        self._freeze_config()
        return self

    def __exit__(self, *exc):
        self._lock.release()

    def stamp(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed}

    def _freeze_config(self):
        path = self.out / "config.json"
        if self.resume and path.exists():
            old = json.loads(path.read_text())
            if old.get("config_hash") != self.hash:
                raise ConfigError("config", f"{self.out} holds a run with config hash "
                                            f"{old.get('config_hash')}, this config hashes to {self.hash}")
        _write_json(path, {"config": self.cfg.to_dict(), **self.stamp()})

    def is_done(self, stage_dir: Path) -> bool:
        marker = stage_dir / ".done"
        if not marker.exists():
            return False
        return json.loads(marker.read_text()) == self.stamp()

    def mark_done(self, stage_dir: Path):
        _write_json(stage_dir / ".done", self.stamp())

    def _skip(self, stage_dir: Path) -> bool:
        if self.resume and self.is_done(stage_dir):
            log.info("resume: %s already complete, skipping", stage_dir)
            return True
        return False

    # --------------------------------------------------------------- data

    @cached_property
    def full_data(self) -> Dataset:
        return load_dataset(self.cfg)

    @cached_property
    def splits(self) -> tuple[Dataset, Dataset, Dataset]:
        return tuple(self.full_data.split(self.cfg.dataset.split, seed=self.cfg.dataset.seed))

    # ------------------------------------------------------------- models

    def teacher_dir(self, stage: StageConfig) -> Path:
        return Path(stage.run_dir) if stage.run_dir else self.out / "teachers" / stage.name

    def model_dirs(self) -> dict[str, Path]:
        dirs = {t.name: self.teacher_dir(t) for t in self.cfg.teachers}
        if self.cfg.student is not None:
            dirs[STUDENT] = self.out / STUDENT
            if self.cfg.baseline:
                dirs[BASELINE] = self.out / BASELINE
        return dirs

    def load_model(self, name: str, which: str | None = None):
        run_dir = self.model_dirs()[name]
        which = which or self.cfg.eval.checkpoint
        needed = run_dir / "model.json"
        ckpt = run_dir / "final" / f"{which}.ckpt"
        if not needed.exists() or (which != "final" and not ckpt.exists()):
            kind = "teacher" if name not in (STUDENT, BASELINE) else "model"
            raise MissingArtifact(f"{kind} {name!r}: no trained run at {run_dir}")
        return load_run_model(run_dir, which)

    def _train_stage(self, name, stage: StageConfig, run_dir: Path, seed: int, kd=None, teachers=()):
        train_set, val_set, _ = self.splits
        spec = model_spec(stage.model, train_set.num_classes, input_frames=train_set.frames,
                          **stage.model_overrides)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "config.json", {"config": self.cfg.to_dict(), "stage": name, **self.stamp(),
                                              "stage_seed": seed})
        _write_json(run_dir / "model.json", spec.to_dict())
        model = build_model(spec, seed=seed)
        tcfg = self.cfg.train_config(stage, seed)
        art = train(model, (train_set, val_set), tcfg, kd=kd, teachers=teachers, run_dir=run_dir,
                    config_hash=self.hash)
        self.mark_done(run_dir)
        log.info("%s: best val %.4f at epoch %d", name, art.best_metric, art.best_epoch)
        return art

    # ------------------------------------------------------------- stages

    def train_teachers(self):
        for i, t in enumerate(self.cfg.teachers):
            run_dir = self.teacher_dir(t)
            if t.run_dir:
                if not (run_dir / "model.json").exists():
                    raise MissingArtifact(f"teacher {t.name!r}: external run {run_dir} not found")
                continue
            if self._skip(run_dir):
                continue
            log.info("training teacher %s (%s)", t.name, t.model)
            self._train_stage(t.name, t, run_dir, stage_seed(self.seed, i))

    def distill(self):
        if self.cfg.student is None:
            log.info("no student declared; nothing to distill")
            return
        kd = self.cfg.kd_spec()
        teachers = []
        if kd is not None and kd.lam < 1.0:
            teachers = [self.load_model(n, self.cfg.teacher_checkpoint) for n in kd.teachers]
        student_dir = self.out / STUDENT
        if not self._skip(student_dir):
            log.info("distilling into %s", self.cfg.student.model)
            self._train_stage(STUDENT, self.cfg.student, student_dir, self.seed, kd=kd, teachers=teachers)
        if self.cfg.baseline:
            base_dir = self.out / BASELINE
            if not self._skip(base_dir):
                log.info("training no-KD baseline %s", self.cfg.student.model)
                self._train_stage(BASELINE, self.cfg.student, base_dir, self.seed)

    def evaluate(self):
        out = self.out / "eval"
        if self._skip(out):
            return
        _, _, test = self.splits
        reports = {name: evaluate_model(self.load_model(name), test, self.cfg.eval.batch_size)
                   for name in self.model_dirs()}
        write_reports(out, reports)
        payload = json.loads((out / "eval.json").read_text())
        _write_json(out / "eval.json", {**payload, **self.stamp()})
        self.mark_done(out)

    def probe(self):
        out = self.out / "probe"
        if self._skip(out):
            return
        _, _, test = self.splits
        curves, rows = [], []
        for name in self.model_dirs():
            model = self.load_model(name)
            for kind, levels in self.cfg.eval.robustness.items():
                curve = robustness_sweep(model, test, kind, levels, runs=self.cfg.eval.runs,
                                         seed=self.seed, batch_size=self.cfg.eval.batch_size)
                curves.append({"model": name, **curve.__dict__})
                rows.extend(curve.rows(f"{name}/drop_pct"))
        _write_json(out / "robustness.json", {"curves": curves, **self.stamp()})
        with open(out / "robustness.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["metric", "kind", "level", "mean", "std"])
            w.writeheader()
            w.writerows(rows)
        self.mark_done(out)

    def analyze(self):
        out = self.out / "analyze"
        if self._skip(out):
            return
        probes = set(self.cfg.analyze.probes)
        _, _, test = self.splits
        specs = test.specs[: self.cfg.analyze.max_samples]
        preds, reps, attention = {}, {}, []
        for name in self.model_dirs():
            model = self.load_model(name)
            grid = model.attention_grid() if "attention" in probes else None
            p, r, summary = collect(model, specs, test.task, self.cfg.eval.batch_size, attention_grid=grid)
            preds[name], reps[name] = p, r
            if summary is not None:
                for axis, values in (("freq", summary.freq), ("time", summary.time)):
                    for layer, d in enumerate(values):
                        attention.append({"model": name, "layer": layer, "axis": axis, "distance": d})
        names = list(preds)
        matrices = {}
        if "svcca" in probes:
            matrices["svcca"] = [[svcca_similarity(reps[a], reps[b], self.cfg.analyze.var_fraction)
                                  for b in names] for a in names]
        if "pcc" in probes:
            matrices["pcc"] = [[prediction_similarity(preds[a], preds[b]) for b in names] for a in names]
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "attention.json", attention)
        with open(out / "similarity.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["measure", "model"] + names)
            for measure, m in matrices.items():
                for a, row in zip(names, m):
                    w.writerow([measure, a] + [repr(float(v)) for v in row])
        _write_json(out / "analyze.json", {"models": names, "similarity": matrices,
                                           "n_samples": len(specs), **self.stamp()})
        self.mark_done(out)

    def cross_validate(self):
        if self.cfg.cv is None:
            return None
        out = self.out / "cv"
        if self._skip(out):
            return json.loads((out / "cv.json").read_text())
        data = self.full_data
        if data.folds is None:
            raise ConfigError("cv", "dataset has no fold assignments")
        cv = self.cfg.cv
        res = cross_validate(data, fold_pipeline(self.cfg), n_folds=cv.folds, repeats=cv.repeats,
                             seeds=cv.seeds)
        payload = {"mean": res.mean, "std": res.std, "per_repeat": res.per_repeat,
                   "per_fold": res.per_fold, **self.stamp()}
        _write_json(out / "cv.json", payload)
        self.mark_done(out)
        return payload

    def run_all(self):
        self.train_teachers()
        self.distill()
        self.evaluate()
        self.probe()
        self.analyze()
        self.cross_validate()


def fold_pipeline(cfg: ExperimentConfig):
    """``(train, test, seed) -> metric`` for one fold: fresh teachers, then the student.

    Training data of the fold is split once more into train/validation with
    the configured train:val proportion; nothing is written to disk.
    """
    if cfg.student is None:
        raise ConfigError("student", "cross-validation needs a student stage")
    kd = cfg.kd_spec()
    frac = cfg.dataset.split[0] / (cfg.dataset.split[0] + cfg.dataset.split[1])

    def pipeline(train_set: Dataset, test_set: Dataset, seed: int) -> float:
        tr, va = train_set.split([frac, 1 - frac], seed=seed)
        teachers = {}
        needed = kd.teachers if kd is not None and kd.lam < 1.0 else []
        for i, t in enumerate(cfg.teachers):
            if t.name not in needed:
                continue
            s = stage_seed(seed, i)
            spec = model_spec(t.model, tr.num_classes, input_frames=tr.frames, **t.model_overrides)
            model = build_model(spec, seed=s)
            train(model, (tr, va), cfg.train_config(t, s))
            teachers[t.name] = model
        spec = model_spec(cfg.student.model, tr.num_classes, input_frames=tr.frames,
                          **cfg.student.model_overrides)
        student = build_model(spec, seed=seed)
        train(student, (tr, va), cfg.train_config(cfg.student, seed), kd=kd,
              teachers=[teachers[n] for n in needed])
        return evaluate_model(student, test_set).value

    return pipeline


STAGE_METHODS = {
    "train-teacher": ("train_teachers",),
    "distill": ("distill",),
    "evaluate": ("evaluate",),
    "probe": ("probe",),
    "analyze": ("analyze",),
    "run": ("train_teachers", "distill", "evaluate", "probe", "analyze", "cross_validate"),
}


def run_experiment(cfg: ExperimentConfig, verb: str = "run", resume: bool = False) -> Path:
    with Experiment(cfg, resume=resume) as exp:
        for method in STAGE_METHODS[verb]:
            getattr(exp, method)()
    return exp.out
