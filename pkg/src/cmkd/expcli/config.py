"""Experiment configuration: TOML loading, presets, validation and hashing.

A config file looks like::

    seed = 0
    output_dir = "runs/demo"

    [dataset]
    synthetic = { n = 2000, num_classes = 10, frames = 100 }
    task = "multi_label"

    [[teachers]]
    name = "cnn"
    model = "mini-cnn"
    train = { include = "mini", epochs = 5 }

    [student]
    model = "mini-ast"
    train = { include = "mini" }
    kd = { lam = 0.5, temperature = 1.0, teachers = ["cnn"] }

Training tables may name a preset with ``include``; explicit keys override
the preset. Validation errors carry the dotted path of the offending field.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from ..distill import KDSpec
from ..evaluate import CONTAMINATIONS
from ..features import TASKS
from ..models import PRESETS, model_spec
from ..train import TRAIN_PRESETS, TrainConfig

BUNDLED_DIR = Path(__file__).resolve().parent.parent / "configs"
CHECKPOINT_CHOICES = ("best", "averaged", "final")
PROBES = ("svcca", "pcc", "attention")
DEFAULT_LEVELS = {
    "freq_mask": [0, 12, 24, 48],
    "time_mask": [0, 10, 20, 40],
    "time_shift": [0, 10, 20, 40],
    "noise": [0.0, 0.5, 1.0, 2.0],
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DatasetConfig:
    task: str = "multi_label"
    path: str | None = None
    root: str | None = None
    num_classes: int | None = None
    frames: int | None = None
    cache_dir: str | None = None
    synthetic: dict | None = None
    split: list = field(default_factory=lambda: [0.7, 0.15, 0.15])
    seed: int = 0


@dataclass
class StageConfig:
    name: str
    model: str
    train: dict
    model_overrides: dict = field(default_factory=dict)
    kd: dict | None = None
    run_dir: str | None = None  # pre-trained teacher living outside output_dir


@dataclass
class EvalConfig:
    checkpoint: str = "averaged"
    batch_size: int = 128
    robustness: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_LEVELS))
    runs: int = 3


@dataclass
class AnalyzeConfig:
    probes: list = field(default_factory=lambda: list(PROBES))
    var_fraction: float = 0.30
    max_samples: int = 512


@dataclass
class CVConfig:
    folds: int = 5
    repeats: int = 3
    seeds: list | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    teachers: list[StageConfig]
    student: StageConfig | None
    baseline: bool = True
    eval: EvalConfig = field(default_factory=EvalConfig)
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)
    cv: CVConfig | None = None
    teacher_checkpoint: str = "averaged"
    seed: int = 0
    output_dir: str = "runs/experiment"

    def to_dict(self) -> dict:
        return _strip_none(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return parse_config(d)

    def canonical(self) -> dict:
        """Semantic content with presets expanded; excludes where the outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        stages = [("teachers", i, t) for i, t in enumerate(self.teachers)]
        if self.student is not None:
            stages.append(("student", None, self.student))
        for key, i, stage in stages:
            target = d[key] if i is None else d[key][i]
            resolved = TrainConfig(**resolve_train(stage.train, stage.name)).to_dict()
            resolved.pop("seed")
            target["train"] = resolved
            target["model_overrides"] = model_spec(stage.model, 2, **stage.model_overrides).to_dict()
        if self.student is not None and self.student.kd is not None:
            kd = asdict(self.kd_spec())
            kd.pop("task")
            d["student"]["kd"] = kd
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.canonical())

    # resolved objects -----------------------------------------------------

    def train_config(self, stage: StageConfig, seed: int) -> TrainConfig:
        return TrainConfig(**{**resolve_train(stage.train, stage.name), "seed": seed})

    def kd_spec(self) -> KDSpec | None:
        if self.student is None or self.student.kd is None:
            return None
        return KDSpec(**{**self.student.kd, "task": self.dataset.task})

    def teacher(self, name: str) -> StageConfig:
        for t in self.teachers:
            if t.name == name:
                return t
        raise KeyError(name)


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_strip_none(v) for v in obj]
    return obj


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve_train(table: dict, where: str = "train") -> dict:
    table = dict(table)
    include = table.pop("include", None)
    base = {}
    if include is not None:
        if include not in TRAIN_PRESETS:
            raise ConfigError(f"{where}.train.include",
                              f"unknown preset {include!r}; known: {sorted(TRAIN_PRESETS)}")
        base = dict(TRAIN_PRESETS[include])
    return {**base, **table}


# ----------------------------------------------------------------- parsing

def _take(d: dict, key: str, where: str, kind, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{where}{key}", "required field is missing")
        return default
    value = d[key]
    ok = isinstance(value, kind) and not (kind in (int, float, (int, float)) and isinstance(value, bool))
    if not ok:
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(f"{where}{key}", f"expected {name}, got {type(value).__name__}")
    return value


def _no_extra(d: dict, allowed, where: str):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{where}{extra[0]}", f"unknown field (allowed: {sorted(allowed)})")


def _parse_dataset(d: dict) -> DatasetConfig:
    w = "dataset."
    _no_extra(d, [f.name for f in fields(DatasetConfig)], w)
    ds = DatasetConfig(
        task=_take(d, "task", w, str, "multi_label"),
        path=_take(d, "path", w, str),
        root=_take(d, "root", w, str),
        num_classes=_take(d, "num_classes", w, int),
        frames=_take(d, "frames", w, int),
        cache_dir=_take(d, "cache_dir", w, str),
        synthetic=_take(d, "synthetic", w, dict),
        split=list(_take(d, "split", w, list, [0.7, 0.15, 0.15])),
        seed=_take(d, "seed", w, int, 0),
    )
    if ds.task not in TASKS:
        raise ConfigError(w + "task", f"must be one of {TASKS}")
    if (ds.path is None) == (ds.synthetic is None):
        raise ConfigError(w + "path", "give exactly one of 'path' (manifest) or 'synthetic'")
    if ds.path is not None and ds.num_classes is None:
        raise ConfigError(w + "num_classes", "required with a manifest")
    if ds.synthetic is not None:
        allowed = ("n", "num_classes", "frames", "max_labels", "snr", "n_folds")
        _no_extra(ds.synthetic, allowed, w + "synthetic.")
        for k, v in ds.synthetic.items():
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{w}synthetic.{k}", "expected a number")
        if ds.synthetic.get("num_classes", 10) < 2:
            raise ConfigError(w + "synthetic.num_classes", "need at least 2 classes")
    if len(ds.split) != 3 or any(not isinstance(f, (int, float)) or f <= 0 for f in ds.split):
        raise ConfigError(w + "split", "expected three positive fractions (train, val, test)")
    if abs(sum(ds.split) - 1.0) > 1e-9:
        raise ConfigError(w + "split", f"fractions sum to {sum(ds.split)}, expected 1")
    return ds


def _parse_stage(d: dict, where: str, is_student: bool) -> StageConfig:
    allowed = ["name", "model", "train", "model_overrides"] + (["kd"] if is_student else ["run_dir"])
    _no_extra(d, allowed, where)
    name = _take(d, "name", where, str, "student" if is_student else None, required=not is_student)
    model = _take(d, "model", where, str, required=True)
    if model not in PRESETS:
        raise ConfigError(where + "model", f"unknown model preset {model!r}; known: {sorted(PRESETS)}")
    train = dict(_take(d, "train", where, dict, {}))
    try:
        resolved = resolve_train(train, where.rstrip("."))
        TrainConfig.from_dict({k: v for k, v in resolved.items() if k != "seed"})
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(where + "train", str(e)) from None
    if "seed" in train:
        raise ConfigError(where + "train.seed", "set the experiment seed at top level or with --seed")
    overrides = dict(_take(d, "model_overrides", where, dict, {}))
    try:
        model_spec(model, 2, **overrides)
    except (TypeError, ValueError) as e:
        raise ConfigError(where + "model_overrides", str(e)) from None
    kd = None
    if is_student and "kd" in d:
        kd = dict(_take(d, "kd", where, dict))
        if "task" in kd:
            raise ConfigError(where + "kd.task", "taken from dataset.task")
        try:
            KDSpec(**kd)
        except TypeError as e:
            raise ConfigError(where + "kd", str(e)) from None
        except ValueError as e:
            raise ConfigError(where + "kd", str(e)) from None
    run_dir = None if is_student else _take(d, "run_dir", where, str)
    return StageConfig(name, model, train, overrides, kd, run_dir)


def parse_config(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    top = ["dataset", "teachers", "student", "baseline", "eval", "analyze", "cv",
           "teacher_checkpoint", "seed", "output_dir"]
    _no_extra(raw, top, "")
    dataset = _parse_dataset(_take(raw, "dataset", "", dict, required=True))
    teachers = [_parse_stage(t, f"teachers[{i}].", False)
                for i, t in enumerate(_take(raw, "teachers", "", list, []))]
    names = [t.name for t in teachers]
    if len(set(names)) != len(names):
        raise ConfigError("teachers", f"duplicate teacher names {names}")
    for i, n in enumerate(names):
        if n in ("student", "baseline"):
            raise ConfigError(f"teachers[{i}].name", f"{n!r} is reserved")
    student = None
    if "student" in raw:
        student = _parse_stage(_take(raw, "student", "", dict), "student.", True)
        if student.kd is not None:
            for i, ref in enumerate(student.kd.get("teachers", [])):
                if ref not in names:
                    raise ConfigError(f"student.kd.teachers[{i}]",
                                      f"teacher {ref!r} is not declared under [[teachers]]")
            if student.kd.get("lam", 0.5) < 1.0 and not student.kd.get("teachers"):
                raise ConfigError("student.kd.teachers", "lam < 1 needs at least one teacher")
    ev = dict(_take(raw, "eval", "", dict, {}))
    _no_extra(ev, [f.name for f in fields(EvalConfig)], "eval.")
    eval_cfg = EvalConfig(**ev)
    if eval_cfg.checkpoint not in CHECKPOINT_CHOICES:
        raise ConfigError("eval.checkpoint", f"must be one of {CHECKPOINT_CHOICES}")
    for kind, levels in eval_cfg.robustness.items():
        if kind not in CONTAMINATIONS:
            raise ConfigError(f"eval.robustness.{kind}", f"unknown contamination; known: {CONTAMINATIONS}")
        if not isinstance(levels, list) or any(isinstance(v, bool) or not isinstance(v, (int, float))
                                              or v < 0 for v in levels):
            raise ConfigError(f"eval.robustness.{kind}", "expected a list of non-negative numbers")
    if not isinstance(eval_cfg.runs, int) or eval_cfg.runs < 1:
        raise ConfigError("eval.runs", "expected a positive integer")
    an = dict(_take(raw, "analyze", "", dict, {}))
    _no_extra(an, [f.name for f in fields(AnalyzeConfig)], "analyze.")
    analyze_cfg = AnalyzeConfig(**an)
    for i, p in enumerate(analyze_cfg.probes):
        if p not in PROBES:
            raise ConfigError(f"analyze.probes[{i}]", f"unknown probe {p!r}; known: {PROBES}")
    if not 0.0 < analyze_cfg.var_fraction <= 1.0:
        raise ConfigError("analyze.var_fraction", "must lie in (0, 1]")
    cv = None
    if "cv" in raw:
        c = dict(_take(raw, "cv", "", dict))
        _no_extra(c, [f.name for f in fields(CVConfig)], "cv.")
        cv = CVConfig(**c)
        if cv.folds < 2:
            raise ConfigError("cv.folds", "need at least 2 folds")
        if cv.seeds is not None and len(cv.seeds) != cv.repeats:
            raise ConfigError("cv.seeds", f"expected {cv.repeats} seeds, one per repeat")
    teacher_ckpt = _take(raw, "teacher_checkpoint", "", str, "averaged")
    if teacher_ckpt not in CHECKPOINT_CHOICES:
        raise ConfigError("teacher_checkpoint", f"must be one of {CHECKPOINT_CHOICES}")
    return ExperimentConfig(
        dataset=dataset, teachers=teachers, student=student,
        baseline=_take(raw, "baseline", "", bool, True),
        eval=eval_cfg, analyze=analyze_cfg, cv=cv, teacher_checkpoint=teacher_ckpt,
        seed=_take(raw, "seed", "", int, 0),
        output_dir=_take(raw, "output_dir", "", str, "runs/experiment"),
    )


def bundled_configs() -> list[str]:
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.toml"))


def load_config(path, seed: int | None = None, output_dir=None) -> ExperimentConfig:
    """Read a TOML file (or the name of a bundled config) and validate it."""
    p = Path(path)
    if not p.exists() and (BUNDLED_DIR / f"{path}.toml").exists():
        p = BUNDLED_DIR / f"{path}.toml"
    if not p.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        raw = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as e:
        raise ConfigError("config", f"not valid TOML: {e}") from None
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    return parse_config(raw)
