"""Acceptance checks, one group per criterion (see the summary printed at the end of the run).

Each group uses its own oracle: numpy transcriptions of the loss, brute-force
enumerations, closed-form values, or independent reruns.
"""
import json
import math
import time

import numpy as np
import pytest
import torch

from cmkd import features as F
from cmkd.analyze import mean_attention_distance, collect, svcca_similarity
from cmkd.checkpoint import Checkpoint
from cmkd.data import make_synthetic
from cmkd.distill import KDSpec, ground_truth_loss, kd_loss_grad, kd_total_loss
from cmkd.evaluate import mean_average_precision
from cmkd.expcli import load_config, parse_config
from cmkd.expcli.cli import main
from cmkd.expcli.runner import Experiment
from cmkd.models import PatchGrid, build_model, model_spec, patch_grid, patchify
from cmkd.train import PlateauScheduler, ensemble_predict, train, train_config, weight_average

crit = pytest.mark.criterion


def np_softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def np_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def oracle_total(zs, y, zts, lam, tau, task, mode="multi_loss"):
    """Batch-mean KD loss written out term by term."""
    rows = []
    for b in range(zs.shape[0]):
        if task == F.SINGLE_LABEL:
            q = np_softmax(zs[b])
            g = -np.sum(y[b] * np.log(q))
            kl = lambda p: np.sum(p * np.log(p / q))
            probs = [np_softmax(z[b] / tau) for z in zts]
        else:
            q = np_sigmoid(zs[b])
            g = -np.mean(y[b] * np.log(q) + (1 - y[b]) * np.log(1 - q))
            kl = lambda p: np.mean(p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q)))
            probs = [np_sigmoid(z[b] / tau) for z in zts]
        if mode == "ensemble":
            rows.append(lam * g + (1 - lam) * kl(np.mean(probs, 0)))
        else:
            rows.append(lam * g + sum((1 - lam) / len(zts) * kl(p) for p in probs))
    return float(np.mean(rows))


def random_targets(r, task, batch, c):
    if task == F.SINGLE_LABEL:
        return np.eye(c)[r.integers(0, c, batch)]
    y = (r.random((batch, c)) < 0.3).astype(float)
    return y


T = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float64)  # noqa: E731


# ---------------------------------------------------------------- 1

@crit(1)
def test_c1_decomposition_limits_and_runtime():
    r = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        task = F.TASKS[i % 2]
        batch, c = int(r.integers(1, 5)), int(r.integers(2, 11))
        zs, zt = r.normal(size=(batch, c)) * 3, r.normal(size=(batch, c)) * 3
        y = random_targets(r, task, batch, c)
        lam, tau = float(r.uniform(0, 1)), float(r.uniform(0.25, 5.0))
        kd = KDSpec(lam=lam, temperature=tau, teachers=["t"], task=task)
        parts = kd_total_loss(T(zs), T(y), kd, [T(zt)])
        worst = max(worst, abs(float(parts.total) - oracle_total(zs, y, [zt], lam, tau, task)))
        assert float(parts.total) == pytest.approx(lam * float(parts.ground_truth) + float(parts.distill),
                                                   abs=1e-12)

        plain = ground_truth_loss(T(zs), T(y), task)
        one = kd_total_loss(T(zs), T(y), KDSpec(lam=1.0, teachers=["t"], task=task), [T(zt)])
        assert torch.equal(one.total, plain)

        self_kd = kd_total_loss(T(zs), T(y), KDSpec(lam=lam, temperature=1.0, teachers=["t"], task=task),
                                [T(zs)])
        assert float(self_kd.distill) == 0.0
    elapsed = time.perf_counter() - start
    print(f"criterion 1: max |total - oracle| = {worst:.3e} over 1000 instances, {elapsed:.2f} s")
    assert worst <= 1e-9
    assert elapsed < 10.0


# ---------------------------------------------------------------- 2

@crit(2)
@pytest.mark.parametrize("tau", [0.5, 1.0, 2.5])
def test_c2_gradient_vs_finite_differences(tau):
    r = np.random.default_rng(int(tau * 100))
    h, worst = 1e-4, 0.0
    for i in range(100):
        task = F.TASKS[i % 2]
        zs, zt = r.normal(size=(1, 8)) * 2, r.normal(size=(1, 8)) * 2
        y = random_targets(r, task, 1, 8)
        kd = KDSpec(lam=float(r.uniform(0, 1)), temperature=tau, teachers=["t"], task=task)

        def loss(z):
            return float(kd_total_loss(T(z), T(y), kd, [T(zt)]).total)

        numeric = np.array([(loss(zs + h * e) - loss(zs - h * e)) / (2 * h) for e in np.eye(8)[:, None]])
        numeric = numeric.reshape(1, 8)
        analytic = kd_loss_grad(zs, y, kd, [zt])
        z = T(zs).requires_grad_(True)
        kd_total_loss(z, T(y), kd, [T(zt)]).total.backward()
        assert np.allclose(z.grad.numpy(), analytic, atol=1e-12)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
        worst = max(worst, float(rel.max()))
    print(f"criterion 2: tau={tau} max elementwise relative error {worst:.3e}")
    assert worst < 1e-4


# ---------------------------------------------------------------- 3

def windows(length, size=16, stride=10):
    return sum(1 for s in range(0, length) if s % stride == 0 and s + size <= length)


@crit(3)
def test_c3_patch_counts():
    counts = {}
    for t in range(1, 11):
        _, grid = patchify(np.zeros((128, 100 * t), dtype=np.float32))
        formula = 12 * math.ceil((100 * t - 16) / 10)
        assert grid.N == formula == windows(128) * windows(100 * t)
        counts[t] = grid.N
    print(f"criterion 3: N(t) = {counts}")
    assert counts[10] == 1188


# ---------------------------------------------------------------- 4

def brute_ap(scores, labels):
    n, precs = len(scores), []
    for i in range(n):
        if labels[i]:
            before = [j for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i)]
            precs.append((1 + sum(labels[j] for j in before)) / (1 + len(before)))
    return math.fsum(precs) / len(precs)


@crit(4)
def test_c4_map_oracle():
    r = np.random.default_rng(4)
    for k in range(200):
        n, c = int(r.integers(2, 33)), int(r.integers(1, 9))
        scores = r.random((n, c))
        if k % 2:
            scores = np.round(scores * 5) / 5
        labels = (r.random((n, c)) < 0.35).astype(int)
        labels[r.integers(0, n)] = 1
        aps = [brute_ap(list(scores[:, j]), list(labels[:, j])) for j in range(c) if labels[:, j].any()]
        assert mean_average_precision(scores, labels).value == math.fsum(aps) / len(aps)
    worked = mean_average_precision(np.array([[0.9], [0.8], [0.1]]), np.array([[1], [0], [1]])).value
    print(f"criterion 4: 200/200 exact matches; worked example AP = {worked!r}")
    assert worked == pytest.approx(5 / 6, abs=1e-15)


# ---------------------------------------------------------------- 5

@pytest.fixture(scope="module")
def reps():
    return np.random.default_rng(5).normal(size=(500, 32))


@crit(5)
def test_c5_svcca_self(reps):
    assert abs(svcca_similarity(reps, reps, var_fraction=0.30) - 1.0) <= 1e-6


@crit(5)
@pytest.mark.parametrize("seed", range(3))
def test_c5_svcca_invertible_affine(reps, seed):
    r = np.random.default_rng(100 + seed)
    a = r.normal(size=(32, 32))
    assert abs(np.linalg.det(a)) > 1e-6
    moved = reps @ a + r.normal(size=32)
    score = svcca_similarity(reps, moved, var_fraction=0.30)
    print(f"criterion 5: svcca(X, XA + b) = {score:.6f} with var_fraction 0.30")
    assert abs(score - 1.0) <= 1e-6


# ---------------------------------------------------------------- 6

def mean_abs_diff(n):
    return sum(abs(i - j) for i in range(n) for j in range(n)) / n ** 2


def with_cls(a, mass=0.3):
    h, n, _ = a.shape
    out = np.zeros((h, n + 1, n + 1))
    out[:, 1:, 1:] = (1 - mass) * a
    out[:, 1:, 0] = mass
    out[:, 0, :] = 1.0 / (n + 1)
    return out


@crit(6)
def test_c6_attention_distance():
    ident = [with_cls(np.eye(12)[None])]
    assert mean_attention_distance(ident, PatchGrid(3, 4), "freq") == [0.0]
    assert mean_attention_distance(ident, PatchGrid(3, 4), "time") == [0.0]
    (d,) = mean_attention_distance([with_cls(np.full((1, 3, 3), 1 / 3))], PatchGrid(1, 3), "time")
    assert abs(d - 8 / 9) <= 1e-9
    for nf, nt in [(2, 2), (2, 5), (4, 3)]:
        uni = [with_cls(np.full((2, nf * nt, nf * nt), 1 / (nf * nt)))]
        assert abs(mean_attention_distance(uni, PatchGrid(nf, nt), "freq")[0] - mean_abs_diff(nf)) <= 1e-9
        assert abs(mean_attention_distance(uni, PatchGrid(nf, nt), "time")[0] - mean_abs_diff(nt)) <= 1e-9
    model = build_model(model_spec("mini-ast", 5, input_frames=100), seed=6)
    grid = patch_grid(128, 100)
    specs = np.random.default_rng(6).normal(size=(8, 128, 100)).astype(np.float32)
    _, _, summary = collect(model, specs, F.MULTI_LABEL, batch_size=4, attention_grid=grid)
    assert (grid.n_freq, grid.n_time) == (12, 9)
    assert all(0 <= v <= 11 for v in summary.freq) and all(0 <= v <= 8 for v in summary.time)
    print(f"criterion 6: mini-ast freq {summary.freq} time {summary.time}")


# ---------------------------------------------------------------- 7

@crit(7)
def test_c7_augmentation_contracts():
    r = np.random.default_rng(7)
    spec = r.normal(size=(128, 1000)).astype(np.float32)
    g = lambda s=0: np.random.default_rng(s)  # noqa: E731
    # zero magnitude is the identity for every augmentation
    assert np.array_equal(F.mask(spec, "freq", 0, g()), spec)
    assert np.array_equal(F.mask(spec, "time", 0, g()), spec)
    assert np.array_equal(F.time_shift(spec, 0, g()), spec)
    assert np.array_equal(F.add_noise(spec, 0.0, g()), spec)
    y = np.eye(4)[[0, 1, 2, 3]]
    batch = np.stack([spec[:, :100]] * 4)
    mixed, my, chosen = F.mixup_batch(batch, y, 0.0, g())
    assert np.array_equal(mixed, batch) and np.array_equal(my, y) and not chosen.any()
    assert np.array_equal(F.smooth_labels(y, 0.0, F.SINGLE_LABEL), y)
    for seed in range(100):
        for axis, width, n in (("freq", 48, 128), ("time", 192, 1000)):
            out = F.mask(spec, axis, width, g(seed))
            diff = (out != spec).any(axis=1 if axis == "freq" else 0)
            idx = np.flatnonzero(diff)
            if len(idx):
                assert idx.max() - idx.min() + 1 <= width and len(idx) == idx.max() - idx.min() + 1
                assert idx.min() >= 0 and idx.max() < n
        shifted = F.time_shift(spec, 10, g(seed))
        assert sorted(c.tobytes() for c in shifted.T) == sorted(c.tobytes() for c in spec.T)
        noisy = F.add_noise(spec.astype(np.float64), 0.05, g(seed)) - spec
        assert noisy.min() >= 0.0 and noisy.max() <= 0.05
        a, b, w = r.normal(size=(16, 16)), r.normal(size=(16, 16)), float(r.random())
        s, _ = F.mixup((a, y[0]), (b, y[1]), w)
        assert np.all(s >= np.minimum(a, b) - 1e-12) and np.all(s <= np.maximum(a, b) + 1e-12)
    aug = F.AugmentSpec()
    cnn = train_config("fsd50k_cnn")
    shipped = (aug.freq_mask_max, aug.time_mask_max, aug.mixup_ratio, aug.noise_amp_max, aug.shift_max,
               aug.label_smoothing, cnn.spec_augment, cnn.mixup_ratio, cnn.noise_amp_max, cnn.shift_max,
               cnn.label_smoothing)
    print(f"criterion 7: shipped defaults {shipped}")
    assert shipped == (48, 192, 0.5, 0.05, 10, 0.1, (48, 192), 0.5, 0.05, 10, 0.1)


# ---------------------------------------------------------------- 8

@crit(8)
def test_c8_training_infrastructure():
    s = PlateauScheduler(1e-3, patience=2, factor=0.5)
    trace = [s.step(v) for v in (0.30, 0.40, 0.40, 0.40, 0.40, 0.40)]
    assert trace == [1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]

    model = build_model(model_spec("mini-ast", 6, input_frames=100), seed=8)
    theta = Checkpoint.from_model(model)
    same = weight_average([Checkpoint(theta.params, epoch=e) for e in (1, 2, 3)])
    assert all(np.array_equal(same.params[k], theta.params[k]) for k in theta.params)
    neg = Checkpoint({k: -v for k, v in theta.params.items()}, epoch=2)
    zero = weight_average([Checkpoint(theta.params, epoch=1), neg])
    assert all(not np.any(zero.params[k]) for k in theta.params)

    x = np.random.default_rng(8).normal(size=(4, 128, 100)).astype(np.float32)
    for task in F.TASKS:
        single = ensemble_predict([model], x, task)
        triple = ensemble_predict([model, model, model], x, task)
        assert np.allclose(single, triple, rtol=0, atol=1e-7)
    print(f"criterion 8: lr trace {trace}")


# ---------------------------------------------------------------- 9

def metrics_files(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("metrics.csv"))}


@crit(9)
def test_c9_end_to_end_smoke(tmp_path):
    runs = []
    for name in ("first", "rerun"):
        out = tmp_path / name
        start = time.perf_counter()
        assert main(["run", "--config", "mini_cnn_to_ast", "--seed", "0", "--output-dir", str(out)]) == 0
        runs.append((out, time.perf_counter() - start))
    (first, t1), (second, t2) = runs
    assert t1 < 15 * 60 and t2 < 15 * 60

    cfg = load_config("mini_cnn_to_ast")
    assert cfg.dataset.synthetic["num_classes"] == 10 and cfg.dataset.synthetic["n"] == 2000
    assert cfg.train_config(cfg.teachers[0], 0).epochs == 5
    kd = cfg.kd_spec()
    assert (kd.lam, kd.temperature, kd.consistent, cfg.student.model) == (0.5, 1.0, True, "mini-ast")

    expected = ["config.json", "eval/eval.json", "eval/eval_summary.csv", "probe/robustness.json",
                "probe/robustness.csv", "analyze/attention.json", "analyze/similarity.csv"]
    for run in ("teachers/cnn", "student", "baseline"):
        expected += [f"{run}/{f}" for f in ("config.json", "model.json", "metrics.csv", "losses.csv",
                                            "final/best.ckpt", "final/averaged.ckpt")]
    expected += [f"teachers/cnn/checkpoints/epoch_{k}.ckpt" for k in range(1, 6)]
    missing = [f for f in expected if not (first / f).exists()]
    assert not missing, missing

    a, b = metrics_files(first), metrics_files(second)
    assert set(a) == {"teachers/cnn/metrics.csv", "student/metrics.csv", "baseline/metrics.csv"}
    assert a == b

    assert main(["report", "--output-dir", str(first)]) == 0
    assert len(list((first / "report").glob("*.png"))) == 4
    assert (first / "report" / "summary.csv").exists()

    evals = json.loads((first / "eval" / "eval.json").read_text())["reports"]
    val = {n: float((first / d / "metrics.csv").read_text().splitlines()[-1].split(",")[2])
           for n, d in (("student", "student"), ("baseline", "baseline"), ("teacher", "teachers/cnn"))}
    print(f"criterion 9: runtimes {t1:.0f} s / {t2:.0f} s; final val mAP teacher {val['teacher']:.4f}, "
          f"KD student {val['student']:.4f}, no-KD baseline {val['baseline']:.4f}; test mAP KD "
          f"{evals['student']['value']:.4f} vs no-KD {evals['baseline']['value']:.4f}")


# --------------------------------------------------------------- 10

@crit(10)
def test_c10_consistent_equals_conventional_without_augmentation():
    data = make_synthetic(320, 5, 100, seed=10).split([0.8, 0.2], seed=0)
    teacher = build_model(model_spec("mini-cnn", 5, input_frames=100), seed=1)
    cfg = train_config("mini", epochs=1, batch_size=32, mixup_ratio=0.0, spec_augment=(0, 0),
                       noise_amp_max=0.0, shift_max=0, label_smoothing=0.0, seed=3)
    losses = {}
    for consistent in (True, False):
        kd = KDSpec(lam=0.5, teachers=["t"], consistent=consistent, task=F.MULTI_LABEL)
        art = train(build_model(model_spec("mini-ast", 5, input_frames=100), seed=2), data, cfg,
                    kd=kd, teachers=[teacher])
        losses[consistent] = art.batch_losses
    assert len(losses[True]) == 8
    assert losses[True] == losses[False]
    print(f"criterion 10: {len(losses[True])} batches, per-batch losses identical")


# --------------------------------------------------------------- 11

@crit(11)
@pytest.mark.parametrize("n", [2, 3, 4])
def test_c11_multi_teacher_weighting(n):
    r = np.random.default_rng(11 + n)
    for task in F.TASKS:
        for _ in range(20):
            zs = r.normal(size=(3, 6)) * 2
            zts = [r.normal(size=(3, 6)) * 2 for _ in range(n)]
            y = random_targets(r, task, 3, 6)
            lam, tau = float(r.uniform(0, 1)), float(r.choice([0.5, 1.0, 2.5]))
            kd = KDSpec(lam=lam, temperature=tau, teachers=[f"t{i}" for i in range(n)],
                        teacher_mode="multi_loss", task=task)
            parts = kd_total_loss(T(zs), T(y), kd, [T(z) for z in zts])
            assert parts.weights == [(1 - lam) / n] * n
            single = [float(kd_total_loss(T(zs), T(y), KDSpec(lam=0.0, temperature=tau, teachers=["t"],
                                                              task=task), [T(z)]).distill)
                      for z in zts]
            recomposed = lam * float(parts.ground_truth) + sum((1 - lam) / n * d for d in single)
            assert abs(float(parts.total) - recomposed) <= 1e-9
            assert abs(float(parts.total) - oracle_total(zs, y, zts, lam, tau, task)) <= 1e-9

            ens = KDSpec(lam=lam, temperature=tau, teachers=[f"t{i}" for i in range(n)],
                         teacher_mode="ensemble", task=task)
            one = KDSpec(lam=lam, temperature=tau, teachers=["t"], task=task)
            dup = float(kd_total_loss(T(zs), T(y), ens, [T(zts[0])] * n).total)
            assert abs(dup - float(kd_total_loss(T(zs), T(y), one, [T(zts[0])]).total)) <= 1e-9


# --------------------------------------------------------------- 12

def cv_config(out, seeds):
    return parse_config({
        "seed": 0, "output_dir": str(out),
        "dataset": {"task": "single_label", "split": [0.7, 0.15, 0.15],
                    "synthetic": {"n": 250, "num_classes": 5, "frames": 100, "n_folds": 5}},
        "teachers": [{"name": "cnn", "model": "mini-cnn",
                      "train": {"include": "esc50_cnn", "epochs": 1, "batch_size": 32}}],
        "student": {"model": "mini-ast", "train": {"include": "esc50_ast", "epochs": 1, "batch_size": 32},
                    "kd": {"lam": 0.5, "temperature": 1.0, "teachers": ["cnn"]}},
        "cv": {"folds": 5, "repeats": 3, "seeds": seeds},
    })


@crit(12)
def test_c12_cross_validation_protocol(tmp_path, monkeypatch):
    import cmkd.expcli.runner as runner

    calls = []
    real_train = runner.train

    def counting_train(model, data, cfg, **kw):
        calls.append((model.spec.preset, len(data[0]) + len(data[1])))
        return real_train(model, data, cfg, **kw)

    monkeypatch.setattr(runner, "train", counting_train)
    with Experiment(cv_config(tmp_path / "cv", [7, 7, 7])) as exp:
        res = exp.cross_validate()
    assert len(res["per_fold"]) == 3 and all(len(f) == 5 for f in res["per_fold"])
    teachers = [c for c in calls if c[0] == "mini-cnn"]
    assert len(teachers) == 15 and all(n == 200 for _, n in teachers)  # one teacher per fold, 4/5 of data
    assert res["std"] == 0.0
    saved = json.loads((tmp_path / "cv" / "cv" / "cv.json").read_text())
    assert saved["mean"] == res["mean"] and saved["std"] == 0.0
    print(f"criterion 12: accuracy {res['mean']:.4f} +/- {res['std']:.4f} (identical seeds), "
          f"per repeat {res['per_repeat']}")
