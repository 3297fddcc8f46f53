"""Static report for a finished output directory: figures, summary CSV and JSON."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

log = logging.getLogger(__name__)

FORMATS = ("csv", "json", "plots")
PLOTS = {
    "learning_curves": "learning_curves.png",
    "robustness": "robustness.png",
    "attention": "attention_distance.png",
    "similarity": "similarity.png",
}
STYLE = {"font.size": 9, "axes.titlesize": 10, "legend.fontsize": 8, "figure.dpi": 120,
         "axes.spines.top": False, "axes.spines.right": False}


class ReportError(RuntimeError):
    pass


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def find_runs(run_dir: Path) -> dict[str, Path]:
    """Training runs under ``run_dir`` keyed by model name (teachers, student, baseline).

    ``run_dir`` may also be a single training run.
    """
    run_dir = Path(run_dir)
    if (run_dir / "metrics.csv").exists():
        return {run_dir.name: run_dir}
    runs = {}
    for metrics in sorted(run_dir.glob("teachers/*/metrics.csv")):
        runs[metrics.parent.name] = metrics.parent
    for name in ("student", "baseline"):
        if (run_dir / name / "metrics.csv").exists():
            runs[name] = run_dir / name
    config = run_dir / "config.json"
    if config.exists():  # externally trained teachers
        for t in json.loads(config.read_text()).get("config", {}).get("teachers", []):
            ext = t.get("run_dir")
            if ext and (Path(ext) / "metrics.csv").exists():
                runs[t["name"]] = Path(ext)
    return runs


def load_history(run: Path) -> dict:
    rows = _read_csv(run / "metrics.csv")
    hist = {k: np.array([float(r[k]) for r in rows]) for k in ("epoch", "train_loss", "val_metric", "lr")}
    summary = run / "summary.json"
    hist["summary"] = json.loads(summary.read_text()) if summary.exists() else {}
    return hist


# --------------------------------------------------------------- figures

def model_colors(names) -> dict:
    """One colour per model, shared by every figure of a report."""
    cycle = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    return {n: cycle[i % len(cycle)] for i, n in enumerate(names)}


def plot_learning_curves(histories: dict, path: Path, colors: dict):
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9, 3.4))
    for name, h in histories.items():
        c = colors[name]
        ax_loss.plot(h["epoch"], h["train_loss"], marker="o", ms=3, color=c, label=name)
        ax_val.plot(h["epoch"], h["val_metric"], marker="o", ms=3, color=c, label=name)
        best = int(np.argmax(h["val_metric"]))
        ax_val.plot(h["epoch"][best], h["val_metric"][best], marker="*", ms=13,
                    color=c, markeredgecolor="k", linestyle="none")
    for ax in (ax_loss, ax_val):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax_loss.set(xlabel="epoch", ylabel="training loss", title="training loss")
    ax_val.set(xlabel="epoch", ylabel="validation metric", title="validation (★ best epoch)")
    ax_val.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_robustness(curves: list[dict], path: Path, colors: dict):
    kinds = list(dict.fromkeys(c["kind"] for c in curves))
    fig, axes = plt.subplots(1, len(kinds), figsize=(3.2 * len(kinds), 3.0), squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        for c in (c for c in curves if c["kind"] == kind):
            ax.errorbar(c["levels"], c["mean"], yerr=c["std"], marker="o", ms=3, capsize=2,
                        color=colors.get(c["model"]), label=c["model"])
        ax.set(title=kind.replace("_", " "), xlabel="level", ylabel="relative drop (%)")
    axes[0][0].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_attention(entries: list[dict], path: Path, colors: dict):
    models = list(dict.fromkeys(e["model"] for e in entries))
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.0), sharex=True)
    for ax, axis in zip(axes, ("freq", "time")):
        for m in models:
            pts = sorted((e["layer"], e["distance"]) for e in entries if e["model"] == m and e["axis"] == axis)
            if pts:
                layers, dist = zip(*pts)
                ax.plot(np.array(layers) + 1, dist, marker="o", ms=3, color=colors.get(m), label=m)
        ax.set(title=f"{axis} axis", xlabel="layer", ylabel="mean attention distance (patches)")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    axes[0].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_similarity(matrices: dict, names: list[str], path: Path):
    fig, axes = plt.subplots(1, len(matrices), figsize=(3.6 * len(matrices) + 0.6, 3.4), squeeze=False)
    for ax, (measure, m) in zip(axes[0], matrices.items()):
        m = np.asarray(m)
        lo = -1 if measure == "pcc" else 0
        im = ax.imshow(m, vmin=lo, vmax=1, cmap="viridis")
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_yticks(range(len(names)), names)
        for i in range(len(names)):
            for j in range(len(names)):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="w" if (m[i, j] - lo) / (1 - lo) < 0.6 else "k")
        ax.set_title(measure.upper())
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------- report

def emit_report(run_dir, formats=FORMATS, out_dir=None) -> dict:
    """Write figures and tables for ``run_dir``; returns written paths and notices.

    Figures whose inputs are absent (no attention captured, no probe stage)
    are skipped with a notice instead of failing.
    """
    run_dir = Path(run_dir)
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}; known: {FORMATS}")
    if not run_dir.is_dir() or not any(run_dir.iterdir()):
        raise ReportError(f"{run_dir}: empty or missing run directory")
    runs = find_runs(run_dir)
    if not runs:
        raise ReportError(f"{run_dir}: no metric history found (metrics.csv)")
    out = Path(out_dir) if out_dir else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    histories = {name: load_history(p) for name, p in runs.items()}
    written, notices = [], []

    test_metrics = {}
    eval_json = run_dir / "eval" / "eval.json"
    if eval_json.exists():
        payload = json.loads(eval_json.read_text())
        test_metrics = {k: v for k, v in payload.get("reports", {}).items()}

    rows = []
    for name, h in histories.items():
        s = h["summary"]
        rep = test_metrics.get(name, {})
        rows.append({
            "model": name,
            "epochs": len(h["epoch"]),
            "best_epoch": s.get("best_epoch", int(h["epoch"][np.argmax(h["val_metric"])])),
            "best_val": float(np.max(h["val_metric"])),
            "final_val": float(h["val_metric"][-1]),
            "averaged_val": s.get("averaged_metric", ""),
            "test_metric": rep.get("metric_name", ""),
            "test_value": rep.get("value", ""),
        })

    if "csv" in formats:
        path = out / "summary.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        written.append(path)

    if "plots" in formats:
        with plt.rc_context(STYLE):
            colors = model_colors(histories)
            path = out / PLOTS["learning_curves"]
            plot_learning_curves(histories, path, colors)
            written.append(path)

            robustness = run_dir / "probe" / "robustness.json"
            if robustness.exists():
                path = out / PLOTS["robustness"]
                plot_robustness(json.loads(robustness.read_text())["curves"], path, colors)
                written.append(path)
            else:
                notices.append("robustness plot skipped: no probe outputs")
                (out / PLOTS["robustness"]).unlink(missing_ok=True)  # never leave a stale figure

            attention = run_dir / "analyze" / "attention.json"
            entries = json.loads(attention.read_text()) if attention.exists() else []
            if entries:
                path = out / PLOTS["attention"]
                plot_attention(entries, path, colors)
                written.append(path)
            else:
                notices.append("attention plot skipped: no attention maps were captured")
                (out / PLOTS["attention"]).unlink(missing_ok=True)  # never leave a stale figure

            analyze = run_dir / "analyze" / "analyze.json"
            sim = json.loads(analyze.read_text()) if analyze.exists() else {}
            if sim.get("similarity"):
                path = out / PLOTS["similarity"]
                plot_similarity(sim["similarity"], sim["models"], path)
                written.append(path)
            else:
                notices.append("similarity plot skipped: no analyze outputs")
                (out / PLOTS["similarity"]).unlink(missing_ok=True)  # never leave a stale figure

    if "json" in formats:
        path = out / "summary.json"
        path.write_text(json.dumps({"models": rows, "notices": notices}, indent=2) + "\n")
        written.append(path)

    for n in notices:
        log.warning(n)
    return {"written": [str(p) for p in written], "notices": notices}
