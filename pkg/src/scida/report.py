"""Run reports: JSON/CSV tables with PNG figures rendered next to them."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import MODES

CURVE_COLUMNS = ("epoch", "wfl", "dis", "selfcorr", "churn", "op", "or", "of1", "of2")
METRIC_KEYS = ("op", "or", "of1", "of2")
_DPI = 120


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> Path:
    plt = _pyplot()
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def _blank(value):
    return "" if value is None else value


def write_curve_csv(records: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in records:
            m = (r.get("metrics") or {}).get("all") or {}
            w.writerow(
                [r["epoch"], _blank(r["wfl"]), _blank(r["dis"]), _blank(r["selfcorr"]), r["churn"]]
                + [_blank(m.get(k)) for k in METRIC_KEYS]
            )
    return path


def plot_training_curves(records: Sequence[dict], path: str | Path) -> Path:
    plt = _pyplot()
    epochs = [r["epoch"] for r in records]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("wfl", "dis", "selfcorr", "churn"):
        ys = [np.nan if r[key] is None else r[key] for r in records]
        if not all(np.isnan(ys)):
            ax_loss.plot(epochs, ys, marker="o", ms=3, label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_title("losses / churn")
    ax_loss.legend(frameon=False)
    for mode, style in zip(MODES, ("-", "--")):
        for key in METRIC_KEYS:
            ys = [
                np.nan if not r.get("metrics") else r["metrics"][mode][key] for r in records
            ]
            if not all(np.isnan(ys)):
                ax_metric.plot(epochs, ys, style, marker="o", ms=3, label=f"{key} ({mode})")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylim(0, 1)
    ax_metric.set_title("target metrics")
    ax_metric.legend(frameon=False, fontsize=7, ncol=2)
    return _save(fig, Path(path))


def plot_correlation(counts: np.ndarray, categories: Sequence[str], path: str | Path) -> Path:
    plt = _pyplot()
    counts = np.asarray(counts, dtype=float)
    sums = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
    k = len(categories)
    fig, ax = plt.subplots(figsize=(0.45 * k + 2.5, 0.45 * k + 2))
    im = ax.imshow(norm, cmap="viridis", vmin=0, vmax=max(norm.max(), 1e-9))
    ax.set_xticks(range(k), categories, rotation=90, fontsize=7)
    ax.set_yticks(range(k), categories, fontsize=7)
    ax.set_title("pseudo-label correlation")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, Path(path))


def emit_report(train_log, out_dir: str | Path, config: dict | None = None) -> list[Path]:
    """Write metrics JSON, curve CSV, correlation CSV/JSON, config copy and figures."""
    if not len(train_log):
        raise ValueError("cannot report an empty training log")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    final = train_log.final
    metrics_doc = {
        "epochs": len(train_log),
        "stop_reason": train_log.stop_reason,
        "log_hash": train_log.hash(),
        "reports": list((final.get("metrics") or {}).values()),
    }
    p = out / "metrics.json"
    p.write_text(json.dumps(metrics_doc, indent=2))
    written.append(p)

    cfg = config if config is not None else train_log.config
    p = out / "config.json"
    if not p.exists():
        p.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    written.append(p)

    written.append(write_curve_csv(train_log.records, out / "curve.csv"))
    written.append(plot_training_curves(train_log.records, out / "curves.png"))

    if train_log.correlation_counts is not None:
        counts = np.asarray(train_log.correlation_counts, dtype=np.int64)
        cats = train_log.categories or [str(i) for i in range(counts.shape[0])]
        sums = counts.sum(axis=1, keepdims=True)
        norm = np.divide(counts, sums, out=np.zeros(counts.shape), where=sums > 0)
        p = out / "correlation_counts.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", *cats])
            for name, row in zip(cats, counts):
                w.writerow([name, *row.tolist()])
        written.append(p)
        p = out / "correlation.json"
        p.write_text(json.dumps({"categories": cats, "normalized": norm.tolist()}))
        written.append(p)
        written.append(plot_correlation(counts, cats, out / "correlation.png"))
    return written


def write_ablation(rows: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Delta-sweep table (CSV + JSON) and a metrics-vs-delta figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "ablation.json"
    p.write_text(json.dumps(list(rows), indent=1, sort_keys=True))
    written.append(p)

    p = out / "ablation.csv"
    header = ["delta", "epochs"] + [f"{mode}_{k}" for mode in MODES for k in METRIC_KEYS] + ["error"]
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            cells = [r["delta"], r.get("epochs", "")]
            for mode in MODES:
                m = r.get(mode) or {}
                cells += [_blank(m.get(k)) for k in METRIC_KEYS]
            w.writerow(cells + [r.get("error", "")])
    written.append(p)

    ok = [r for r in rows if "error" not in r and r.get("all")]
    if ok:
        plt = _pyplot()
        fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
        deltas = [r["delta"] for r in ok]
        for ax, mode in zip(axes, MODES):
            for key in METRIC_KEYS:
                ax.plot(deltas, [r[mode][key] for r in ok], marker="o", label=key.upper())
            ax.set_xlabel("delta")
            ax.set_title(mode)
        axes[0].set_ylabel("score")
        axes[0].legend(frameon=False)
        written.append(_save(fig, out / "ablation.png"))

        fig, ax = plt.subplots(figsize=(6, 4))
        for r in ok:
            curve = [c for c in r.get("curve", []) if "all" in c]
            ax.plot([c["epoch"] for c in curve], [c["all"]["of1"] for c in curve], label=f"delta={r['delta']:.2f}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("OF1 (all)")
        ax.legend(frameon=False)
        written.append(_save(fig, out / "ablation_curves.png"))
    return written
