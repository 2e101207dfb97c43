"""Report emission: JSON metrics, per-video CSV score series, and the
matplotlib figures rendered alongside them.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport
from .features import VideoBag
from .metrics import ScoreSeries


def write_report(report: EvalReport, series: dict[str, ScoreSeries],
                 bags: list[VideoBag], out_json, build_id: str = "",
                 config_echo: dict | None = None, figures: bool = True) -> Path:
    """Write the JSON report plus one CSV (and score-curve PNG) per
    video under ``<stem>_videos/``; returns the JSON path."""
    out_json = Path(out_json)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    video_dir = out_json.parent / f"{out_json.stem}_videos"
    video_dir.mkdir(exist_ok=True)
    truth_by_id = {b.video_id: b for b in bags}

    payload = report.to_dict()
    payload["build_id"] = build_id
    payload["config"] = config_echo or {}
    for entry in payload["videos"]:
        vid = entry["video_id"]
        s = series[vid]
        csv_path = video_dir / f"{vid}.csv"
        _write_frame_csv(s, csv_path)
        entry["csv"] = str(csv_path)
        if figures:
            png_path = video_dir / f"{vid}.png"
            _render_score_curve(s, truth_by_id.get(vid), png_path)
            entry["figure"] = str(png_path)
    if figures:
        overview = out_json.parent / f"{out_json.stem}_overview.png"
        _render_overview(report, series, truth_by_id, overview)
        payload["overview_figure"] = str(overview)

    with open(out_json, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return out_json


def _write_frame_csv(s: ScoreSeries, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("frame,score\n")
        for i, v in enumerate(s.frame_scores):
            fh.write(f"{i},{v:.6f}\n")


def _render_score_curve(s: ScoreSeries, bag: VideoBag | None, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 2.4))
    frames = np.arange(len(s.frame_scores))
    ax.plot(frames, s.frame_scores, lw=1.0, color="tab:blue", label="score")
    ax.axhline(0.5, color="gray", lw=0.6, ls="--")
    if bag is not None and bag.snippet_labels is not None and bag.snippet_labels.any():
        from .evaluation import frame_truth
        truth = frame_truth(bag)
        ax.fill_between(frames, 0, 1, where=truth > 0, color="tab:red",
                        alpha=0.15, label="anomalous")
    ax.set_xlim(0, max(len(frames) - 1, 1))
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("frame")
    ax.set_ylabel("anomaly score")
    ax.set_title(s.video_id, fontsize=9)
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _render_overview(report: EvalReport, series: dict[str, ScoreSeries],
                     truth_by_id: dict[str, VideoBag], path: Path) -> None:
    normal, abnormal = [], []
    for vid, s in series.items():
        bag = truth_by_id.get(vid)
        (abnormal if bag is not None and bag.label == 1 else normal).append(s.frame_scores)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3))
    bins = np.linspace(0, 1, 41)
    if normal:
        axes[0].hist(np.concatenate(normal), bins=bins, alpha=0.6,
                     label="normal frames", color="tab:green", density=True)
    if abnormal:
        axes[0].hist(np.concatenate(abnormal), bins=bins, alpha=0.6,
                     label="abnormal-video frames", color="tab:red", density=True)
    axes[0].set_xlabel("frame score")
    axes[0].set_ylabel("density")
    axes[0].legend(fontsize=7)
    axes[0].set_title("score distributions", fontsize=9)

    names = ["auc", "anomaly_auc", "ap", "far"]
    values = [report.auc, report.anomaly_auc, report.ap, report.far]
    axes[1].bar(names, values, color="tab:blue")
    axes[1].set_ylim(0, 1.05)
    for x, v in zip(names, values):
        axes[1].text(x, v + 0.02, f"{v:.3f}", ha="center", fontsize=7)
    axes[1].set_title("pooled metrics", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_ablation_chart(rows: list[dict], path) -> None:
    """Bar chart of AUC per ablation configuration."""
    labels = [r["config"] for r in rows]
    aucs = [r["auc"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows)), 3))
    bars = ax.bar(labels, aucs, color=["tab:blue"] + ["tab:orange"] * (len(rows) - 1))
    ax.set_ylabel("frame AUC")
    ax.set_ylim(0, 1.05)
    for bar, v in zip(bars, aucs):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.3f}",
                ha="center", fontsize=7)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def ablation_markdown(rows: list[dict]) -> str:
    """Markdown table of the ablation grid results."""
    lines = ["| config | auc | anomaly_auc | ap | far |",
             "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['config']} | {r['auc']:.4f} | {r['anomaly_auc']:.4f} "
                     f"| {r['ap']:.4f} | {r['far']:.4f} |")
    return "\n".join(lines) + "\n"
