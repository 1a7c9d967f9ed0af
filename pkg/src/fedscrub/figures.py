"""Matplotlib renderings written next to the delimited report output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import ReportRow, _row_key  # noqa: E402

_ARM_COLORS = {"raw": "#4878d0", "retrained": "#ee854a", "unlearned": "#6acc64"}


def render_metric_figure(rows, path, metric: str = "mrr") -> Path:
    """Grouped bars: one group per (scope, split), one bar per arm and model."""
    rows = sorted(rows, key=_row_key)
    models = sorted({r.model for r in rows})
    arms = []
    for r in rows:
        if r.arm not in arms:
            arms.append(r.arm)
    groups = []
    for r in rows:
        key = (r.scope, r.split)
        if key not in groups:
            groups.append(key)

    fig, axes = plt.subplots(1, len(models), figsize=(1.2 + 5.2 * len(models), 3.6),
                             squeeze=False)
    for ax, model in zip(axes[0], models):
        width = 0.8 / max(len(arms), 1)
        for k, arm in enumerate(arms):
            xs, ys = [], []
            for g, key in enumerate(groups):
                match = [r for r in rows
                         if r.model == model and r.arm == arm
                         and (r.scope, r.split) == key and metric in r.metrics]
                if match:
                    xs.append(g + (k - (len(arms) - 1) / 2) * width)
                    ys.append(match[0].metrics[metric])
            ax.bar(xs, ys, width=width, label=arm,
                   color=_ARM_COLORS.get(arm), edgecolor="black", linewidth=0.4)
        ax.set_xticks(range(len(groups)))
        ax.set_xticklabels([f"{s}\n{sp}" for s, sp in groups], fontsize=8)
        ax.set_ylabel(metric)
        ax.set_title(model)
        ax.legend(fontsize=8)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def render_loss_figure(arm_logs: dict, path) -> Path:
    """Per-round mean losses, one line per arm; solid ns, dotted distillation."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for arm, rows in arm_logs.items():
        if not rows:
            continue
        rounds = [r["round"] for r in rows]
        color = _ARM_COLORS.get(arm)
        ax.plot(rounds, [r["mean_ns_loss"] for r in rows],
                label=f"{arm} ns", color=color)
        ax.plot(rounds, [r["mean_distill_loss"] for r in rows],
                label=f"{arm} distill", color=color, linestyle=":")
    ax.set_xlabel("round")
    ax.set_ylabel("mean loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def read_round_log(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            rec = dict(zip(header, vals))
            rows.append({
                "round": int(rec["round"]),
                "mean_ns_loss": float(rec["mean_ns_loss"]),
                "mean_distill_loss": float(rec["mean_distill_loss"]),
            })
    return rows
