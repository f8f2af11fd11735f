"""Ablation report assembly and rendering: CSV, plain-text table, and
matplotlib figures written next to the delimited output.

A report cell is one (variant, task, seed) probe result; the table view
aggregates over seeds, flags per-group co-best variants, and carries deltas
against a named baseline. Missing cells render as explicit holes and are
counted so callers can exit nonzero.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HOLE = "--"


@dataclass
class ReportCell:
    variant: str
    task: str
    seed: int
    val_acc: float
    test_acc: float
    selected_epoch: int


@dataclass
class AblationReport:
    variants: list
    tasks: list
    seeds: list
    cells: list = field(default_factory=list)
    baseline: str | None = None
    audits: dict = field(default_factory=dict)  # variant -> {"gap": ..., ...}

    def add(self, cell):
        self.cells.append(cell)

    def cell_map(self):
        out = {}
        for c in self.cells:
            out[(c.variant, c.task, c.seed)] = c
        return out

    def missing(self):
        have = set(self.cell_map())
        return [
            (v, t, s)
            for v in self.variants
            for t in self.tasks
            for s in self.seeds
            if (v, t, s) not in have
        ]

    def mean_test(self, variant, task):
        vals = [c.test_acc for c in self.cells if c.variant == variant and c.task == task]
        return sum(vals) / len(vals) if vals else None

    def group_of(self, variant):
        return variant.split(".")[0] if "." in variant else variant


def write_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "task", "seed", "val_acc", "test_acc", "selected_epoch"])
        for c in sorted(report.cells, key=lambda c: (c.variant, c.task, c.seed)):
            writer.writerow(
                [c.variant, c.task, c.seed, f"{c.val_acc:.6f}", f"{c.test_acc:.6f}",
                 c.selected_epoch]
            )


def read_csv(path):
    cells = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cells.append(
                ReportCell(
                    variant=row["variant"],
                    task=row["task"],
                    seed=int(row["seed"]),
                    val_acc=float(row["val_acc"]),
                    test_acc=float(row["test_acc"]),
                    selected_epoch=int(row["selected_epoch"]),
                )
            )
    return cells


def render_table(report):
    """Mean-over-seeds matrix with per-group co-best markers and baseline deltas."""
    lines = []
    width = max([len(v) for v in report.variants] + [8])
    header = "variant".ljust(width) + "".join(f"{t:>22}" for t in report.tasks)
    lines.append(header)
    lines.append("-" * len(header))

    means = {
        (v, t): report.mean_test(v, t) for v in report.variants for t in report.tasks
    }
    best = {}
    for t in report.tasks:
        for v in report.variants:
            g = report.group_of(v)
            val = means[(v, t)]
            if val is None:
                continue
            cur = best.setdefault((g, t), val)
            if val > cur:
                best[(g, t)] = val

    for v in report.variants:
        row = v.ljust(width)
        for t in report.tasks:
            val = means[(v, t)]
            if val is None:
                row += f"{HOLE:>22}"
                continue
            mark = "*" if abs(val - best[(report.group_of(v), t)]) < 1e-12 else " "
            delta = ""
            if report.baseline and report.baseline != v:
                base = means.get((report.baseline, t))
                if base is not None:
                    delta = f" ({val - base:+.3f})"
            row += f"{val:.3f}{mark}{delta}".rjust(22)
        lines.append(row)
    lines.append("")
    lines.append("* = best within ablation group (ties co-marked)")
    if report.baseline:
        lines.append(f"(+/-) = delta vs baseline {report.baseline}")
    if report.audits:
        lines.append("")
        lines.append("similarity audit (same-snippet cross-language vs random pairs):")
        for v in sorted(report.audits):
            a = report.audits[v]
            lines.append(
                f"  {v}: same={a['same_snippet_mean']:.4f} "
                f"random={a['random_pair_mean']:.4f} gap={a['gap']:+.4f}"
            )
    holes = report.missing()
    if holes:
        lines.append("")
        lines.append(f"MISSING CELLS ({len(holes)}):")
        for v, t, s in holes:
            lines.append(f"  {v} / {t} / seed {s}")
    return "\n".join(lines) + "\n"


def render_task_figure(report, task, path):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    xs, heights, errs = [], [], []
    for v in report.variants:
        vals = [c.test_acc for c in report.cells if c.variant == v and c.task == task]
        xs.append(v)
        heights.append(float(sum(vals) / len(vals)) if vals else 0.0)
        errs.append(float(max(vals) - min(vals)) / 2 if len(vals) > 1 else 0.0)
    ax.bar(xs, heights, yerr=errs, capsize=3, color="#4878cf")
    ax.set_ylabel("test top-1")
    ax.set_title(task)
    ax.set_ylim(0, 1)
    for spine in ("top", "right"):
        ax.spines[spine].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_figure(runlogs, path):
    """Loss components over steps, one subplot per component."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), sharex=True)
    for name, records in runlogs.items():
        steps = [r["step"] for r in records if r.get("kind") == "step"]
        for ax, key in zip(axes, ("loss_cross", "loss_video", "loss_audio")):
            ax.plot(steps, [r[key] for r in records if r.get("kind") == "step"],
                    label=name, linewidth=1.0)
    for ax, key in zip(axes, ("cross-modal", "within-video", "within-audio")):
        ax.set_title(key)
        ax.set_xlabel("step")
        for spine in ("top", "right"):
            ax.spines[spine].set_visible(False)
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_report(report, out_dir, runlogs=None):
    """Write CSV + table + figures; returns (paths, n_missing)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "table": out / "report.txt"}
    write_csv(report, paths["csv"])
    table = render_table(report)
    paths["table"].write_text(table, encoding="utf-8")
    for task in report.tasks:
        fig_path = out / f"fig_{task.replace('(', '_').replace(')', '').lower()}.png"
        render_task_figure(report, task, fig_path)
        paths[f"fig:{task}"] = fig_path
    if runlogs:
        paths["fig:losses"] = out / "fig_losses.png"
        render_loss_figure(runlogs, paths["fig:losses"])
    summary = {
        "variants": report.variants,
        "tasks": report.tasks,
        "seeds": report.seeds,
        "baseline": report.baseline,
        "missing": [list(m) for m in report.missing()],
        "audits": report.audits,
    }
    paths["summary"] = out / "report_summary.json"
    with open(paths["summary"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths, len(report.missing())
