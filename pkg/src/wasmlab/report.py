"""Serialization of exploit reports and calibration data, plus figures.

Figures render through the Agg backend straight to files; nothing here
needs a display. Delimited output is tab-separated with a header row.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .exploits import CalibrationTable, ExploitReport


def write_json(path, payload) -> Path:
    path = Path(path)
    if isinstance(payload, ExploitReport):
        text = payload.to_json()
    else:
        text = json.dumps(payload, indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_tsv(path, columns: Sequence[str],
              rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(str(cell) for cell in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# -- exploit matrix ----------------------------------------------------------

MATRIX_COLUMNS = ("scenario", "vector", "hardened", "success", "requests",
                  "fault")


def matrix_rows(reports: Sequence[ExploitReport]) -> List[tuple]:
    rows = []
    for r in reports:
        rows.append((r.scenario, r.vector, r.hardened, r.success,
                     r.requests, r.evidence.get("fault", "-")))
    return rows


def render_matrix(reports: Sequence[ExploitReport], path) -> Path:
    """One cell per run: green for success, gray for contained."""
    path = Path(path)
    labels = [f"{r.scenario}/{r.vector}" for r in reports if not r.hardened]
    plain = [r for r in reports if not r.hardened]
    hard = [r for r in reports if r.hardened]
    fig, ax = plt.subplots(figsize=(max(6, len(labels) * 1.1), 2.6))
    for col, report in enumerate(plain):
        ax.add_patch(plt.Rectangle(
            (col, 1), 0.92, 0.92,
            color="#4caf50" if report.success else "#9e9e9e"))
    for col, report in enumerate(hard):
        ax.add_patch(plt.Rectangle(
            (col, 0), 0.92, 0.92,
            color="#4caf50" if report.success else "#9e9e9e"))
    ax.set_xlim(0, max(len(plain), 1))
    ax.set_ylim(0, 2)
    ax.set_xticks([c + 0.46 for c in range(len(labels))])
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_yticks([0.46, 1.46])
    ax.set_yticklabels(["hardened", "plain"], fontsize=8)
    ax.set_title("exploit outcomes (green = attacker success)", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# -- calibration -------------------------------------------------------------

CALIBRATION_COLUMNS = ("kind", "sample", "steps", "elapsed_s")


def calibration_rows(table: CalibrationTable) -> List[tuple]:
    rows = []
    for i, (steps, elapsed) in enumerate(zip(table.hit_steps,
                                             table.hit_elapsed)):
        rows.append(("hit", i, steps, f"{elapsed:.6f}"))
    for i, (steps, elapsed) in enumerate(zip(table.miss_steps,
                                             table.miss_elapsed)):
        rows.append(("miss", i, steps, f"{elapsed:.6f}"))
    return rows


def format_calibration_text(table: CalibrationTable) -> str:
    """Aligned-column text of the hit/miss table and derived threshold."""
    rows = calibration_rows(table)
    header = ("kind", "sample", "steps", "elapsed_s")
    widths = [max(len(str(v)) for v in [h] + [r[i] for r in rows])
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    for row in rows:
        lines.append("  ".join(str(v).ljust(widths[i])
                               for i, v in enumerate(row)))
    lines.append("")
    lines.append(f"threshold_steps   {table.threshold_steps:.1f}")
    lines.append(f"threshold_elapsed {table.threshold_elapsed:.6f}")
    lines.append(f"ratio             {table.ratio:.1f}")
    return "\n".join(lines)


def render_calibration(table: CalibrationTable, path) -> Path:
    """Scatter of per-sample step counts on a log axis with the threshold."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.scatter(range(len(table.hit_steps)), table.hit_steps,
               color="#c62828", label="hit probes", zorder=3)
    ax.scatter(range(len(table.miss_steps)), table.miss_steps,
               color="#1565c0", label="miss probes", zorder=3)
    ax.axhline(table.threshold_steps, color="#555", linestyle="--",
               label=f"threshold {table.threshold_steps:.0f}")
    ax.set_yscale("log")
    ax.set_xlabel("sample")
    ax.set_ylabel("engine steps")
    ax.set_title(f"timing oracle calibration (ratio {table.ratio:.0f}x)",
                 fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
