"""CSV/JSON reports and dependency-free SVG bar charts."""

from __future__ import annotations

import csv
import io
import json
from html import escape
from pathlib import Path
from typing import Sequence

from .exceptions import ReportIOError, ValidationError
from .pruning import StageResult
from .traceio import atomic_write_text

__all__ = [
    "REPORT_COLUMNS",
    "audit_rows",
    "format_csv",
    "write_rows",
    "read_rows",
    "write_summary",
    "read_summary",
    "bar_chart_svg",
    "render_plots",
]

REPORT_COLUMNS = (
    "stage_id", "layer", "prev_layer", "epoch_first", "epoch_last",
    "divergence", "score", "selected", "mask_bit",
)


def audit_rows(audit: Sequence[StageResult]) -> list[dict]:
    """One row per scored layer pair per stage; ``mask_bit`` is after the AND-merge."""
    rows = []
    for res in audit:
        active = res.series.active_layers
        selected = set(res.scores.selected)
        for k, value in enumerate(res.series.values):
            layer = active[k + 1]
            rows.append({
                "stage_id": res.stage_id,
                "layer": layer,
                "prev_layer": active[k],
                "epoch_first": res.series.epoch_window[0],
                "epoch_last": res.series.epoch_window[1],
                "divergence": repr(float(value)),
                "score": repr(float(res.scores.values[k])),
                "selected": int(k in selected),
                "mask_bit": res.mask.bits[layer - 1],
            })
    return rows


def format_csv(rows: Sequence[dict], columns: Sequence[str] = REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_rows(path, rows, columns=REPORT_COLUMNS) -> None:
    atomic_write_text(path, format_csv(rows, columns))


def read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ReportIOError(f"report file not found: expected {path}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise ReportIOError(f"cannot read {path}: {exc.strerror}") from exc


def write_summary(path, summary: dict) -> None:
    atomic_write_text(path, json.dumps(summary, indent=2, sort_keys=True) + "\n")


def read_summary(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ReportIOError(f"summary file not found: expected {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None


def _num(x: float) -> str:
    return f"{x:.2f}"


def bar_chart_svg(labels: Sequence[str], values: Sequence[float], title: str = "",
                  ylabel: str = "", width: int = 640, height: int = 320,
                  threshold: float | None = None) -> str:
    """Vertical bar chart; each bar is a ``<rect class="bar">``."""
    left, right, top, bottom = 56, 16, 32, 48
    plot_w = width - left - right
    plot_h = height - top - bottom
    vmax = max([float(v) for v in values] + ([threshold] if threshold is not None else []) + [0.0])
    vmax = vmax if vmax > 0 else 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line class="axis" x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="14" y="{top + plot_h / 2:.0f}" font-size="11" '
        f'transform="rotate(-90 14 {top + plot_h / 2:.0f})" text-anchor="middle">{escape(ylabel)}</text>',
        f'<text x="{left - 4}" y="{top + 4}" font-size="10" text-anchor="end">{vmax:.3g}</text>',
        f'<text x="{left - 4}" y="{top + plot_h}" font-size="10" text-anchor="end">0</text>',
    ]
    n = len(values)
    if n:
        slot = plot_w / n
        bar_w = slot * 0.7
        for i, (label, v) in enumerate(zip(labels, values)):
            h = plot_h * max(float(v), 0.0) / vmax
            x = left + i * slot + (slot - bar_w) / 2
            parts.append(
                f'<rect class="bar" x="{_num(x)}" y="{_num(top + plot_h - h)}" width="{_num(bar_w)}" '
                f'height="{_num(h)}" fill="#4C72B0"><title>{escape(str(label))}: {float(v)!r}</title></rect>'
            )
            parts.append(
                f'<text x="{_num(x + bar_w / 2)}" y="{top + plot_h + 14}" font-size="9" '
                f'text-anchor="middle">{escape(str(label))}</text>'
            )
    if threshold is not None:
        y = top + plot_h - plot_h * threshold / vmax
        parts.append(
            f'<line class="threshold" x1="{left}" y1="{_num(y)}" x2="{left + plot_w}" y2="{_num(y)}" '
            f'stroke="#C44E52" stroke-dasharray="4 3"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_plots(out_dir, report_name="report.csv", summary_name="summary.json") -> list[Path]:
    """Write divergence, score and (when recorded) cost charts next to a report."""
    out_dir = Path(out_dir)
    rows = read_rows(out_dir / report_name)
    summary_path = out_dir / summary_name
    summary = read_summary(summary_path) if summary_path.exists() else {}
    labels = [f"s{r['stage_id']}:{r['prev_layer']}>{r['layer']}" for r in rows]
    tau = summary.get("provenance", {}).get("tau")
    written = []
    charts = [
        ("divergence.svg", [float(r["divergence"]) for r in rows], "Adjacent-layer KL divergence", "KL (nats)", None),
        ("scores.svg", [float(r["score"]) for r in rows], "Mapped scores", "score", tau),
    ]
    for name, values, title, ylabel, thr in charts:
        atomic_write_text(out_dir / name, bar_chart_svg(labels, values, title, ylabel, threshold=thr))
        written.append(out_dir / name)
    flops = summary.get("flops")
    if flops:
        labels = ["attention (unpruned)", "attention (pruned)", "total (unpruned)", "total (pruned)"]
        values = [flops["before"]["attention"], flops["after"]["attention"],
                  flops["before"]["total"], flops["after"]["total"]]
        atomic_write_text(out_dir / "cost.svg", bar_chart_svg(labels, values, "Multiply-adds per token", "MACs"))
        written.append(out_dir / "cost.svg")
    return written
