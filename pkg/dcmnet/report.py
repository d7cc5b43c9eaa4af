"""
DCMNet Report Generator

Renders evaluation runs and ablation suites into standalone HTML pages (jinja2 template plus
embedded plotly charts).
"""

from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
from jinja2 import Environment, FileSystemLoader

from .charts import EvalCharts, chart_to_html, create_ablation_chart, label_map_to_png
from .routing import PathSummary
from .storage import atomic_write_text
from .training import AblationResult, EvalReport, TrainHistory


@dataclass
class ReportData:
    """Everything the report template needs."""

    title: str
    kind: str  # "eval" or "ablation"
    metrics: dict[str, float] = field(default_factory=dict)
    cost: dict[str, int] = field(default_factory=dict)
    class_rows: list[dict] = field(default_factory=list)
    ablation_rows: list[dict] = field(default_factory=list)
    charts_html: dict[str, str] = field(default_factory=dict)
    map_png: str = ""
    config: dict = field(default_factory=dict)


def get_template_dir() -> Path:
    return Path(__file__).parent / "templates"


def _render_report_template(report_data: ReportData, quiet: bool = False) -> str:
    env = Environment(loader=FileSystemLoader(get_template_dir()), autoescape=False)
    template = env.get_template("report.html")
    if not quiet:
        print("[*] Rendering HTML report...")
    return template.render(
        report=report_data,
        generation_date=datetime.now().strftime("%B %d, %Y at %I:%M %p"),
    )


def _class_rows(report: EvalReport) -> list[dict]:
    support = report.confusion_matrix.sum(axis=1)
    return [
        {
            "label": c + 1,
            "support": int(support[c]),
            "accuracy": None if np.isnan(acc) else float(acc),
        }
        for c, acc in enumerate(report.per_class_accuracy)
    ]


def write_eval_report(
    path: str | Path,
    report: EvalReport,
    config: dict | None = None,
    history: TrainHistory | None = None,
    summary: PathSummary | None = None,
    label_map: np.ndarray | None = None,
    title: str = "DCMNet evaluation",
    quiet: bool = False,
) -> Path:
    """
    Write an evaluation page: metrics, per-class table, confusion matrix, routing charts and
    (optionally) the loss curve and classification map.
    """
    charts = EvalCharts(report, history, summary, label_map)
    data = ReportData(
        title=title,
        kind="eval",
        metrics={"OA": report.oa, "AA": report.aa, "Kappa": report.kappa},
        cost=report.cost,
        class_rows=_class_rows(report),
        charts_html=charts.to_html_dict(),
        map_png=label_map_to_png(label_map) if label_map is not None else "",
        config=config or {},
    )
    path = atomic_write_text(path, _render_report_template(data, quiet))
    if not quiet:
        print(f"[+] HTML report saved: {path}")
    return path


def write_ablation_report(
    path: str | Path, result: AblationResult, config: dict | None = None, quiet: bool = False
) -> Path:
    """Write an ablation page: one row per variant plus grouped metric bars."""
    data = ReportData(
        title=f"DCMNet ablation: {result.suite}",
        kind="ablation",
        ablation_rows=result.table.to_dicts(),
        charts_html={"ablation": chart_to_html(create_ablation_chart(result.table), True)},
        config=config or {},
    )
    path = atomic_write_text(path, _render_report_template(data, quiet))
    if not quiet:
        print(f"[+] HTML report saved: {path}")
    return path
