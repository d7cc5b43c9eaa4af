"""
DCMNet Charts Module

Plotly figures for training, evaluation, routing and ablation results, sharing one dark
layout, plus PNG export of classification maps.
"""

import base64
from io import BytesIO
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import plotly.graph_objects as go
import polars as pl
from PIL import Image

from .routing import BLOCKS, HEAD
from .storage import atomic_write_bytes

if TYPE_CHECKING:
    from .routing import PathSummary
    from .training import EvalReport, TrainHistory

COLORS = {
    "background": "#09090b",
    "paper": "#18181b",
    "surface": "#1f1f23",
    "grid": "#27272a",
    "border": "#3f3f46",
    "text": "#fafafa",
    "text_secondary": "#a1a1aa",
    "text_muted": "#71717a",
    "blue": "#3b82f6",
    "green": "#22c55e",
    "amber": "#f59e0b",
    "violet": "#8b5cf6",
    "rose": "#f43f5e",
    "cyan": "#06b6d4",
}

ACCENT_COLORS = [
    COLORS["blue"],
    COLORS["violet"],
    COLORS["cyan"],
    COLORS["amber"],
    COLORS["green"],
    COLORS["rose"],
]

HEAT_SCALE = [
    [0, COLORS["background"]],
    [0.4, "rgba(59, 130, 246, 0.5)"],
    [1, COLORS["violet"]],
]

# Class colours for maps; label 0 (unlabeled) is the background
CLASS_PALETTE = [
    (9, 9, 11),
    (59, 130, 246),
    (139, 92, 246),
    (6, 182, 212),
    (245, 158, 11),
    (34, 197, 94),
    (244, 63, 94),
    (236, 72, 153),
    (132, 204, 22),
    (234, 179, 8),
    (20, 184, 166),
    (99, 102, 241),
    (249, 115, 22),
    (168, 85, 247),
    (14, 165, 233),
    (250, 250, 250),
]


def _axis(title: str) -> dict:
    return {
        "title": title,
        "gridcolor": COLORS["grid"],
        "linecolor": COLORS["grid"],
        "tickfont": {"color": COLORS["text_muted"], "size": 11},
        "title_font": {"color": COLORS["text_secondary"], "size": 12},
        "showgrid": True,
        "zeroline": False,
    }


def get_modern_layout(
    title: str = "",
    xaxis_title: str = "",
    yaxis_title: str = "",
    height: int = 400,
    show_legend: bool = True,
) -> dict:
    """Base dark layout shared by every figure."""
    return {
        "template": "plotly_dark",
        "paper_bgcolor": COLORS["paper"],
        "plot_bgcolor": COLORS["background"],
        "font": {
            "family": "Geist, -apple-system, BlinkMacSystemFont, sans-serif",
            "color": COLORS["text"],
            "size": 12,
        },
        "title": {
            "text": title,
            "font": {"size": 14, "color": COLORS["text_secondary"]},
            "x": 0.02,
            "xanchor": "left",
        },
        "xaxis": _axis(xaxis_title),
        "yaxis": _axis(yaxis_title),
        "height": height,
        "margin": {"l": 65, "r": 35, "t": 50, "b": 55},
        "showlegend": show_legend,
        "legend": {
            "bgcolor": "rgba(0,0,0,0)",
            "font": {"color": COLORS["text_muted"], "size": 11},
            "orientation": "h",
            "y": 1.02,
            "yanchor": "bottom",
        },
        "hoverlabel": {
            "bgcolor": COLORS["surface"],
            "bordercolor": COLORS["border"],
            "font": {"color": COLORS["text"], "size": 12},
        },
    }


def chart_to_html(fig: go.Figure, include_plotlyjs: bool = False) -> str:
    """Render a figure as an embeddable div (plotly.js from the CDN when requested)."""
    return fig.to_html(
        include_plotlyjs="cdn" if include_plotlyjs else False,
        full_html=False,
        config={"displayModeBar": False, "responsive": True},
    )


def class_names(num_classes: int) -> list[str]:
    return [f"Class {c}" for c in range(1, num_classes + 1)]


def create_loss_chart(history: "TrainHistory") -> go.Figure:
    """Per-epoch loss with train accuracy on a secondary axis."""
    if not history.epoch_loss:
        return go.Figure()
    epochs = list(range(1, len(history.epoch_loss) + 1))

    fig = go.Figure()
    fig.add_trace(
        go.Scatter(
            x=epochs,
            y=history.epoch_loss,
            mode="lines",
            name="Loss",
            line={"color": COLORS["blue"], "width": 2},
            fill="tozeroy",
            fillcolor="rgba(59, 130, 246, 0.1)",
            hovertemplate="<b>Epoch %{x}</b>: loss %{y:.4f}<extra></extra>",
        )
    )
    fig.add_trace(
        go.Scatter(
            x=epochs,
            y=history.train_accuracy,
            mode="lines",
            name="Train OA",
            yaxis="y2",
            line={"color": COLORS["green"], "width": 2},
            hovertemplate="<b>Epoch %{x}</b>: OA %{y:.1%}<extra></extra>",
        )
    )
    layout = get_modern_layout(xaxis_title="Epoch", yaxis_title="Cross-entropy")
    layout["yaxis2"] = {
        **_axis("Train OA"),
        "overlaying": "y",
        "side": "right",
        "range": [0, 1],
        "tickformat": ".0%",
        "showgrid": False,
    }
    fig.update_layout(**layout)
    return fig


def create_confusion_matrix_chart(matrix: np.ndarray) -> go.Figure:
    """Row-normalized confusion heatmap; hover shows raw counts."""
    matrix = np.asarray(matrix)
    if matrix.size == 0:
        return go.Figure()
    rows = matrix.sum(axis=1, keepdims=True).astype(np.float64)
    rows[rows == 0] = 1
    names = class_names(len(matrix))

    fig = go.Figure(
        go.Heatmap(
            z=matrix / rows,
            x=names,
            y=names,
            customdata=matrix,
            colorscale=HEAT_SCALE,
            zmin=0,
            zmax=1,
            showscale=False,
            xgap=2,
            ygap=2,
            hovertemplate="<b>%{y}</b> predicted as %{x}: %{customdata} (%{z:.1%})<extra></extra>",
        )
    )
    layout = get_modern_layout(
        xaxis_title="Predicted",
        yaxis_title="True",
        height=max(350, 60 + 32 * len(matrix)),
        show_legend=False,
    )
    layout["yaxis"]["autorange"] = "reversed"
    layout["yaxis"]["scaleanchor"] = "x"
    layout["margin"]["l"] = 90
    fig.update_layout(**layout)
    return fig


def create_per_class_chart(per_class_accuracy: np.ndarray) -> go.Figure:
    """Recall per class; classes without test samples are left out."""
    values = np.asarray(per_class_accuracy, dtype=np.float64)
    present = ~np.isnan(values)
    if not present.any():
        return go.Figure()
    names = [n for n, keep in zip(class_names(len(values)), present, strict=True) if keep]
    kept = values[present]
    colors = [COLORS["rose"] if v < 0.5 else COLORS["amber"] if v < 0.85 else COLORS["green"] for v in kept]

    fig = go.Figure(
        go.Bar(
            x=names,
            y=kept,
            marker={"color": colors, "line": {"width": 0}},
            hovertemplate="<b>%{x}</b>: %{y:.1%}<extra></extra>",
        )
    )
    layout = get_modern_layout(yaxis_title="Accuracy", show_legend=False)
    layout["yaxis"]["range"] = [0, 1]
    layout["yaxis"]["tickformat"] = ".0%"
    layout["bargap"] = 0.25
    fig.update_layout(**layout)
    return fig


def create_routing_usage_heatmap(summary: "PathSummary") -> go.Figure:
    """Share of samples whose block at each layer has an active outgoing edge."""
    layers = [f"Layer {k}" for k in range(1, summary.layers + 1)]
    fig = go.Figure(
        go.Heatmap(
            z=summary.block_usage,
            x=list(BLOCKS),
            y=layers,
            colorscale=HEAT_SCALE,
            zmin=0,
            zmax=1,
            text=[[f"{v:.0%}" for v in row] for row in summary.block_usage],
            texttemplate="%{text}",
            showscale=False,
            xgap=3,
            ygap=3,
            hovertemplate="<b>%{y} %{x}</b>: %{z:.1%} of samples<extra></extra>",
        )
    )
    layout = get_modern_layout(
        title=f"Block usage (gate >= {summary.threshold:g})",
        height=120 + 60 * summary.layers,
        show_legend=False,
    )
    layout["yaxis"]["autorange"] = "reversed"
    fig.update_layout(**layout)
    return fig


def create_routing_sankey(summary: "PathSummary") -> go.Figure:
    """Edge frequencies through the routing grid as a Sankey diagram."""
    edges = [(e, f) for e, f in summary.edge_frequency.items() if f > 0]
    if not edges:
        return go.Figure()

    nodes: list[str] = []
    index: dict[str, int] = {}

    def node(label: str) -> int:
        if label not in index:
            index[label] = len(nodes)
            nodes.append(label)
        return index[label]

    sources, targets, values = [], [], []
    for edge, frequency in edges:
        sources.append(node(f"L{edge.layer} {edge.source}"))
        target = "Classifier" if edge.target == HEAD else f"L{edge.layer + 1} {edge.target}"
        targets.append(node(target))
        values.append(frequency)

    colors = [
        ACCENT_COLORS[BLOCKS.index(label.split()[-1]) % len(ACCENT_COLORS)]
        if label.split()[-1] in BLOCKS
        else COLORS["text_secondary"]
        for label in nodes
    ]
    fig = go.Figure(
        go.Sankey(
            node={"label": nodes, "color": colors, "pad": 18, "thickness": 14},
            link={
                "source": sources,
                "target": targets,
                "value": values,
                "color": "rgba(139, 92, 246, 0.25)",
                "hovertemplate": "%{source.label} -> %{target.label}: %{value:.1%}<extra></extra>",
            },
        )
    )
    fig.update_layout(**get_modern_layout(height=420, show_legend=False))
    return fig


def create_classification_map_chart(label_map: np.ndarray, num_classes: int) -> go.Figure:
    """Predicted label grid as a categorical heatmap (0 = unlabeled)."""
    scale = []
    for c in range(num_classes + 1):
        r, g, b = CLASS_PALETTE[c % len(CLASS_PALETTE)]
        low, high = c / (num_classes + 1), (c + 1) / (num_classes + 1)
        scale += [[low, f"rgb({r}, {g}, {b})"], [high, f"rgb({r}, {g}, {b})"]]

    fig = go.Figure(
        go.Heatmap(
            z=label_map,
            zmin=-0.5,
            zmax=num_classes + 0.5,
            colorscale=scale,
            showscale=False,
            hovertemplate="row %{y}, col %{x}: class %{z}<extra></extra>",
        )
    )
    layout = get_modern_layout(height=480, show_legend=False)
    layout["yaxis"]["autorange"] = "reversed"
    layout["yaxis"]["scaleanchor"] = "x"
    layout["xaxis"]["showgrid"] = False
    layout["yaxis"]["showgrid"] = False
    fig.update_layout(**layout)
    return fig


def create_ablation_chart(table: pl.DataFrame) -> go.Figure:
    """OA, AA and Kappa per ablation variant."""
    if len(table) == 0:
        return go.Figure()
    variants = table["variant"].to_list()
    fig = go.Figure()
    for column, color in (("oa", COLORS["blue"]), ("aa", COLORS["violet"]), ("kappa", COLORS["cyan"])):
        fig.add_trace(
            go.Bar(
                x=variants,
                y=table[column].to_list(),
                name=column.upper() if column != "kappa" else "Kappa",
                marker={"color": color, "line": {"width": 0}},
                hovertemplate="<b>%{x}</b>: %{y:.4f}<extra></extra>",
            )
        )
    layout = get_modern_layout(yaxis_title="Score")
    layout["barmode"] = "group"
    layout["bargap"] = 0.2
    fig.update_layout(**layout)
    return fig


def label_map_to_image(label_map: np.ndarray, scale: int = 4) -> Image.Image:
    """Colour a label grid with CLASS_PALETTE, enlarging each pixel to ``scale`` x ``scale``."""
    palette = np.array(CLASS_PALETTE, dtype=np.uint8)
    rgb = palette[np.asarray(label_map, dtype=np.int64) % len(palette)]
    image = Image.fromarray(rgb)
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
    return image


def label_map_to_png(label_map: np.ndarray, path: str | Path | None = None, scale: int = 4) -> str:
    """
    Encode a label grid as PNG.

    Args:
        label_map: (H, W) labels, 0 = unlabeled
        path: Also write the PNG here (atomically) when given
        scale: Pixel enlargement factor

    Returns:
        PNG as a data URI
    """
    buffer = BytesIO()
    label_map_to_image(label_map, scale).save(buffer, format="PNG", optimize=True)
    payload = buffer.getvalue()
    if path is not None:
        atomic_write_bytes(path, payload)
    return "data:image/png;base64," + base64.b64encode(payload).decode("utf-8")


class EvalCharts:
    """Every figure of an evaluation report."""

    def __init__(
        self,
        report: "EvalReport",
        history: "TrainHistory | None" = None,
        summary: "PathSummary | None" = None,
        label_map: np.ndarray | None = None,
    ):
        self.confusion = create_confusion_matrix_chart(report.confusion_matrix)
        self.per_class = create_per_class_chart(report.per_class_accuracy)
        self.loss = create_loss_chart(history) if history is not None else None
        self.usage = create_routing_usage_heatmap(summary) if summary is not None else None
        self.sankey = create_routing_sankey(summary) if summary is not None else None
        self.map = (
            create_classification_map_chart(label_map, len(report.confusion_matrix))
            if label_map is not None
            else None
        )

    def to_html_dict(self) -> dict[str, str]:
        """Figures as HTML divs; the first one present carries plotly.js."""
        ordered = {
            "confusion": self.confusion,
            "per_class": self.per_class,
            "loss": self.loss,
            "usage": self.usage,
            "sankey": self.sankey,
            "map": self.map,
        }
        charts = {}
        first = True
        for key, fig in ordered.items():
            if fig is None:
                charts[key] = ""
                continue
            charts[key] = chart_to_html(fig, include_plotlyjs=first)
            first = False
        return charts
