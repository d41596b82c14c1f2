"""Dependency-free SVG line chart of accuracy over tasks."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .errors import ConfigError

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 160, "top": 30, "bottom": 60}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def running_means(matrix) -> list[float]:
    """Average accuracy over the tasks seen so far, after each task."""
    m = np.asarray(matrix, dtype=np.float64)
    return [float(np.mean(m[t, :t + 1])) for t in range(m.shape[0])]


def curves(reports) -> dict[str, list[float]]:
    """One curve per strategy, averaged over that strategy's reports (seeds)."""
    grouped: dict[str, list[list[float]]] = {}
    for report in reports:
        matrix = report.get("accuracy_matrix") or []
        if not matrix or len(matrix) != len(matrix[0]):
            raise ConfigError("report has an incomplete accuracy matrix", field="reports")
        grouped.setdefault(report["strategy"], []).append(running_means(matrix))
    out = {}
    for strategy, series in grouped.items():
        if len({len(s) for s in series}) != 1:
            raise ConfigError(f"reports for {strategy} disagree on task count", field="reports")
        out[strategy] = [float(v) for v in np.mean(np.array(series), axis=0)]
    return out


def render_svg(reports, title: str = "average accuracy over seen tasks") -> str:
    reports = list(reports)
    if not reports:
        raise ConfigError("nothing to plot", field="reports")
    series = curves(reports)
    T = max(len(v) for v in series.values())
    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    plot_h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(task: int) -> float:
        return MARGIN["left"] + (plot_w * (task - 1) / (T - 1) if T > 1 else plot_w / 2)

    def py(acc: float) -> float:
        return MARGIN["top"] + plot_h * (1.0 - acc)

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(WIDTH),
                     height=str(HEIGHT), viewBox=f"0 0 {WIDTH} {HEIGHT}")
    ET.SubElement(svg, "title").text = title
    ET.SubElement(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT), fill="white")
    axes = ET.SubElement(svg, "g", id="axes", stroke="black")
    x0, y0 = MARGIN["left"], MARGIN["top"] + plot_h
    ET.SubElement(axes, "line", x1=str(x0), y1=str(y0), x2=str(x0 + plot_w), y2=str(y0))
    ET.SubElement(axes, "line", x1=str(x0), y1=str(MARGIN["top"]), x2=str(x0), y2=str(y0))
    labels = ET.SubElement(svg, "g", id="labels", fill="black")
    labels.set("font-family", "sans-serif")
    labels.set("font-size", "12")
    for task in range(1, T + 1):
        ET.SubElement(labels, "text", x=f"{px(task):.2f}", y=str(y0 + 18),
                      attrib={"text-anchor": "middle"}).text = str(task)
    for tick in np.linspace(0.0, 1.0, 6):
        ET.SubElement(labels, "text", x=str(x0 - 8), y=f"{py(tick) + 4:.2f}",
                      attrib={"text-anchor": "end"}).text = f"{tick:.1f}"
    ET.SubElement(labels, "text", x=f"{x0 + plot_w / 2:.2f}", y=str(HEIGHT - 15),
                  attrib={"text-anchor": "middle"}).text = "task"
    ET.SubElement(labels, "text", x="18", y=f"{MARGIN['top'] + plot_h / 2:.2f}",
                  transform=f"rotate(-90 18 {MARGIN['top'] + plot_h / 2:.2f})",
                  attrib={"text-anchor": "middle"}).text = "average accuracy"

    lines = ET.SubElement(svg, "g", id="series", fill="none")
    legend = ET.SubElement(svg, "g", id="legend")
    legend.set("font-family", "sans-serif")
    legend.set("font-size", "12")
    for i, (strategy, values) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{px(t + 1):.2f},{py(v):.2f}" for t, v in enumerate(values))
        line = ET.SubElement(lines, "polyline", points=points, stroke=color)
        line.set("stroke-width", "2")
        line.set("data-strategy", strategy)
        line.set("data-values", " ".join(repr(v) for v in values))
        ly = MARGIN["top"] + 20 * i + 10
        lx = WIDTH - MARGIN["right"] + 15
        ET.SubElement(legend, "line", x1=str(lx), y1=str(ly), x2=str(lx + 20), y2=str(ly),
                      stroke=color, attrib={"stroke-width": "2"})
        ET.SubElement(legend, "text", x=str(lx + 26), y=str(ly + 4)).text = strategy
    return ET.tostring(svg, encoding="unicode")


def emit_plot(reports, out_path) -> str:
    text = render_svg(reports)
    Path(out_path).write_text(text + "\n", encoding="utf-8")
    return text
