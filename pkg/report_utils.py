"""
Report Utilities for mcqa-lens
CSV tables, run manifests, SVG charts and PDF run summaries using ReportLab
"""

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from reportlab.graphics import renderSVG
from reportlab.graphics.charts.legends import Legend
from reportlab.graphics.charts.lineplots import LinePlot
from reportlab.graphics.shapes import Drawing, Group, Rect, String
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from config import Config
from prompts import NUM_CHOICES

logger = logging.getLogger(__name__)

_SYM = [f"sym_{i + 1}" for i in range(NUM_CHOICES)]

LENS_HEADER = (
    ["instance_id", "layer", "site", "mode"]
    + [f"{s}_logit" for s in _SYM]
    + [f"{s}_probit" for s in _SYM]
    + ["max_other_logit", "max_other_probit", "logit_diff"]
)
PATCH_HEADER = ["instance_id", "layer", "site", "head", "metric_space"] + _SYM + ["predicted"]
HEATMAP_HEADER = ["layer", "head", "metric", "space", "value", "n_instances"]
CONSISTENCY_HEADER = ["symbol_set", "position", "accuracy", "n"]
TRAIN_LOG_HEADER = ["step", "loss", "lr"]

SERIES_COLORS = [
    colors.HexColor("#3498db"),
    colors.HexColor("#e67e22"),
    colors.HexColor("#27ae60"),
    colors.HexColor("#8e44ad"),
    colors.HexColor("#7f8c8d"),
    colors.HexColor("#2c3e50"),
]
HEAT_LOW = colors.HexColor("#2c7bb6")
HEAT_MID = colors.HexColor("#f7f7f7")
HEAT_HIGH = colors.HexColor("#d7191c")


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Sequence[Mapping]) -> Path:
    """Write rows under a fixed header; unknown keys are an error"""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(header), extrasaction="raise", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.info(f"wrote {len(rows)} row(s) to {path}")
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


@dataclass
class RunManifest:
    """Provenance record written into an experiment directory before any other output"""

    command: str
    flags: Dict[str, object]
    dataset_seed: Optional[int]
    checkpoint_sha256: Optional[str]
    tool_version: str = Config.TOOL_VERSION
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    outputs: List[str] = field(default_factory=list)

    def write(self, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / Config.MANIFEST_FILE
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _floats(rows: Sequence[Mapping], key: str) -> np.ndarray:
    return np.array([float(row[key]) for row in rows], dtype=np.float64)


def _value_range(series: Sequence[Sequence[float]]) -> Tuple[float, float]:
    values = np.concatenate([np.asarray(s, dtype=np.float64) for s in series])
    low, high = float(values.min()), float(values.max())
    if high - low < 1e-9:
        low, high = low - 1.0, high + 1.0
    pad = 0.05 * (high - low)
    return low - pad, high + pad


def _line_panel(x: Sequence[float], series: Sequence[Sequence[float]], names: Sequence[str], title: str,
                origin: Tuple[float, float], size: Tuple[float, float]) -> Group:
    """One LinePlot with a title and legend; one polyline per series"""
    group = Group()
    plot = LinePlot()
    plot.x, plot.y = origin
    plot.width, plot.height = size
    plot.data = [list(zip(x, values)) for values in series]
    for i in range(len(series)):
        plot.lines[i].strokeColor = SERIES_COLORS[i % len(SERIES_COLORS)]
        plot.lines[i].strokeWidth = 1.5
    x_low, x_high = (min(x), max(x)) if max(x) > min(x) else (min(x) - 1, max(x) + 1)
    plot.xValueAxis.valueMin, plot.xValueAxis.valueMax = x_low, x_high
    plot.xValueAxis.valueSteps = sorted(set(x))
    plot.yValueAxis.valueMin, plot.yValueAxis.valueMax = _value_range(series)
    plot.xValueAxis.labels.fontSize = 7
    plot.yValueAxis.labels.fontSize = 7
    group.add(plot, name="plot")
    group.add(String(origin[0], origin[1] + size[1] + 8, title, fontSize=9, fontName="Helvetica-Bold"))
    legend = Legend()
    legend.x, legend.y = origin[0] + size[0] + 12, origin[1] + size[1]
    legend.fontSize = 7
    legend.dx = legend.dy = 6
    legend.columnMaximum = len(series)
    legend.colorNamePairs = [(SERIES_COLORS[i % len(SERIES_COLORS)], name) for i, name in enumerate(names)]
    group.add(legend, name="legend")
    return group


def _two_panel_drawing(x: Sequence[float], logit_series, probit_series, names: Sequence[str], title: str) -> Drawing:
    drawing = Drawing(620, 280)
    drawing.add(String(20, 262, title, fontSize=11, fontName="Helvetica-Bold"), name="title")
    drawing.add(_line_panel(x, logit_series, names, "logit", (40, 40), (180, 180)), name="logit_panel")
    drawing.add(_line_panel(x, probit_series, names, "probit", (350, 40), (180, 180)), name="probit_panel")
    return drawing


def _mean_by_layer(rows: Sequence[Mapping], keys: Sequence[str]) -> Tuple[List[int], Dict[str, List[float]]]:
    grouped: Dict[int, List[Mapping]] = defaultdict(list)
    for row in rows:
        grouped[int(row["layer"])].append(row)
    layers = sorted(grouped)
    return layers, {key: [float(np.mean(_floats(grouped[layer], key))) for layer in layers] for key in keys}


def lens_chart(rows: Sequence[Mapping], title: str = "lens", symbols: Optional[Sequence[str]] = None) -> Drawing:
    """Per-layer means of a lens table: the four answer symbols, the best other token and the answer difference"""
    symbols = list(symbols) if symbols else list(_SYM)
    logit_keys = [f"{s}_logit" for s in _SYM] + ["max_other_logit", "logit_diff"]
    probit_keys = [f"{s}_probit" for s in _SYM] + ["max_other_probit"]
    layers, means = _mean_by_layer(rows, logit_keys + probit_keys)
    probit_answers = np.array([means[f"{s}_probit"] for s in _SYM])
    ordered = np.sort(probit_answers, axis=0)
    probit_diff = list(ordered[-1] - ordered[-2])
    names = symbols + ["max other", "difference"]
    return _two_panel_drawing(
        layers,
        [means[key] for key in logit_keys],
        [means[key] for key in probit_keys] + [probit_diff],
        names,
        title,
    )


def patch_chart(rows: Sequence[Mapping], title: str = "patch", symbols: Optional[Sequence[str]] = None) -> Drawing:
    """Per-layer mean post-patch scores of the four answer symbols"""
    symbols = list(symbols) if symbols else list(_SYM)
    panels = {}
    layers: List[int] = []
    for space in ("logit", "probit"):
        layers, means = _mean_by_layer([row for row in rows if row["metric_space"] == space], _SYM)
        panels[space] = [means[s] for s in _SYM]
    return _two_panel_drawing(layers, panels["logit"], panels["probit"], symbols, title)


def _heat_color(value: float, low: float, high: float):
    bound = max(abs(low), abs(high)) or 1.0
    t = value / bound
    if t >= 0:
        return colors.linearlyInterpolatedColor(HEAT_MID, HEAT_HIGH, 0.0, 1.0, min(t, 1.0))
    return colors.linearlyInterpolatedColor(HEAT_MID, HEAT_LOW, 0.0, 1.0, min(-t, 1.0))


def heatmap_chart(rows: Sequence[Mapping], title: str = "heads") -> Drawing:
    """Layer x head grid of one metric, diverging around zero, with a colour legend"""
    cells = {(int(row["layer"]), int(row["head"])): float(row["value"]) for row in rows}
    layers = sorted({layer for layer, _ in cells})
    heads = sorted({head for _, head in cells})
    cell = 28
    width = 80 + cell * len(heads) + 90
    height = 70 + cell * len(layers)
    drawing = Drawing(width, height)
    drawing.add(String(20, height - 18, title, fontSize=11, fontName="Helvetica-Bold"), name="title")
    low, high = min(cells.values()), max(cells.values())
    grid = Group()
    for i, layer in enumerate(layers):
        y = 30 + cell * (len(layers) - 1 - i)
        drawing.add(String(45, y + cell / 2 - 3, str(layer), fontSize=7, textAnchor="end"))
        for j, head in enumerate(heads):
            value = cells.get((layer, head), 0.0)
            grid.add(Rect(50 + cell * j, y, cell, cell, fillColor=_heat_color(value, low, high),
                          strokeColor=colors.white, strokeWidth=0.5))
    for j, head in enumerate(heads):
        drawing.add(String(50 + cell * j + cell / 2, 18, str(head), fontSize=7, textAnchor="middle"))
    drawing.add(grid, name="cells")
    legend_x = 60 + cell * len(heads)
    steps = 10
    bar = Group()
    bound = max(abs(low), abs(high)) or 1.0
    for k in range(steps + 1):
        value = -bound + 2 * bound * k / steps
        bar.add(Rect(legend_x, 30 + k * 8, 12, 8, fillColor=_heat_color(value, -bound, bound), strokeColor=None))
    drawing.add(bar, name="legend")
    drawing.add(String(legend_x + 16, 30, f"{-bound:.3g}", fontSize=7))
    drawing.add(String(legend_x + 16, 30 + steps * 8, f"{bound:.3g}", fontSize=7))
    return drawing


def curve_chart(rows: Sequence[Mapping], x_key: str, y_keys: Sequence[str], title: str) -> Drawing:
    """Single-panel line chart of a per-step table such as a checkpoint sweep or the training log"""
    drawing = Drawing(480, 280)
    drawing.add(String(20, 262, title, fontSize=11, fontName="Helvetica-Bold"), name="title")
    x = list(_floats(rows, x_key))
    drawing.add(_line_panel(x, [list(_floats(rows, key)) for key in y_keys], y_keys, x_key, (40, 40), (300, 180)),
                name="panel")
    return drawing


def _chart_for(name: str, rows: Sequence[Mapping], symbols: Optional[Sequence[str]] = None) -> List[Tuple[str, Drawing]]:
    columns = set(rows[0])
    if {"logit_diff", "mode"} <= columns:
        return [(name, lens_chart(rows, name, symbols))]
    if "metric_space" in columns:
        return [(name, patch_chart(rows, name, symbols))]
    if {"metric", "space", "value"} <= columns:
        charts = []
        for metric, space in sorted({(row["metric"], row["space"]) for row in rows}):
            subset = [row for row in rows if row["metric"] == metric and row["space"] == space]
            charts.append((f"{name}_{metric}_{space}", heatmap_chart(subset, f"{name} {metric} ({space})")))
        return charts
    if "step" in columns:
        y_keys = [key for key in rows[0] if key not in ("step", "layer", "n", "n_correct")
                  and all(row[key] not in ("", None) for row in rows)]
        if not y_keys:
            logger.warning(f"table '{name}' has no complete numeric column; no plot written")
            return []
        if "layer" in columns:
            charts = []
            for layer in sorted({int(row["layer"]) for row in rows}):
                subset = [row for row in rows if int(row["layer"]) == layer]
                charts.append((f"{name}_layer{layer}", curve_chart(subset, "step", y_keys, f"{name} layer {layer}")))
            return charts
        return [(name, curve_chart(rows, "step", y_keys, name))]
    logger.warning(f"no chart type for table '{name}' with columns {sorted(columns)}")
    return []


def svg_string(drawing: Drawing) -> str:
    return renderSVG.drawToString(drawing)


def emit_plots(tables: Mapping[str, Sequence[Mapping]], out_dir: Union[str, Path],
               symbols: Optional[Mapping[str, Sequence[str]]] = None) -> List[Path]:
    """Render every table to SVG under out_dir; identical tables give identical bytes

    symbols maps a table name to the answer symbols its legend should show
    """
    symbols = symbols or {}
    out_dir = Path(out_dir)
    written = []
    for name in sorted(tables):
        rows = list(tables[name])
        if not rows:
            logger.warning(f"table '{name}' is empty; no plot written")
            continue
        for stem, drawing in _chart_for(name, rows, symbols.get(name)):
            path = out_dir / f"{stem}.svg"
            path.write_text(svg_string(drawing), encoding="utf-8")
            written.append(path)
    logger.info(f"wrote {len(written)} plot(s) to {out_dir}")
    return written


class RunReportPDF:
    """PDF summary of one experiment directory"""

    def __init__(self):
        self.styles = getSampleStyleSheet()
        self.setup_custom_styles()

    def setup_custom_styles(self):
        self.styles.add(ParagraphStyle(
            name="RunTitle",
            parent=self.styles["Title"],
            fontSize=20,
            spaceAfter=20,
            alignment=TA_CENTER,
            textColor=colors.HexColor("#2c3e50"),
        ))
        self.styles.add(ParagraphStyle(
            name="RunHeader",
            parent=self.styles["Heading3"],
            fontSize=13,
            spaceAfter=10,
            textColor=colors.HexColor("#2c3e50"),
        ))
        self.styles.add(ParagraphStyle(
            name="RunNormal",
            parent=self.styles["Normal"],
            fontSize=9,
            spaceAfter=4,
        ))

    def _table(self, data: List[List[str]], col_widths=None) -> Table:
        table = Table(data, colWidths=col_widths, repeatRows=1)
        table.setStyle(TableStyle([
            ("BACKGROUND", (0, 0), (-1, 0), colors.HexColor("#3498db")),
            ("TEXTCOLOR", (0, 0), (-1, 0), colors.whitesmoke),
            ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
            ("FONTSIZE", (0, 0), (-1, -1), 7),
            ("ALIGN", (0, 0), (-1, -1), "CENTER"),
            ("BACKGROUND", (0, 1), (-1, -1), colors.HexColor("#ecf0f1")),
            ("GRID", (0, 0), (-1, -1), 0.5, colors.black),
        ]))
        return table

    def build(self, path: Union[str, Path], manifest: RunManifest, tables: Mapping[str, Sequence[Mapping]],
              max_rows: int = 40) -> Path:
        """Manifest summary plus the head of every table; the file is byte-stable for equal inputs"""
        doc = SimpleDocTemplate(str(path), pagesize=A4, rightMargin=54, leftMargin=54, topMargin=54,
                                bottomMargin=36, invariant=1, title=f"{Config.TOOL_NAME} {manifest.command}")
        story = [Paragraph(f"{Config.TOOL_NAME}: {manifest.command}", self.styles["RunTitle"])]
        details = [
            ["Field", "Value"],
            ["tool version", manifest.tool_version],
            ["dataset seed", str(manifest.dataset_seed)],
            ["checkpoint sha256", (manifest.checkpoint_sha256 or "-")[:32]],
        ]
        details += [[f"--{key}", str(value)] for key, value in sorted(manifest.flags.items())]
        story.append(Paragraph("Run", self.styles["RunHeader"]))
        story.append(self._table(details, col_widths=[2 * inch, 4 * inch]))
        story.append(Spacer(1, 16))
        for name in sorted(tables):
            rows = list(tables[name])
            story.append(Paragraph(f"{name} ({len(rows)} rows)", self.styles["RunHeader"]))
            if not rows:
                story.append(Paragraph("empty table", self.styles["RunNormal"]))
                continue
            header = list(rows[0])
            data = [header] + [[_cell(row[key]) for key in header] for row in rows[:max_rows]]
            story.append(self._table(data))
            if len(rows) > max_rows:
                story.append(Paragraph(f"{len(rows) - max_rows} more rows in the CSV", self.styles["RunNormal"]))
            story.append(Spacer(1, 12))
        doc.build(story)
        logger.info(f"wrote PDF summary {path}")
        return Path(path)


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)
