"""Plotly charts for training logs, evaluation records and ratio sweeps."""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import pandas as pd
import plotly.graph_objects as go
import plotly.io as pio
from plotly.subplots import make_subplots

from .models import VisualizationConfig

logger = logging.getLogger(__name__)

_IMAGE_FORMATS = ("png", "svg", "pdf")


class TrainingVisualizer:
    """Builds figures from the artifacts a run leaves behind."""

    def __init__(self, config: Optional[VisualizationConfig] = None):
        self.config = config or VisualizationConfig()
        pio.templates.default = self.config.theme
        self.colors = list(self.config.color_scheme)

    def _color(self, index: int) -> str:
        """Colour from the configured scheme, cycling."""
        return self.colors[index % len(self.colors)]

    def _layout(self, fig: go.Figure, title: str) -> go.Figure:
        """Apply the shared theme, size and title."""
        fig.update_layout(
            title=title,
            width=self.config.width,
            height=self.config.height,
            font=dict(family=self.config.font_family),
            legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
        )
        return fig

    def create_loss_curves(self, log: pd.DataFrame, title: Optional[str] = None) -> go.Figure:
        """Losses on top, learning rate below; steps are numbered across phases."""
        fig = make_subplots(
            rows=2, cols=1, shared_xaxes=True, row_heights=[0.7, 0.3],
            subplot_titles=("Loss", "Learning rate"),
        )
        frame = log.reset_index(drop=True).copy()
        frame["global_step"] = range(len(frame))

        for index, (column, label) in enumerate((("total", "total"), ("L_v", "visual"), ("L_l", "linguistic"))):
            fig.add_trace(
                go.Scatter(
                    x=frame["global_step"], y=frame[column], name=label, mode="lines",
                    line=dict(color=self._color(index)),
                ),
                row=1, col=1,
            )
        fig.add_trace(
            go.Scatter(
                x=frame["global_step"], y=frame["lr"], name="lr", mode="lines",
                line=dict(color=self._color(3), dash="dot"),
            ),
            row=2, col=1,
        )

        # phase boundaries
        changes = frame.index[frame["phase"] != frame["phase"].shift()].tolist()
        for start in changes[1:]:
            fig.add_vline(x=start, line_dash="dash", line_color="gray")

        fig.update_xaxes(title_text="step", row=2, col=1)
        return self._layout(fig, title or f"{self.config.title} - Training")

    def create_tag_accuracy_chart(self, records: pd.DataFrame, title: Optional[str] = None) -> go.Figure:
        """Word accuracy per corruption tag, from per-sample evaluation records."""
        exploded = records.explode("tags")
        by_tag = exploded.groupby("tags")["correct"].agg(["mean", "size"]).reset_index()
        overall = float(records["correct"].mean()) if len(records) else 0.0

        fig = go.Figure()
        fig.add_trace(go.Bar(
            x=by_tag["tags"],
            y=by_tag["mean"],
            text=[f"{m:.1%} (n={n})" for m, n in zip(by_tag["mean"], by_tag["size"])],
            textposition="auto",
            marker_color=[self._color(i) for i in range(len(by_tag))],
            name="per tag",
        ))
        fig.add_hline(y=overall, line_dash="dash", annotation_text=f"overall {overall:.1%}")
        fig.update_yaxes(title_text="word accuracy", range=[0, 1.05])
        return self._layout(fig, title or f"{self.config.title} - Accuracy by corruption")

    def create_sweep_chart(self, sweep: pd.DataFrame, title: Optional[str] = None) -> go.Figure:
        """Mean accuracy per ratio value with a ±1 std band over seeds."""
        parameter = str(sweep["parameter"].iloc[0]) if len(sweep) else "ratio"
        stats = sweep.groupby("value")["accuracy"].agg(["mean", "std"]).reset_index().fillna(0.0)

        fig = go.Figure()
        fig.add_trace(go.Scatter(
            x=sweep["value"], y=sweep["accuracy"], mode="markers", name="runs",
            marker=dict(color=self._color(1), size=6, opacity=0.5),
        ))
        fig.add_trace(go.Scatter(
            x=stats["value"], y=stats["mean"], mode="lines+markers", name="mean",
            line=dict(color=self._color(0)),
            error_y=dict(type="data", array=stats["std"], visible=True),
        ))
        fig.update_xaxes(title_text=parameter)
        fig.update_yaxes(title_text="word accuracy")
        return self._layout(fig, title or f"{self.config.title} - {parameter} sweep")

    def export_visualizations(
        self,
        figures: Mapping[str, go.Figure],
        output_dir: Path,
        formats: Optional[List[str]] = None,
    ) -> Dict[str, List[str]]:
        """Write each figure in each format; failed image exports are logged and skipped."""
        formats = formats or self.config.export_formats
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)

        exported: Dict[str, List[str]] = {}
        for name, fig in figures.items():
            exported[name] = []
            for format_type in formats:
                filepath = output_dir / f"{name}.{format_type}"
                try:
                    if format_type == "html":
                        fig.write_html(str(filepath))
                    elif format_type in _IMAGE_FORMATS:
                        fig.write_image(str(filepath), engine="kaleido")
                    elif format_type == "json":
                        fig.write_json(str(filepath))
                    else:
                        logger.warning(f"Unknown export format {format_type}")
                        continue
                    exported[name].append(str(filepath))
                    logger.info(f"Exported {name} as {format_type}: {filepath}")
                except Exception as e:
                    logger.error(f"Failed to export {name} as {format_type}: {e}")
        return exported
