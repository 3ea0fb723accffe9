import plotly.graph_objects as go
import pandas as pd
from pathlib import Path
from typing import List, Optional
from utils.design_system import get_chart_colors, get_chart_layout_defaults


def _apply_layout(fig: go.Figure, title: str, xaxis_title: str, yaxis_title: str) -> go.Figure:
    layout = get_chart_layout_defaults()
    layout['title'] = dict(layout['title'], text=title)
    layout['xaxis'] = dict(layout['xaxis'], title=xaxis_title)
    layout['yaxis'] = dict(layout['yaxis'], title=yaxis_title)
    fig.update_layout(**layout, height=450)
    return fig


def render_loss_curve(history: pd.DataFrame) -> go.Figure:
    """
    Per-epoch trigger training losses.

    Args:
        history: Frame with epoch, mean_stealth, mean_attack, mean_total columns

    Returns:
        Plotly figure with one line per loss term
    """
    colors = get_chart_colors()
    fig = go.Figure()
    for column, label, color in (
        ('mean_stealth', 'Stealth (PSNR hinge)', colors['stealth']),
        ('mean_attack', 'Attack (cross-entropy)', colors['attack']),
        ('mean_total', 'Total', colors['total']),
    ):
        fig.add_trace(go.Scatter(
            x=history['epoch'],
            y=history[column],
            mode='lines',
            name=label,
            line=dict(color=color, width=2),
        ))
    return _apply_layout(fig, "Trigger Training Loss", "Epoch", "Loss")


def render_asr_bars(per_class: pd.DataFrame, benign_accuracy: Optional[float] = None) -> go.Figure:
    """Per-class attack success rate, with benign accuracy as a reference line."""
    colors = get_chart_colors()
    fig = go.Figure(go.Bar(
        x=per_class['class'],
        y=per_class['asr'],
        marker_color=colors['asr'],
        name='ASR',
        hovertemplate='<b>Class %{x}</b><br>ASR: %{y:.1%}<extra></extra>',
    ))
    mean = float(per_class['asr'].mean()) if len(per_class) else 0.0
    fig.add_hline(y=mean, line_dash="dash", line_color=colors['total'],
                  annotation_text=f"mean {mean:.1%}")
    if benign_accuracy is not None:
        fig.add_hline(y=benign_accuracy, line_dash="dot", line_color=colors['benign'],
                      annotation_text=f"BA {benign_accuracy:.1%}")
    fig = _apply_layout(fig, "Attack Success Rate per Target Class", "Target class", "ASR")
    fig.update_yaxes(range=[0, 1.05], tickformat='.0%')
    return fig


def render_tsi_scatter(tsi_frame: pd.DataFrame) -> go.Figure:
    """TSI against measured ASR, one point per target class."""
    colors = get_chart_colors()
    fig = go.Figure(go.Scatter(
        x=tsi_frame['tsi'],
        y=tsi_frame['asr'],
        mode='markers+text',
        text=tsi_frame['class'].astype(str),
        textposition='top center',
        marker=dict(size=10, color=colors['tsi']),
        name='classes',
    ))
    fig = _apply_layout(fig, "Trigger Separability vs Attack Success", "TSI", "ASR")
    fig.update_yaxes(tickformat='.0%')
    return fig


def render_sweep_chart(summary: pd.DataFrame, key: str) -> go.Figure:
    """Seed-averaged mean ASR and benign accuracy for each swept value."""
    colors = get_chart_colors()
    values = summary['value'].astype(str)
    fig = go.Figure()
    fig.add_trace(go.Bar(x=values, y=summary['mean_asr'], name='Mean ASR', marker_color=colors['asr']))
    fig.add_trace(go.Bar(x=values, y=summary['benign_accuracy'], name='Benign accuracy',
                         marker_color=colors['benign']))
    fig = _apply_layout(fig, f"Sweep over {key}", key, "Rate")
    fig.update_layout(barmode='group')
    fig.update_yaxes(range=[0, 1.05], tickformat='.0%')
    return fig


def write_run_charts(run_dir: Path) -> List[Path]:
    """HTML charts for whichever run artifacts exist."""
    run_dir = Path(run_dir)
    figures_dir = run_dir / "figures"
    figures_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if (run_dir / "trigger_loss.csv").is_file():
        fig = render_loss_curve(pd.read_csv(run_dir / "trigger_loss.csv"))
        written.append(figures_dir / "trigger_loss.html")
        fig.write_html(written[-1], include_plotlyjs='cdn')

    if (run_dir / "per_class_asr.csv").is_file():
        fig = render_asr_bars(pd.read_csv(run_dir / "per_class_asr.csv"))
        written.append(figures_dir / "per_class_asr.html")
        fig.write_html(written[-1], include_plotlyjs='cdn')

    if (run_dir / "tsi_per_class.csv").is_file():
        fig = render_tsi_scatter(pd.read_csv(run_dir / "tsi_per_class.csv"))
        written.append(figures_dir / "tsi_vs_asr.html")
        fig.write_html(written[-1], include_plotlyjs='cdn')

    return written


def write_sweep_chart(sweep_dir: Path) -> Path:
    sweep_dir = Path(sweep_dir)
    summary = pd.read_csv(sweep_dir / "sweep_summary.csv", dtype={'value': str})
    fig = render_sweep_chart(summary, str(summary['key'].iloc[0]))
    path = sweep_dir / "sweep_summary.html"
    fig.write_html(path, include_plotlyjs='cdn')
    return path
