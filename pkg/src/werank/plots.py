"""Deterministic hand-written SVG line plots of spectrum traces.

Output depends only on the input traces: fixed canvas, fixed number
formatting, no timestamps or random ids.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .evaluation import RankReport, derive_ranks

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=16, top=36, bottom=48)
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xs: np.ndarray, ys: np.ndarray):
        self.x0, self.x1 = float(np.min(xs)), float(np.max(xs))
        self.y0, self.y1 = min(0.0, float(np.min(ys))), float(np.max(ys))
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
        ]
        self._axes()

    def px(self, x: float) -> float:
        span = WIDTH - MARGIN["left"] - MARGIN["right"]
        return MARGIN["left"] + span * (x - self.x0) / (self.x1 - self.x0)

    def py(self, y: float) -> float:
        span = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        return HEIGHT - MARGIN["bottom"] - span * (y - self.y0) / (self.y1 - self.y0)

    def _axes(self):
        left, bottom = MARGIN["left"], HEIGHT - MARGIN["bottom"]
        self.parts.append(f'<line x1="{left}" y1="{bottom}" x2="{WIDTH - MARGIN["right"]}" '
                          f'y2="{bottom}" stroke="black"/>')
        self.parts.append(f'<line x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>')
        for t in _ticks(self.x0, self.x1):
            self.parts.append(f'<text x="{_fmt(self.px(t))}" y="{bottom + 16}" text-anchor="middle" '
                              f'font-size="10">{t:g}</text>')
        for t in _ticks(self.y0, self.y1):
            self.parts.append(f'<text x="{left - 6}" y="{_fmt(self.py(t) + 3)}" text-anchor="end" '
                              f'font-size="10">{t:.3g}</text>')

    def line(self, xs, ys, color: str, dashed: bool = False, label: Optional[str] = None):
        pts = " ".join(f"{_fmt(self.px(x))},{_fmt(self.py(y))}" for x, y in zip(xs, ys))
        dash = ' stroke-dasharray="4 3"' if dashed else ""
        title = f"<title>{escape(label)}</title>" if label else ""
        self.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} '
                          f'points="{pts}">{title}</polyline>')

    def legend(self, entries: Sequence[tuple[str, str, bool]]):
        y = MARGIN["top"] + 4
        for label, color, dashed in entries:
            x = WIDTH - MARGIN["right"] - 150
            dash = ' stroke-dasharray="4 3"' if dashed else ""
            self.parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 20}" y2="{y}" stroke="{color}"{dash}/>')
            self.parts.append(f'<text x="{x + 26}" y="{y + 4}" font-size="10">{escape(label)}</text>')
            y += 14

    def write(self, path: Path) -> Path:
        path.write_text("\n".join(self.parts + ["</svg>"]) + "\n", encoding="utf-8")
        return path


def _is_regularized(run_dir: Path) -> bool:
    meta_path = run_dir / "meta.json"
    if not meta_path.is_file():
        return False
    cfg = json.loads(meta_path.read_text(encoding="utf-8")).get("config", {})
    wr = cfg.get("werank") or {}
    return any(a > 0 for a in wr.get("alphas", []))


def plot_spectra(run_dir: Path, matrix_id: Optional[str] = None) -> Path:
    """Every singular value of one tracked matrix against epoch."""
    report = RankReport.read_trace(run_dir / "trace.csv")
    ids = report.matrix_ids()
    if not ids:
        raise ValueError(f"{run_dir}: empty trace")
    mid = matrix_id or ids[0]
    epochs, sig = report.series(mid)
    c = _Canvas(f"{run_dir.name}: {mid} spectrum", "epoch", "singular value", epochs, sig)
    for i in range(sig.shape[1]):
        c.line(epochs, sig[:, i], PALETTE[i % len(PALETTE)], label=f"sigma_{i + 1}")
    return c.write(run_dir / f"spectra_{mid}.svg")


def plot_ranks(run_dirs: Sequence[Path], out: Path, matrix_id: Optional[str] = None) -> Path:
    """Effective rank against epoch; dotted lines mark regularized arms."""
    series = []
    for run in run_dirs:
        rows = derive_ranks(RankReport.read_trace(run / "trace.csv"))
        ids = list(dict.fromkeys(r.matrix_id for r in rows))
        for mid in ([matrix_id] if matrix_id else ids):
            pts = [(r.epoch, r.effective_rank) for r in rows if r.matrix_id == mid]
            if pts:
                series.append((f"{run.name}:{mid}", np.array(pts), _is_regularized(run)))
    if not series:
        raise ValueError("no rank series to plot")
    xs = np.concatenate([s[:, 0] for _, s, _ in series])
    ys = np.concatenate([s[:, 1] for _, s, _ in series])
    c = _Canvas("effective rank", "epoch", "effective rank", xs, ys)
    legend = []
    for i, (label, s, dashed) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        c.line(s[:, 0], s[:, 1], color, dashed, label)
        legend.append((label, color, dashed))
    c.legend(legend[:12])
    return c.write(out)


def plot_final(run_dirs: Sequence[Path], out: Path, matrix_id: str = "W1") -> Path:
    """Final spectrum against index; solid = baseline, dotted = regularized."""
    curves = []
    for run in run_dirs:
        sig = RankReport.read_trace(run / "trace.csv").final(matrix_id).sigmas
        curves.append((run.name, sig, _is_regularized(run)))
    xs = np.concatenate([np.arange(1, len(s) + 1) for _, s, _ in curves])
    ys = np.concatenate([s for _, s, _ in curves])
    c = _Canvas(f"final {matrix_id} spectrum", "index", "singular value", xs, ys)
    legend = []
    for i, (label, sig, dashed) in enumerate(curves):
        color = PALETTE[(i // 2 if len(curves) > 1 else i) % len(PALETTE)]
        c.line(np.arange(1, len(sig) + 1), sig, color, dashed, label)
        legend.append((label, color, dashed))
    c.legend(legend[:12])
    return c.write(out)
