"""Result files: per-step and aggregate CSV, a JSON summary and static SVG line plots."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .filters import CODKF
from .sim import MonteCarloResult

PER_STEP_HEADER = ("run_id", "k", "filter", "node_id", "sq_error", "trace_M", "rho", "cert_rank", "certified")
AGGREGATE_HEADER = ("k", "filter", "mean_MSE", "mean_rho", "cert_rate")


def fmt(x) -> str:
    """Locale-independent shortest round-trip formatting; empty for missing values."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def write_per_step(path: Path, res: MonteCarloResult) -> int:
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_STEP_HEADER)
        for run in res.runs:
            for k in range(res.config.steps):
                for fam in res.config.filters:
                    if k >= run.completed(fam):
                        continue
                    sq, tr = run.sq_error[fam][k], run.trace_M[fam][k]
                    for i in range(run.node_count):
                        if fam == CODKF:
                            extra = (fmt(run.rho[k, i]), str(int(run.cert_rank[k, i])), str(int(run.certified[k, i])))
                        else:
                            extra = ("", "", "")
                        w.writerow((run.run_id, k, fam, i, fmt(sq[i]), fmt(tr[i])) + extra)
                        rows += 1
    return rows


def write_aggregate(path: Path, res: MonteCarloResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for k in range(res.config.steps):
            for fam in res.config.filters:
                if fam == CODKF:
                    extra = (fmt(res.mean_rho[k]), fmt(res.cert_rate_k[k]))
                else:
                    extra = ("", "")
                w.writerow((k, fam, fmt(res.mean_mse[fam][k])) + extra)


def summary(res: MonteCarloResult) -> dict:
    cfg = res.config
    out = {
        "config": cfg.to_dict(),
        "wall_clock_s": res.wall_clock,
        "success_rate": {f: res.success_rate(f) for f in cfg.filters},
        "steady_state_mse": {f: _finite(res.steady_state_mse(f)) for f in cfg.filters if cfg.steps},
        "diverged_runs": {f: [r.run_id for r in res.runs if r.diverged[f] is not None] for f in cfg.filters},
    }
    if CODKF in cfg.filters:
        out["cert_rate"] = _finite(res.cert_rate)
        out["rank_one_rate"] = _finite(res.rank_one_rate)
        out["fusion_failures"] = int(sum(r.fusion_failures for r in res.runs))
        out["certificate_anomalies"] = int(sum(r.anomalies for r in res.runs))
        out["tolerances"] = {"tol_rank": cfg.tol_rank, "tol_rho": cfg.tol_rho, "eps_feas": cfg.eps_feas}
    if "cdkf" in cfg.filters:
        out["cdkf_success_rate"] = res.success_rate("cdkf")
    return out


def _finite(x: float) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)


def write_summary(path: Path, res: MonteCarloResult) -> dict:
    data = summary(res)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return data


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def svg_line_plot(
    series: Sequence[tuple[str, np.ndarray, np.ndarray]],
    title: str,
    xlabel: str,
    ylabel: str,
    log_y: bool = False,
    width: int = 640,
    height: int = 400,
) -> str:
    """Polyline plot; non-finite (and, on a log axis, non-positive) points break the line."""
    left, right, top, bottom = 70, 140, 30, 50
    pw, ph = width - left - right, height - top - bottom

    def ty(v):
        return np.log10(v) if log_y else v

    xs_all, ys_all = [], []
    for _, x, y in series:
        ok = np.isfinite(y) & ((y > 0) if log_y else True)
        xs_all.append(x[ok])
        ys_all.append(ty(y[ok]))
    xs = np.concatenate(xs_all) if xs_all else np.array([])
    ys = np.concatenate(ys_all) if ys_all else np.array([])
    x0, x1 = (xs.min(), xs.max()) if xs.size else (0.0, 1.0)
    y0, y1 = (ys.min(), ys.max()) if ys.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
        f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 15 {top + ph / 2:.1f})">{ylabel}</text>',
    ]
    for frac in np.linspace(0, 1, 5):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        label = f"1e{yv:.1f}" if log_y else f"{yv:.3g}"
        parts.append(f'<text x="{px(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{xv:.4g}</text>')
        parts.append(f'<text x="{left - 5}" y="{py(yv) + 4:.1f}" text-anchor="end">{label}</text>')
    for idx, (name, x, y) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        segment: list[str] = []
        segments = []
        for xv, yv in zip(x, y):
            if np.isfinite(yv) and (yv > 0 or not log_y):
                segment.append(f"{px(xv):.2f},{py(ty(yv)):.2f}")
            elif segment:
                segments.append(segment)
                segment = []
        if segment:
            segments.append(segment)
        for seg in segments:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{" ".join(seg)}"/>')
        ly = top + 12 + 14 * idx
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_plots(out_dir: Path, res: MonteCarloResult) -> list[Path]:
    cfg = res.config
    k = np.arange(cfg.steps, dtype=float)
    written = []
    series = [(f, k, res.mean_mse[f]) for f in cfg.filters]
    path = out_dir / "mse.svg"
    path.write_text(svg_line_plot(series, "Network MSE (mean over runs)", "step k", "MSE", log_y=True))
    written.append(path)
    half = cfg.steps // 2
    series = [(f, k[half:], res.mean_mse[f][half:]) for f in cfg.filters]
    path = out_dir / "mse_steady.svg"
    path.write_text(svg_line_plot(series, "Network MSE near steady state", "step k", "MSE", log_y=True))
    written.append(path)
    if CODKF in cfg.filters and res.runs:
        run = res.runs[0]
        series = [(f"node {i}", k, run.rho[:, i]) for i in range(run.node_count)]
        path = out_dir / "rho.svg"
        path.write_text(svg_line_plot(series, f"Certificate ratio per node (run {run.run_id})", "step k", "rho"))
        written.append(path)
    return written
