"""Full-reference quality metrics plus trajectory and spectrum diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union
from xml.sax.saxutils import escape

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import structure
from .errors import ConfigError, DimensionError, NumericalError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; exact matches give 99."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r * r) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter over the first two axes, valid positions only."""
    x = sliding_window_view(x, g.size, axis=0) @ g
    return sliding_window_view(x, g.size, axis=1) @ g


def ssim(a, b) -> float:
    """Single-scale SSIM, per channel then averaged, over valid window positions."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim needs equal shapes, got {a.shape} and {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise DimensionError(f"ssim expects (H, W) or (H, W, C), got {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise DimensionError(f"image {a.shape[0]}x{a.shape[1]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(axis=(0, 1))
    return float(per_channel.mean())


def trajectory_curvature(snapshots) -> float:
    """Path length over endpoint distance, minus one.

    Accepts a ``TrajectoryRecord`` or a sequence of arrays ordered X_T .. X_0.
    """
    snaps = getattr(snapshots, "snapshots", snapshots)
    if len(snaps) < 3:
        raise ConfigError(f"curvature needs at least 3 snapshots, got {len(snaps)}")
    flat = np.stack([_arr(s).ravel() for s in snaps])
    chord = float(np.linalg.norm(flat[-1] - flat[0]))
    if chord == 0.0:
        raise NumericalError("curvature undefined: trajectory endpoints coincide")
    path = float(np.linalg.norm(np.diff(flat, axis=0), axis=1).sum())
    return max(0.0, path / chord - 1.0)


def spectrum_gap(x_hat, x0, b: int = 4, k: Optional[int] = None, algo: str = "hierarchical",
                 seed: int = 0) -> float:
    """Mean singular-value gap between clusters of ``x_hat`` and ``x0``; clusters come from ``x0``."""
    x_hat, x0 = _arr(x_hat), _arr(x0)
    if x_hat.shape != x0.shape:
        raise DimensionError(f"spectrum_gap needs equal shapes, got {x_hat.shape} and {x0.shape}")
    clusters = structure.cluster_image(x0, b, k, algo, seed)
    _, rec_blocks = structure.patchify(x_hat, b)
    _, gt_blocks = structure.patchify(x0, b)
    loss = structure.rank_loss(structure.build_matrices(clusters, rec_blocks),
                               structure.build_matrices(clusters, gt_blocks))
    return float(loss.data)


# -- reports -------------------------------------------------------------------

@dataclass
class EvalRow:
    image_id: str
    psnr: float
    ssim: float
    curvature: Optional[float] = None
    spectrum_gap: Optional[float] = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    def mean(self, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        if not vals:
            return float("nan")
        return float(np.mean(vals))

    @property
    def has_curvature(self) -> bool:
        return any(r.curvature is not None for r in self.rows)

    @property
    def has_gap(self) -> bool:
        return any(r.spectrum_gap is not None for r in self.rows)

    def to_csv(self, path) -> None:
        cols = ["image_id", "psnr", "ssim"]
        if self.has_curvature:
            cols.append("curvature")
        if self.has_gap:
            cols.append("spectrum_gap")

        def fmt(v):
            return "" if v is None else f"{v:.9g}"

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r.image_id] + [fmt(getattr(r, c)) for c in cols[1:]])


# -- plotting ----------------------------------------------------------------

Series = Union[Mapping[str, Sequence], Sequence]
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]


def _normalize_series(series) -> list[tuple[str, np.ndarray, np.ndarray]]:
    items = series.items() if isinstance(series, Mapping) else series
    out = []
    for name, pts in items:
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise ConfigError(f"series {name!r} must be a non-empty list of (x, y) points")
        if not np.all(np.isfinite(pts)):
            raise ConfigError(f"series {name!r} contains non-finite points")
        out.append((str(name), pts[:, 0], pts[:, 1]))
    if not out:
        raise ConfigError("emit_plot needs at least one series")
    return out


def emit_plot(series: Series, path, title: str = "", xlabel: str = "x", ylabel: str = "y") -> None:
    """Write a self-contained SVG line chart, one polyline per series."""
    data = _normalize_series(series)
    W, H, left, right, top, bottom = 640, 400, 70, 150, 40, 50
    xs = np.concatenate([d[1] for d in data])
    ys = np.concatenate([d[2] for d in data])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = W - left - right, H - top - bottom

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        lines.append(f'<text x="{sx(xv):.2f}" y="{top + ph + 16}" font-size="11" '
                     f'text-anchor="middle">{xv:.4g}</text>')
        lines.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.2f}" font-size="11" '
                     f'text-anchor="end">{yv:.4g}</text>')
    lines.append(f'<text x="{left + pw / 2:.1f}" y="{H - 10}" font-size="13" '
                 f'text-anchor="middle">{escape(xlabel)}</text>')
    lines.append(f'<text x="16" y="{top + ph / 2:.1f}" font-size="13" text-anchor="middle" '
                 f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    if title:
        lines.append(f'<text x="{W / 2:.1f}" y="22" font-size="15" text-anchor="middle">{escape(title)}</text>')
    for i, (name, px, py) in enumerate(data):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(px, py))
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 18 * i
        lines.append(f'<rect x="{left + pw + 12}" y="{ly - 9}" width="12" height="3" fill="{color}"/>')
        lines.append(f'<text x="{left + pw + 30}" y="{ly}" font-size="12">{escape(name)}</text>')
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
