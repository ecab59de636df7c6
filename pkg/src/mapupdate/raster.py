"""Low-level raster drawing used by the synthetic renderer and diff imagery.

All drawing happens on float32 canvases in [0, 1] (grayscale) or [0, 1]^3
(RGB), pixel coordinates x right / y down. Geometry outside the canvas is
clipped, never an error.
"""

from __future__ import annotations

import numpy as np

_STAMP_STEP_PX = 0.4


def _disk_offsets(radius_px: float) -> np.ndarray:
    r = max(0.0, float(radius_px))
    n = int(np.ceil(r))
    ys, xs = np.mgrid[-n:n + 1, -n:n + 1]
    keep = (xs ** 2 + ys ** 2) <= max(r, 0.5) ** 2
    return np.stack([xs[keep], ys[keep]], axis=1)


def _arc_samples(points_px: np.ndarray, closed: bool) -> tuple[np.ndarray, np.ndarray]:
    """Dense sample positions along a polyline plus their arc length."""
    pts = np.asarray(points_px, dtype=np.float64)
    if closed and len(pts) > 1:
        pts = np.concatenate([pts, pts[:1]], axis=0)
    if len(pts) == 1:
        return pts, np.zeros(1)
    seg = pts[1:] - pts[:-1]
    seg_len = np.sqrt((seg ** 2).sum(axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    if total <= 0:
        return pts[:1], np.zeros(1)
    n = max(2, int(total / _STAMP_STEP_PX) + 1)
    s = np.linspace(0.0, total, n)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_len) - 1)
    denom = np.where(seg_len[idx] > 0, seg_len[idx], 1.0)
    frac = (s - cum[idx]) / denom
    return pts[idx] + frac[:, None] * seg[idx], s


def draw_polyline(canvas: np.ndarray, points_px, intensity, width_px: float = 1.5,
                  dash_px: tuple[float, float] | None = None, closed: bool = False) -> None:
    """Stamp a stroked polyline onto the canvas with max blending.

    ``dash_px`` is an (on, off) period in pixels; ``intensity`` is a scalar
    for grayscale canvases or a length-3 sequence for RGB.
    """
    centers, arc = _arc_samples(np.asarray(points_px, dtype=np.float64), closed)
    if dash_px is not None:
        on, off = dash_px
        period = max(on + off, 1e-6)
        keep = (arc % period) < on
        centers = centers[keep]
    if len(centers) == 0:
        return
    offsets = _disk_offsets(width_px / 2.0)
    h, w = canvas.shape[:2]
    px = np.rint(centers[:, 0]).astype(np.int64)
    py = np.rint(centers[:, 1]).astype(np.int64)
    color = np.asarray(intensity, dtype=np.float32)
    for dx, dy in offsets:
        xs = px + dx
        ys = py + dy
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        if not ok.any():
            continue
        if canvas.ndim == 2:
            np.maximum.at(canvas, (ys[ok], xs[ok]), color)
        else:
            for ch in range(canvas.shape[2]):
                np.maximum.at(canvas[:, :, ch], (ys[ok], xs[ok]), color[ch])


def fill_rect(canvas: np.ndarray, x0: float, y0: float, x1: float, y1: float, intensity) -> None:
    """Overwrite a pixel-aligned rectangle (used for occlusion patches)."""
    h, w = canvas.shape[:2]
    xa = int(np.clip(np.floor(min(x0, x1)), 0, w))
    xb = int(np.clip(np.ceil(max(x0, x1)), 0, w))
    ya = int(np.clip(np.floor(min(y0, y1)), 0, h))
    yb = int(np.clip(np.ceil(max(y0, y1)), 0, h))
    if xa >= xb or ya >= yb:
        return
    canvas[ya:yb, xa:xb] = intensity
