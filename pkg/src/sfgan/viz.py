"""File-based renderings of flow, disparity and loss curves."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from .types import DISP_T, DISP_T1, FlowField, Image2D


def flow_to_rgb(flow, max_magnitude: float | None = None) -> np.ndarray:
    """Colour-wheel encoding of a ``(2, H, W)`` flow as ``(H, W, 3)`` uint8.

    Hue is the direction ``atan2(v, u)``; saturation grows linearly with
    magnitude up to ``max_magnitude`` (default: the field's own maximum).
    Zero flow is white.
    """
    if isinstance(flow, FlowField):
        flow = flow.as_array()
    u, v = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(u, v)
    top = float(max_magnitude) if max_magnitude else float(mag.max())
    sat = np.clip(mag / top, 0.0, 1.0) if top > 0 else np.zeros_like(mag)
    hue = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi)
    hsv = np.stack([hue, sat, np.ones_like(mag)], axis=-1)
    return np.rint(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def disparity_to_gray(d, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linear map of ``[lo, hi]`` (default the field's range) onto 0..255; constant fields give 128."""
    if isinstance(d, Image2D):
        d = d.data[0]
    d = np.asarray(d, dtype=np.float64)
    d = d[0] if d.ndim == 3 else d
    lo = float(d.min()) if lo is None else lo
    hi = float(d.max()) if hi is None else hi
    if hi <= lo:
        return np.full(d.shape, 128, dtype=np.uint8)
    return np.rint(np.clip((d - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def _save(path, arr):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def visualize_flow(flow, path, max_magnitude: float | None = None) -> Path:
    return _save(path, flow_to_rgb(flow, max_magnitude))


def visualize_disparity(d, path, lo=None, hi=None) -> Path:
    """Write a grayscale PNG and a ``.json`` sidecar holding the display range."""
    if isinstance(d, Image2D):
        d = d.data[0]
    d = np.asarray(d, dtype=np.float64)
    lo = float(d.min()) if lo is None else lo
    hi = float(d.max()) if hi is None else hi
    path = _save(path, disparity_to_gray(d, lo, hi))
    path.with_suffix(".json").write_text(json.dumps({"min": lo, "max": hi}))
    return path


def render_panels(pred: np.ndarray, gt: np.ndarray, out_dir) -> list[Path]:
    """Flow and both disparities for prediction and ground truth, on shared display ranges."""
    out_dir = Path(out_dir)
    pred, gt = np.asarray(pred), np.asarray(gt)
    top = float(np.hypot(gt[0], gt[1]).max()) or None
    paths = []
    for tag, field in (("gt", gt), ("pred", pred)):
        paths.append(visualize_flow(field[:2], out_dir / f"{tag}_flow.png", top))
        for name, ch in (("disp_t", DISP_T), ("disp_t1", DISP_T1)):
            lo, hi = float(gt[ch].min()), float(gt[ch].max())
            paths.append(visualize_disparity(field[ch], out_dir / f"{tag}_{name}.png", lo, hi))
    return paths


def plot_curves(curves: dict, path, title: str = "training joint loss") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in curves.items():
        ax.plot(np.arange(len(ys)), ys, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("joint loss (px)")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
