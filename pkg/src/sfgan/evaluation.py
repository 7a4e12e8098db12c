"""Test-set metrics and pinhole reconstruction of 3D scene flow."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetIndex, SampleRecord, load_sample
from .errors import SceneFlowError
from .networks import ParameterSet, generator_forward
from .types import DISP_T, DISP_T1, CameraRig, SceneFlowField, pack_input, pack_target

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("Flow", "d_1", "d_2")


# -- predictors -------------------------------------------------------------
# A predictor maps (packed 12xHxW input, sample record) to a 4xHxW array.

class GeneratorPredictor:
    def __init__(self, params: ParameterSet):
        self.params = params
        self.dtype = next(iter(params.tensors.values())).dtype

    def __call__(self, inputs: np.ndarray, rec: SampleRecord) -> np.ndarray:
        with torch.no_grad():
            out = generator_forward(self.params, torch.as_tensor(inputs, dtype=self.dtype), training=False)
        return out.double().numpy()


def ground_truth_predictor(inputs, rec):
    """Returns the sample's own ground truth; every error is zero."""
    return pack_target(load_sample(rec)[1]).astype(np.float64)


def zero_predictor(inputs, rec):
    return np.zeros((4,) + inputs.shape[1:])


def _as_predictor(p):
    return GeneratorPredictor(p) if isinstance(p, ParameterSet) else p


# -- metrics ----------------------------------------------------------------

def sample_errors(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """Per-sample mean EPE and mean absolute d_t / d_t1 errors."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise SceneFlowError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    d = pred - gt
    flow = float(np.sqrt(d[0] ** 2 + d[1] ** 2).mean())
    return flow, float(np.abs(d[DISP_T]).mean()), float(np.abs(d[DISP_T1]).mean())


@dataclass
class SplitMetrics:
    flow: float
    d1: float
    d2: float
    count: int
    excluded: int = 0

    def values(self):
        return (self.flow, self.d1, self.d2)


@dataclass
class MetricsReport:
    """Errors per test subset for one model: flow EPE, d_t and d_t1 mean absolute error."""

    model_tag: str
    rows: dict[str, SplitMetrics] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "rows": {
                k: {"flow": m.flow, "d_1": m.d1, "d_2": m.d2, "count": m.count, "excluded": m.excluded}
                for k, m in self.rows.items()
            },
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_values(cls, model_tag: str, rows: dict[str, tuple[float, float, float]]) -> "MetricsReport":
        return cls(model_tag, {k: SplitMetrics(*v, count=0) for k, v in rows.items()})


def render_table(reports, digits: int = 2) -> str:
    """Render one or more reports side by side.

    Two header lines (model tags, then metric names) followed by one line
    per test subset: ``A | 72.33 | 33.68 | 32.82``.
    """
    if isinstance(reports, MetricsReport):
        reports = [reports]
    subsets = []
    for r in reports:
        subsets += [s for s in r.rows if s not in subsets]
    tags = " | ".join(" | ".join([r.model_tag, "", ""]) for r in reports)
    names = " | ".join(" | ".join(METRIC_COLUMNS) for _ in reports)
    lines = [f"  | {tags}".rstrip(), f"  | {names}"]
    for s in subsets:
        cells = []
        for r in reports:
            m = r.rows.get(s)
            cells += [f"{v:.{digits}f}" for v in m.values()] if m else ["-"] * 3
        lines.append(" | ".join([s] + cells))
    return "\n".join(lines)


def evaluate(predictor, index: DatasetIndex, model_tag: str = "model", row: str | None = None) -> MetricsReport:
    """Per-sample errors averaged uniformly over the samples of ``index``.

    ``predictor`` is a generator ParameterSet (run in inference mode) or a
    callable ``(inputs, record) -> (4, H, W)``. Samples that fail to decode
    are excluded and listed in ``diagnostics``.
    """
    predict = _as_predictor(predictor)
    errs, diags = [], list(index.diagnostics)
    for rec in index:
        try:
            quad, gt = load_sample(rec)
        except (SceneFlowError, OSError, ValueError) as exc:
            log.warning("excluding %s: %s", rec.id, exc)
            diags.append(f"{rec.id}: {exc}")
            continue
        inputs = pack_input(quad)
        errs.append(sample_errors(predict(inputs, rec), pack_target(gt)))
    n = len(errs)
    # fsum makes the average independent of sample order
    means = [math.fsum(e[i] for e in errs) / n if n else float("nan") for i in range(3)]
    key = row or index.subset
    report = MetricsReport(model_tag, {key: SplitMetrics(*means, count=n, excluded=len(diags))}, diags)
    return report


def merge_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Combine per-subset reports of one model into a single report."""
    out = MetricsReport(reports[0].model_tag)
    for r in reports:
        out.rows.update(r.rows)
        out.diagnostics += r.diagnostics
    return out


# -- reconstruction ---------------------------------------------------------

@dataclass
class PointFlowCloud:
    """Per-pixel 3D position at t and motion to t+1, both ``(3, H, W)`` in meters."""

    points: np.ndarray
    motion: np.ndarray
    mask: np.ndarray  # True where both disparities are positive

    def rows(self) -> np.ndarray:
        """``(N, 6)`` array of X Y Z dX dY dZ over valid pixels."""
        return np.concatenate([self.points[:, self.mask].T, self.motion[:, self.mask].T], axis=1)

    def save_xyz(self, path):
        np.savetxt(path, self.rows(), fmt="%.9g", header="X Y Z dX dY dZ")


def _planes(sf):
    if isinstance(sf, SceneFlowField):
        sf = pack_target(sf)
    sf = np.asarray(sf, dtype=np.float64)
    return sf[0], sf[1], sf[DISP_T], sf[DISP_T1]


def reconstruct_point_flow(sf, rig: CameraRig) -> PointFlowCloud:
    """Back-project the 4-channel field through the pinhole model.

    ``Z_t = f B / d_t`` at pixel ``(x, y)``; the t+1 point uses pixel
    ``(x + u, y + v)`` and ``Z_t1 = f B / d_t1`` sampled at the reference
    pixel. Pixels with a non-positive disparity are masked (NaN).
    """
    u, v, d0, d1 = _planes(sf)
    h, w = u.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    f, cx, cy = rig.focal_length, rig.cx, rig.cy
    mask = (d0 > 0) & (d1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z0 = np.where(mask, rig.fb / np.where(mask, d0, 1.0), np.nan)
        z1 = np.where(mask, rig.fb / np.where(mask, d1, 1.0), np.nan)
    p0 = np.stack([(xs - cx) * z0 / f, (ys - cy) * z0 / f, z0])
    p1 = np.stack([(xs + u - cx) * z1 / f, (ys + v - cy) * z1 / f, z1])
    return PointFlowCloud(p0, p1 - p0, mask)


def reproject_flow(cloud: PointFlowCloud, rig: CameraRig) -> np.ndarray:
    """Optical flow implied by projecting ``P_t`` and ``P_t + dP`` into the left camera."""
    f, cx, cy = rig.focal_length, rig.cx, rig.cy
    p0, p1 = cloud.points, cloud.points + cloud.motion
    x0, y0 = f * p0[0] / p0[2] + cx, f * p0[1] / p0[2] + cy
    x1, y1 = f * p1[0] / p1[2] + cx, f * p1[1] / p1[2] + cy
    return np.stack([x1 - x0, y1 - y0])


def projection_consistency_check(sf, rig: CameraRig) -> dict:
    """Residual (pixels) between reprojected 3D motion and the stored flow on unmasked pixels."""
    u, v, _, _ = _planes(sf)
    cloud = reconstruct_point_flow(sf, rig)
    uv = reproject_flow(cloud, rig)
    res = np.hypot(uv[0] - u, uv[1] - v)[cloud.mask]
    if res.size == 0:
        return {"valid": 0, "masked": int((~cloud.mask).sum()), "mean": 0.0, "max": 0.0, "rms": 0.0}
    return {
        "valid": int(res.size),
        "masked": int((~cloud.mask).sum()),
        "mean": float(res.mean()),
        "max": float(res.max()),
        "rms": float(np.sqrt((res**2).mean())),
    }


def write_report(report, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt, js = out_dir / "report.txt", out_dir / "report.json"
    txt.write_text(render_table(report) + "\n")
    js.write_text(report.to_json())
    return txt, js
