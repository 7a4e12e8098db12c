"""On-disk dataset layout and index.

Layout::

    root/<subset>/<split>/<sample-id>/
        left_t.png   left_t1.png   right_t.png   right_t1.png   (or .pfm)
        flow.flo                                                 (or flow.pfm)
        disp_t.pfm   disp_t1.pfm
        scene.json                                               (optional)

``scene.json``, when present, holds the camera rig and the scene description
used to render a synthetic sample.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .errors import FormatError, SceneFlowError
from .types import (
    CameraRig,
    DisparityPair,
    Image2D,
    SceneFlowField,
    StereoQuad,
    pack_input,
    pack_target,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
SUBSETS = ("A", "B", "C", "synthetic")
IMAGE_KEYS = ("left_t", "left_t1", "right_t", "right_t1")
IMAGE_SUFFIXES = (".png", ".pfm")
FLOW_NAMES = ("flow.flo", "flow.pfm")
SCENE_FILE = "scene.json"


@dataclass(frozen=True)
class SampleRecord:
    id: str
    left_t: Path
    left_t1: Path
    right_t: Path
    right_t1: Path
    flow: Path
    disp_t: Path
    disp_t1: Path
    scene: Path | None = None

    def paths(self) -> dict[str, Path]:
        keys = IMAGE_KEYS + ("flow", "disp_t", "disp_t1")
        return {k: getattr(self, k) for k in keys}


@dataclass
class DatasetIndex:
    samples: list[SampleRecord]
    split: str
    subset: str
    root: Path | None = None
    diagnostics: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def excluded_count(self) -> int:
        return len(self.diagnostics)


def sample_dir(root, subset: str, split: str, sample_id: str) -> Path:
    return Path(root) / subset / split / sample_id


def _locate(d: Path, stem: str, suffixes) -> Path | None:
    for s in suffixes:
        p = d / f"{stem}{s}"
        if p.is_file():
            return p
    return None


def _record_for(d: Path) -> tuple[SampleRecord | None, str | None]:
    found = {}
    missing = []
    for key in IMAGE_KEYS:
        found[key] = _locate(d, key, IMAGE_SUFFIXES)
    found["flow"] = next((d / n for n in FLOW_NAMES if (d / n).is_file()), None)
    for key in ("disp_t", "disp_t1"):
        found[key] = _locate(d, key, (".pfm",))
    missing = [k for k, p in found.items() if p is None]
    if missing:
        return None, f"{d.name}: missing {', '.join(missing)}"
    dims = {}
    try:
        for key, p in found.items():
            hdr = formats.sniff_header(p)
            dims[key] = (hdr["height"], hdr["width"])
    except (FormatError, OSError) as exc:
        return None, f"{d.name}: unreadable {key}: {exc}"
    if len(set(dims.values())) != 1:
        detail = ", ".join(f"{k}={h}x{w}" for k, (h, w) in dims.items())
        return None, f"{d.name}: inconsistent dimensions ({detail})"
    scene = d / SCENE_FILE
    return SampleRecord(id=d.name, scene=scene if scene.is_file() else None, **found), None


def build_index(root, split: str = "train", subset: str = "synthetic") -> DatasetIndex:
    """Scan ``root/<subset>/<split>`` and validate every sample directory.

    Samples are ordered by id (plain string sort). Incomplete samples are
    excluded and described in ``diagnostics``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    if subset not in SUBSETS:
        raise ValueError(f"subset must be one of {SUBSETS}, got {subset!r}")
    base = root / subset / split
    index = DatasetIndex(samples=[], split=split, subset=subset, root=root)
    if not base.is_dir():
        return index
    for d in sorted((p for p in base.iterdir() if p.is_dir()), key=lambda p: p.name):
        rec, problem = _record_for(d)
        if rec is None:
            log.warning("excluding sample %s", problem)
            index.diagnostics.append(problem)
        else:
            index.samples.append(rec)
    if index.diagnostics:
        log.warning("%d sample(s) excluded from %s", len(index.diagnostics), base)
    return index


def load_scene_meta(rec: SampleRecord) -> dict | None:
    if rec.scene is None:
        return None
    return json.loads(Path(rec.scene).read_text())


def load_rig(rec: SampleRecord) -> CameraRig | None:
    meta = load_scene_meta(rec)
    if meta is None:
        return None
    return CameraRig.from_dict(meta["rig"])


def load_sample(rec: SampleRecord) -> tuple[StereoQuad, SceneFlowField]:
    quad = StereoQuad(**{k: formats.load_image(getattr(rec, k)) for k in IMAGE_KEYS})
    flow = formats.load_flow(rec.flow)
    d_t = formats.load_disparity(rec.disp_t)
    d_t1 = formats.load_disparity(rec.disp_t1)
    for name, img in (("flow.u", flow.u), ("flow.v", flow.v), ("disp_t", d_t), ("disp_t1", d_t1)):
        if img.meta.get("nonfinite_count"):
            raise SceneFlowError(f"{rec.id}: {name} has {img.meta['nonfinite_count']} non-finite values")
    gt = SceneFlowField(flow, DisparityPair(Image2D(d_t.data, meta=d_t.meta), Image2D(d_t1.data, meta=d_t1.meta)))
    return quad, gt


def load_arrays(index: DatasetIndex, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Decode every sample into stacked ``(N, 12, H, W)`` and ``(N, 4, H, W)`` arrays."""
    xs, ys = [], []
    for rec in index:
        quad, gt = load_sample(rec)
        xs.append(pack_input(quad).astype(dtype))
        ys.append(pack_target(gt).astype(dtype))
    if not xs:
        raise SceneFlowError("dataset index is empty")
    return np.stack(xs), np.stack(ys)
