"""Framework-neutral data model.

All images are stored planar (channel-major), shape ``(C, H, W)``. The
channel order of the stacked network input and of the 4-channel target is
fixed here and nowhere else; other modules index through the constants
below.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import NonFiniteError, ShapeError

# Order of the four views inside the 12-channel input tensor.
INPUT_VIEWS = ("left_t", "left_t1", "right_t", "right_t1")
# Order of the scalar fields inside the 4-channel target tensor.
TARGET_CHANNELS = ("u", "v", "d_t", "d_t1")

FLOW_SLICE = slice(0, 2)
U, V, DISP_T, DISP_T1 = 0, 1, 2, 3
N_INPUT_CHANNELS = 3 * len(INPUT_VIEWS)
N_TARGET_CHANNELS = len(TARGET_CHANNELS)

# Tolerance on the [-1, 1] input range, absorbs float rounding of the
# uint8 -> float mapping.
_RANGE_EPS = 1e-6


def view_slice(name: str) -> slice:
    """Channel slice of view ``name`` inside the packed input tensor."""
    i = INPUT_VIEWS.index(name)
    return slice(3 * i, 3 * i + 3)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Image2D:
    """Real-valued planar image of shape ``(channels, height, width)``.

    A 2-D array is promoted to a single channel. ``strict=False`` skips the
    finiteness check; decoders use it and record the count of non-finite
    samples in ``meta["nonfinite_count"]`` instead.
    """

    data: np.ndarray
    meta: dict = field(default_factory=dict)
    strict: bool = True

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ShapeError(f"image must be 2-D or 3-D, got shape {arr.shape}")
        c, h, w = arr.shape
        if c not in (1, 3):
            raise ShapeError(f"image must have 1 or 3 channels, got {c}")
        if h < 1 or w < 1:
            raise ShapeError(f"image must be at least 1x1, got {h}x{w}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if self.strict and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"image contains {int((~np.isfinite(arr)).sum())} non-finite values")
        object.__setattr__(self, "data", _readonly(arr))
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def hw(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def plane(self, c: int = 0) -> np.ndarray:
        return self.data[c]

    def __eq__(self, other: Any) -> bool:
        # bit-exact comparison, NaN payloads included
        if not isinstance(other, Image2D):
            return NotImplemented
        return (
            self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def _channel_image(x, name, channels) -> Image2D:
    img = x if isinstance(x, Image2D) else Image2D(x)
    if img.channels != channels:
        raise ShapeError(f"{name} must have {channels} channel(s), got {img.channels}")
    return img


def _check_same_hw(named: dict[str, Image2D], what: str):
    ref_name, ref = next(iter(named.items()))
    for name, img in named.items():
        if img.hw != ref.hw:
            raise ShapeError(
                f"{what}: {name} is {img.height}x{img.width} but {ref_name} is {ref.height}x{ref.width}"
            )


@dataclass(frozen=True, eq=True)
class StereoQuad:
    """Left/right RGB pairs at t and t+1, values in [-1, 1]."""

    left_t: Image2D
    left_t1: Image2D
    right_t: Image2D
    right_t1: Image2D

    def __post_init__(self):
        views = {}
        for name in INPUT_VIEWS:
            img = _channel_image(getattr(self, name), name, 3)
            object.__setattr__(self, name, img)
            views[name] = img
        _check_same_hw(views, "stereo quad")
        for name, img in views.items():
            lo, hi = float(img.data.min()), float(img.data.max())
            if lo < -1 - _RANGE_EPS or hi > 1 + _RANGE_EPS:
                raise ValueError(f"{name} values outside [-1, 1]: [{lo}, {hi}]")

    @property
    def hw(self) -> tuple[int, int]:
        return self.left_t.hw


@dataclass(frozen=True, eq=True)
class FlowField:
    u: Image2D
    v: Image2D

    def __post_init__(self):
        object.__setattr__(self, "u", _channel_image(self.u, "u", 1))
        object.__setattr__(self, "v", _channel_image(self.v, "v", 1))
        _check_same_hw({"u": self.u, "v": self.v}, "flow field")

    @classmethod
    def from_array(cls, uv: np.ndarray) -> "FlowField":
        """Build from a ``(2, H, W)`` array."""
        uv = np.asarray(uv)
        if uv.ndim != 3 or uv.shape[0] != 2:
            raise ShapeError(f"flow array must be (2, H, W), got {uv.shape}")
        return cls(Image2D(uv[0]), Image2D(uv[1]))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.u.data, self.v.data], axis=0)

    @property
    def hw(self) -> tuple[int, int]:
        return self.u.hw


@dataclass(frozen=True, eq=True)
class DisparityPair:
    d_t: Image2D
    d_t1: Image2D

    def __post_init__(self):
        object.__setattr__(self, "d_t", _channel_image(self.d_t, "d_t", 1))
        object.__setattr__(self, "d_t1", _channel_image(self.d_t1, "d_t1", 1))
        _check_same_hw({"d_t": self.d_t, "d_t1": self.d_t1}, "disparity pair")

    @property
    def hw(self) -> tuple[int, int]:
        return self.d_t.hw


@dataclass(frozen=True, eq=True)
class SceneFlowField:
    """The 4-channel field ``(u, v, d_t, d_t1)`` on one pixel grid."""

    flow: FlowField
    disparities: DisparityPair

    def __post_init__(self):
        if self.flow.hw != self.disparities.hw:
            raise ShapeError(
                f"scene flow: flow is {self.flow.hw} but disparities are {self.disparities.hw}"
            )

    @property
    def hw(self) -> tuple[int, int]:
        return self.flow.hw

    def is_ground_truth_valid(self) -> bool:
        """Ground-truth disparities must be non-negative."""
        return bool((self.disparities.d_t.data >= 0).all() and (self.disparities.d_t1.data >= 0).all())


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo rig. Focal length and principal point in pixels, baseline in meters."""

    focal_length: float
    principal_point: tuple[float, float]
    baseline: float

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError(f"focal_length must be > 0, got {self.focal_length}")
        if not self.baseline > 0:
            raise ValueError(f"baseline must be > 0, got {self.baseline}")
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @property
    def cx(self) -> float:
        return self.principal_point[0]

    @property
    def cy(self) -> float:
        return self.principal_point[1]

    @property
    def fb(self) -> float:
        """Product focal_length * baseline; depth = fb / disparity."""
        return self.focal_length * self.baseline

    def to_dict(self) -> dict:
        return {
            "focal_length": self.focal_length,
            "principal_point": list(self.principal_point),
            "baseline": self.baseline,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(float(d["focal_length"]), tuple(d["principal_point"]), float(d["baseline"]))


def pack_input(quad: StereoQuad) -> np.ndarray:
    """Stack the four views into a ``(12, H, W)`` array in INPUT_VIEWS order."""
    views = {name: getattr(quad, name) for name in INPUT_VIEWS}
    _check_same_hw(views, "pack_input")
    return np.concatenate([views[name].data for name in INPUT_VIEWS], axis=0)


def unpack_input(arr: np.ndarray) -> StereoQuad:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[0] != N_INPUT_CHANNELS:
        raise ShapeError(f"input tensor must be ({N_INPUT_CHANNELS}, H, W), got {arr.shape}")
    return StereoQuad(**{name: Image2D(arr[view_slice(name)]) for name in INPUT_VIEWS})


def pack_target(sf: SceneFlowField) -> np.ndarray:
    """Stack ``(u, v, d_t, d_t1)`` into a ``(4, H, W)`` array."""
    planes = [sf.flow.u, sf.flow.v, sf.disparities.d_t, sf.disparities.d_t1]
    _check_same_hw(dict(zip(TARGET_CHANNELS, planes)), "pack_target")
    return np.concatenate([p.data for p in planes], axis=0)


def unpack_target(arr: np.ndarray) -> SceneFlowField:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[0] != N_TARGET_CHANNELS:
        raise ShapeError(f"target tensor must be ({N_TARGET_CHANNELS}, H, W), got {arr.shape}")
    return SceneFlowField(
        FlowField(Image2D(arr[U]), Image2D(arr[V])),
        DisparityPair(Image2D(arr[DISP_T]), Image2D(arr[DISP_T1])),
    )
