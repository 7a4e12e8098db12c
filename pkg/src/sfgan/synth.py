"""Procedural stereo scene-flow samples with closed-form ground truth.

A scene is a textured background plane plus a few fronto-parallel textured
rectangles translating rigidly in 3D. The left camera sits at the origin and
the right camera at ``(baseline, 0, 0)``; both share the rig intrinsics.
Textures are finite sums of sinusoids in surface coordinates, so the colour
of a surface point is known exactly in every view and frame.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import formats
from .dataset import DatasetIndex, build_index, sample_dir
from .errors import SceneFlowError, ShapeError
from .types import CameraRig, DisparityPair, FlowField, Image2D, SceneFlowField, StereoQuad

log = logging.getLogger(__name__)

# Texture frequency band, cycles per pixel at the surface's depth at t.
TEXTURE_BAND = (0.02, 0.1)
N_WAVES = 6
BACKGROUND_ID = 0


@dataclass(frozen=True)
class ObjectSpec:
    position: tuple[float, float, float]
    size: tuple[float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    texture_seed: int = 0

    def __post_init__(self):
        z, vz = self.position[2], self.velocity[2]
        if not z > 0 or not z + vz > 0:
            raise ValueError(f"object must stay in front of the cameras: Z={z}, Z+Vz={z + vz}")
        if min(self.size) <= 0:
            raise ValueError(f"object size must be positive, got {self.size}")


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    rig: CameraRig
    background_depth: float
    objects: tuple[ObjectSpec, ...] = ()
    network_depth: int = 4
    degrade: bool = False

    def __post_init__(self):
        m = 2 ** self.network_depth
        if self.height % m or self.width % m:
            raise ShapeError(f"image size {self.height}x{self.width} must be divisible by {m}")
        if not self.background_depth > 0:
            raise ValueError("background_depth must be > 0")
        object.__setattr__(self, "objects", tuple(self.objects))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rig"] = self.rig.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["rig"] = CameraRig.from_dict(d["rig"])
        d["objects"] = tuple(
            ObjectSpec(
                position=tuple(o["position"]),
                size=tuple(o["size"]),
                velocity=tuple(o.get("velocity", (0.0, 0.0, 0.0))),
                texture_seed=int(o.get("texture_seed", 0)),
            )
            for o in d.get("objects", ())
        )
        return cls(**d)


def default_rig(height: int = 64, width: int = 64) -> CameraRig:
    return CameraRig(focal_length=60.0, principal_point=((width - 1) / 2, (height - 1) / 2), baseline=0.2)


def random_scene(
    seed: int,
    height: int = 64,
    width: int = 64,
    n_objects: tuple[int, int] = (2, 4),
    max_lateral_px: float = 6.0,
    max_depth_rate: float = 0.05,
    rig: CameraRig | None = None,
    network_depth: int = 4,
) -> SceneSpec:
    """Draw a scene with 2-4 objects and displacements of at most ~8 px."""
    rng = np.random.default_rng([seed, 0x5CE1E])
    rig = rig or default_rig(height, width)
    f = rig.focal_length
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    # well separated depth slots keep the painter's order fixed over the frame pair
    slots = np.linspace(2.0, 8.0, 7)
    depths = np.sort(rng.choice(slots, size=n, replace=False))[::-1]
    objects = []
    for z in depths:
        z = float(z + rng.uniform(-0.15, 0.15))
        size_px = rng.uniform(14, 30, size=2)
        centre_px = rng.uniform([4, 4], [width - 5, height - 5])
        du, dv = rng.uniform(-max_lateral_px, max_lateral_px, size=2)
        vz = float(rng.uniform(-max_depth_rate, max_depth_rate) * z)
        objects.append(
            ObjectSpec(
                position=(
                    float((centre_px[0] - rig.cx) * z / f),
                    float((centre_px[1] - rig.cy) * z / f),
                    z,
                ),
                size=(float(size_px[0] * z / f), float(size_px[1] * z / f)),
                velocity=(float(du * z / f), float(dv * z / f), vz),
                texture_seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return SceneSpec(height, width, rig, background_depth=12.0, objects=tuple(objects), network_depth=network_depth)


@dataclass
class _Texture:
    freqs: np.ndarray  # (K, 2) cycles per meter
    phases: np.ndarray  # (3, K)
    amps: np.ndarray  # (3, K)
    base: np.ndarray  # (3,)

    @classmethod
    def draw(cls, seed: int, px_per_meter: float) -> "_Texture":
        rng = np.random.default_rng([seed, 0x7E47])
        nu = rng.uniform(*TEXTURE_BAND, size=N_WAVES) * px_per_meter
        theta = rng.uniform(0, np.pi, size=N_WAVES)
        freqs = np.stack([nu * np.cos(theta), nu * np.sin(theta)], axis=1)
        phases = rng.uniform(0, 2 * np.pi, size=(3, N_WAVES))
        base = rng.uniform(-0.3, 0.3, size=3)
        amps = rng.uniform(0.2, 1.0, size=(3, N_WAVES))
        # keep every channel inside [-0.95, 0.95]
        amps *= ((0.95 - np.abs(base)) / amps.sum(axis=1))[:, None]
        return cls(freqs, phases, amps, base)

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        arg = 2 * np.pi * (a[..., None] * self.freqs[:, 0] + b[..., None] * self.freqs[:, 1])
        out = np.empty((3,) + a.shape)
        for c in range(3):
            out[c] = self.base[c] + (self.amps[c] * np.sin(arg + self.phases[c])).sum(axis=-1)
        return out


def _textures(spec: SceneSpec, seed: int):
    f = spec.rig.focal_length
    bg = _Texture.draw(seed, f / spec.background_depth)
    objs = [_Texture.draw(o.texture_seed, f / o.position[2]) for o in spec.objects]
    return bg, objs


def _render_view(spec: SceneSpec, textures, t: int, cam_x: float):
    """Colour image and object-id map for one camera at frame ``t`` (0 or 1)."""
    rig = spec.rig
    f = rig.focal_length
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    bg_tex, obj_tex = textures
    zb = spec.background_depth
    img = bg_tex((xs - rig.cx) * zb / f + cam_x, (ys - rig.cy) * zb / f)
    ids = np.full((h, w), BACKGROUND_ID, dtype=np.int32)
    order = sorted(range(len(spec.objects)), key=lambda i: -(spec.objects[i].position[2] + t * spec.objects[i].velocity[2]))
    for i in order:
        o = spec.objects[i]
        X0, Y0, Z0 = (p + t * v for p, v in zip(o.position, o.velocity))
        a = (xs - rig.cx) * Z0 / f + cam_x - X0
        b = (ys - rig.cy) * Z0 / f - Y0
        inside = (np.abs(a) <= o.size[0] / 2) & (np.abs(b) <= o.size[1] / 2)
        if not inside.any():
            continue
        img[:, inside] = obj_tex[i](a[inside], b[inside])
        ids[inside] = i + 1
    return img, ids


def _ground_truth(spec: SceneSpec, ids_t: np.ndarray):
    rig = spec.rig
    f, fb = rig.focal_length, rig.fb
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    d_t = np.full((h, w), fb / spec.background_depth)
    d_t1 = d_t.copy()
    for i, o in enumerate(spec.objects):
        m = ids_t == i + 1
        if not m.any():
            continue
        Vx, Vy, Vz = o.velocity
        Z = o.position[2]
        X = (xs[m] - rig.cx) * Z / f
        Y = (ys[m] - rig.cy) * Z / f
        Z1 = Z + Vz
        u[m] = f * (X + Vx) / Z1 + rig.cx - xs[m]
        v[m] = f * (Y + Vy) / Z1 + rig.cy - ys[m]
        d_t[m] = fb / Z
        d_t1[m] = fb / Z1
    return u, v, d_t, d_t1


def render_views(spec: SceneSpec, seed: int = 0):
    """Return ``{view: (image, id_map)}`` for the four camera/frame combinations."""
    tex = _textures(spec, seed)
    B = spec.rig.baseline
    return {
        "left_t": _render_view(spec, tex, 0, 0.0),
        "left_t1": _render_view(spec, tex, 1, 0.0),
        "right_t": _render_view(spec, tex, 0, B),
        "right_t1": _render_view(spec, tex, 1, B),
    }


def _degrade(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = img + rng.uniform(-0.05, 0.05) + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def render_sample(spec: SceneSpec, seed: int = 0) -> tuple[StereoQuad, SceneFlowField]:
    """Render the four views and the exact 4-channel ground truth (left view, frame t)."""
    views = render_views(spec, seed)
    _, ids_t = views["left_t"]
    for i in range(len(spec.objects)):
        if not any((ids == i + 1).any() for _, ids in views.values()):
            warnings.warn(f"object {i} projects entirely outside the frame", stacklevel=2)
    images = {k: img for k, (img, _) in views.items()}
    if spec.degrade:
        rng = np.random.default_rng([seed, 0xDE6])
        images = {k: _degrade(img, rng) for k, img in images.items()}
    quad = StereoQuad(**{k: Image2D(img) for k, img in images.items()})
    u, v, d_t, d_t1 = _ground_truth(spec, ids_t)
    sf = SceneFlowField(FlowField(Image2D(u), Image2D(v)), DisparityPair(Image2D(d_t), Image2D(d_t1)))
    return quad, sf


# -- consistency helpers ----------------------------------------------------

def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample planar ``img`` (C, H, W) at float coordinates, clamped at the border."""
    _, h, w = img.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = x - x0
    ay = y - y0
    top = img[:, y0, x0] * (1 - ax) + img[:, y0, x1] * ax
    bot = img[:, y1, x0] * (1 - ax) + img[:, y1, x1] * ax
    return top * (1 - ay) + bot * ay


def _same_surface(ids_src, ids_dst, x, y, border=1):
    h, w = ids_src.shape
    inside = (x >= border) & (x <= w - 1 - border) & (y >= border) & (y <= h - 1 - border)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(xc).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(yc).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ok = inside.copy()
    for yy in (y0, y1):
        for xx in (x0, x1):
            ok &= ids_dst[yy, xx] == ids_src
    # source pixel must not sit on a depth edge either
    pad = np.pad(ids_src, 1, mode="edge")
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            ok &= pad[dy : dy + h, dx : dx + w] == ids_src
    return ok


def consistency_residuals(spec: SceneSpec, seed: int = 0) -> dict:
    """Photometric residuals of the ground truth on non-occluded pixels.

    ``flow``: left_t versus left_t1 sampled at ``p + (u, v)``.
    ``stereo``: left_t versus right_t sampled at ``p - (d_t, 0)``.
    Each entry holds the mean absolute residual and the pixel count used.
    """
    views = render_views(spec, seed)
    quad, sf = render_sample(spec, seed)
    lt = quad.left_t.data
    ids_t = views["left_t"][1]
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = sf.flow.u.data[0], sf.flow.v.data[0]
    d = sf.disparities.d_t.data[0]
    out = {}
    for name, src, xq, yq in (
        ("flow", quad.left_t1.data, xs + u, ys + v),
        ("stereo", quad.right_t.data, xs - d, ys),
    ):
        dst_ids = views["left_t1" if name == "flow" else "right_t"][1]
        mask = _same_surface(ids_t, dst_ids, xq, yq)
        warped = bilinear_sample(src, xq, yq)
        res = np.abs(warped - lt).mean(axis=0)
        out[name] = {
            "mean_abs": float(res[mask].mean()) if mask.any() else 0.0,
            "pixels": int(mask.sum()),
        }
    return out


# -- dataset generation -----------------------------------------------------

def write_sample(d: Path, quad: StereoQuad, sf: SceneFlowField, spec: SceneSpec, seed: int):
    d.mkdir(parents=True, exist_ok=True)
    for name in ("left_t", "left_t1", "right_t", "right_t1"):
        formats.save_image(d / f"{name}.png", getattr(quad, name))
    f32 = lambda img: Image2D(img.data.astype(np.float32))  # noqa: E731
    formats.save_flow(d / "flow.flo", FlowField(f32(sf.flow.u), f32(sf.flow.v)))
    formats.save_disparity(d / "disp_t.pfm", f32(sf.disparities.d_t))
    formats.save_disparity(d / "disp_t1.pfm", f32(sf.disparities.d_t1))
    meta = {"seed": seed, **spec.to_dict()}
    (d / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


@dataclass
class GenerationConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 4
    max_lateral_px: float = 6.0
    max_depth_rate: float = 0.05
    network_depth: int = 4
    degrade: bool = False
    subset: str = "synthetic"
    split: str = "train"


def generate_dataset(n_samples: int, base_seed: int, out_root, config: GenerationConfig | None = None) -> DatasetIndex:
    """Render ``n_samples`` scenes (seed ``base_seed + i``) into the dataset layout."""
    cfg = config or GenerationConfig()
    out_root = Path(out_root)
    written = []
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        (out_root / cfg.subset / cfg.split).mkdir(parents=True, exist_ok=True)
        for i in range(n_samples):
            seed = base_seed + i
            spec = random_scene(
                seed,
                cfg.height,
                cfg.width,
                n_objects=(cfg.min_objects, cfg.max_objects),
                max_lateral_px=cfg.max_lateral_px,
                max_depth_rate=cfg.max_depth_rate,
                network_depth=cfg.network_depth,
            )
            if cfg.degrade:
                spec = SceneSpec(**{**spec.__dict__, "degrade": True})
            quad, sf = render_sample(spec, seed)
            sid = f"{i:06d}"
            write_sample(sample_dir(out_root, cfg.subset, cfg.split, sid), quad, sf, spec, seed)
            written.append(sid)
    except OSError as exc:
        raise SceneFlowError(
            f"dataset generation aborted after {len(written)} of {n_samples} samples "
            f"(written: {', '.join(written) or 'none'}): {exc}"
        ) from exc
    return build_index(out_root, cfg.split, cfg.subset)
