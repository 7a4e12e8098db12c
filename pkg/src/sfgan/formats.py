"""Byte-level codecs for PFM, Middlebury .flo and 8-bit PNG images.

PFM stores rows bottom-to-top; that is undone here so that every array
leaving this module is top-to-bottom.
"""
from __future__ import annotations

import io
import logging
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, TruncatedError, UnsupportedFormatError
from .types import FlowField, Image2D

log = logging.getLogger(__name__)

FLO_TAG = 202021.25
_FLO_TAG_BYTES = np.array([FLO_TAG], dtype="<f4").tobytes()
_TOKEN = re.compile(rb"\S+")


def _nonfinite_meta(arr: np.ndarray, meta: dict, what: str) -> dict:
    bad = int((~np.isfinite(arr)).sum())
    meta["nonfinite_count"] = bad
    if bad:
        log.warning("%s payload contains %d non-finite values", what, bad)
    return meta


def _pfm_header(buf: bytes):
    """Return (magic, width, height, scale, payload_offset)."""
    if len(buf) < 2:
        raise TruncatedError("PFM: file shorter than magic", offset=0)
    magic = buf[:2]
    if magic not in (b"Pf", b"PF"):
        raise FormatError(f"PFM: bad magic {magic!r}", offset=0)
    pos = 2
    tokens = []
    for _ in range(3):
        m = _TOKEN.search(buf, pos)
        if m is None:
            raise TruncatedError("PFM: header ends early", offset=len(buf))
        if m.start() == pos:
            raise FormatError("PFM: expected whitespace between header fields", offset=pos)
        tokens.append(m)
        pos = m.end()
    # exactly one whitespace byte separates the scale from the raster
    if pos >= len(buf) or buf[pos : pos + 1] not in (b"\n", b" ", b"\r", b"\t"):
        raise TruncatedError("PFM: missing terminator after scale", offset=pos)
    payload = pos + 1
    try:
        width = int(tokens[0].group())
        height = int(tokens[1].group())
    except ValueError:
        bad = tokens[0] if not tokens[0].group().isdigit() else tokens[1]
        raise FormatError(f"PFM: non-numeric dimension {bad.group()!r}", offset=bad.start()) from None
    if width < 1 or height < 1:
        raise FormatError(f"PFM: invalid dimensions {width}x{height}", offset=tokens[0].start())
    try:
        scale = float(tokens[2].group())
    except ValueError:
        raise FormatError(f"PFM: non-numeric scale {tokens[2].group()!r}", offset=tokens[2].start()) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError(f"PFM: invalid scale {scale}", offset=tokens[2].start())
    return magic.decode(), width, height, scale, payload


def read_pfm(buf: bytes) -> Image2D:
    """Decode a PFM byte string into a top-to-bottom :class:`Image2D`.

    ``meta`` carries ``scale`` (absolute value), ``little_endian`` and
    ``nonfinite_count``.
    """
    magic, width, height, scale, off = _pfm_header(buf)
    channels = 3 if magic == "PF" else 1
    little = scale < 0
    n = width * height * channels
    need = off + 4 * n
    if len(buf) < need:
        raise TruncatedError(f"PFM: payload needs {4 * n} bytes, found {len(buf) - off}", offset=len(buf))
    arr = np.frombuffer(buf, dtype="<f4" if little else ">f4", count=n, offset=off)
    arr = arr.astype(np.float32).reshape(height, width, channels)[::-1]
    arr = np.ascontiguousarray(arr.transpose(2, 0, 1))
    meta = {"scale": abs(scale), "little_endian": little}
    _nonfinite_meta(arr, meta, "PFM")
    return Image2D(arr, meta=meta, strict=False)


def _format_scale(scale: float, little_endian: bool) -> str:
    s = repr(float(abs(scale)))
    return f"-{s}" if little_endian else s


def write_pfm(img: Image2D, little_endian: bool | None = None) -> bytes:
    """Encode ``img`` as PFM.

    The scale magnitude is taken from ``img.meta["scale"]`` (default 1.0);
    endianness from the argument, else from the metadata, else little.
    """
    if not isinstance(img, Image2D):
        arr = np.asarray(img)
        if arr.ndim == 3 and arr.shape[0] not in (1, 3):
            raise UnsupportedFormatError(f"PFM supports 1 or 3 channels, got {arr.shape[0]}")
        img = Image2D(arr)
    if little_endian is None:
        little_endian = img.meta.get("little_endian", True)
    scale = img.meta.get("scale", 1.0)
    magic = "PF" if img.channels == 3 else "Pf"
    header = f"{magic}\n{img.width} {img.height}\n{_format_scale(scale, little_endian)}\n".encode()
    raster = img.data.transpose(1, 2, 0)[::-1].astype("<f4" if little_endian else ">f4")
    return header + raster.tobytes()


def read_flo(buf: bytes) -> FlowField:
    """Decode a Middlebury .flo byte string."""
    if len(buf) < 12:
        raise TruncatedError(f".flo: header needs 12 bytes, found {len(buf)}", offset=len(buf))
    if buf[:4] != _FLO_TAG_BYTES:
        tag = np.frombuffer(buf, "<f4", count=1)[0]
        raise FormatError(f".flo: bad sanity tag {tag!r}, expected {FLO_TAG}", offset=0)
    width, height = (int(x) for x in np.frombuffer(buf, "<i4", count=2, offset=4))
    if width < 1 or height < 1:
        raise FormatError(f".flo: invalid dimensions {width}x{height}", offset=4)
    n = 2 * width * height
    if len(buf) != 12 + 4 * n:
        raise TruncatedError(
            f".flo: {width}x{height} header needs {4 * n} payload bytes, found {len(buf) - 12}",
            offset=min(len(buf), 12 + 4 * n),
        )
    uv = np.frombuffer(buf, "<f4", count=n, offset=12).reshape(height, width, 2).transpose(2, 0, 1)
    meta = _nonfinite_meta(uv, {}, ".flo")
    return FlowField(Image2D(uv[0], meta=meta, strict=False), Image2D(uv[1], meta=meta, strict=False))


def write_flo(flow: FlowField) -> bytes:
    h, w = flow.hw
    header = _FLO_TAG_BYTES + np.array([w, h], dtype="<i4").tobytes()
    uv = flow.as_array().transpose(1, 2, 0).astype("<f4")
    return header + uv.tobytes()


def read_png(buf: bytes) -> Image2D:
    """Decode an 8-bit RGB PNG to [-1, 1]."""
    with Image.open(io.BytesIO(buf)) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
    return Image2D(rgb.transpose(2, 0, 1) / np.float32(127.5) - np.float32(1.0))


def to_uint8(img: Image2D) -> np.ndarray:
    """Map [-1, 1] to 0..255, HWC."""
    x = np.clip(np.rint((img.data.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return x.transpose(1, 2, 0)


def write_png(img: Image2D) -> bytes:
    if img.channels != 3:
        raise UnsupportedFormatError(f"PNG images must be RGB, got {img.channels} channels")
    out = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(out, format="PNG")
    return out.getvalue()


# -- path-level helpers -----------------------------------------------------

def load_image(path) -> Image2D:
    path = Path(path)
    buf = path.read_bytes()
    if path.suffix.lower() == ".pfm":
        return read_pfm(buf)
    return read_png(buf)


def save_image(path, img: Image2D):
    path = Path(path)
    path.write_bytes(write_pfm(img) if path.suffix.lower() == ".pfm" else write_png(img))


def load_flow(path) -> FlowField:
    """Read flow from .flo or from a 3-channel PFM (third channel ignored)."""
    path = Path(path)
    buf = path.read_bytes()
    if path.suffix.lower() == ".pfm":
        img = read_pfm(buf)
        if img.channels == 1:
            raise FormatError(f"{path}: flow PFM must have 3 channels")
        return FlowField(
            Image2D(img.data[0], meta=img.meta, strict=False),
            Image2D(img.data[1], meta=img.meta, strict=False),
        )
    return read_flo(buf)


def save_flow(path, flow: FlowField):
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        h, w = flow.hw
        arr = np.concatenate([flow.as_array(), np.zeros((1, h, w), flow.u.data.dtype)])
        path.write_bytes(write_pfm(Image2D(arr)))
    else:
        path.write_bytes(write_flo(flow))


def load_disparity(path) -> Image2D:
    """Read a disparity PFM, normalized to non-negative values.

    Some datasets store left-view disparity as negative offsets. A map with
    no positive entries and at least one negative entry is negated;
    ``meta["sign_convention"]`` records which case applied.
    """
    img = read_pfm(Path(path).read_bytes())
    d = img.data
    meta = dict(img.meta)
    finite = d[np.isfinite(d)]
    if finite.size and (finite < 0).any() and not (finite > 0).any():
        meta["sign_convention"] = "negative"
        return Image2D(-d, meta=meta, strict=False)
    meta["sign_convention"] = "positive"
    return Image2D(d, meta=meta, strict=False)


def save_disparity(path, d: Image2D):
    Path(path).write_bytes(write_pfm(d))


def sniff_header(path) -> dict:
    """Cheap header read: format name and dimensions, without decoding payload."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        with open(path, "rb") as f:
            head = f.read(256)
        magic, w, h, scale, _ = _pfm_header(head)
        return {"format": "pfm", "magic": magic, "width": w, "height": h, "scale": scale}
    if suffix == ".flo":
        with open(path, "rb") as f:
            head = f.read(12)
        if len(head) < 12 or head[:4] != _FLO_TAG_BYTES:
            raise FormatError(f"{path}: not a .flo file", offset=0)
        w, h = (int(x) for x in np.frombuffer(head, "<i4", count=2, offset=4))
        return {"format": "flo", "width": w, "height": h}
    with Image.open(path) as im:
        w, h = im.size
    return {"format": suffix.lstrip(".") or "image", "width": w, "height": h}
