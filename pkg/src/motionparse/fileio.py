"""File codecs: PFM float grids, KITTI 16-bit flow PNG, netpbm and PNG images, pose text."""

from __future__ import annotations

import io
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import PoseSE3, parse_key_value

KITTI_FLOW_SCALE = 64.0
KITTI_FLOW_OFFSET = 2**15
KITTI_FLOW_LIMIT = (65535 - KITTI_FLOW_OFFSET) / KITTI_FLOW_SCALE  # 511.98 px
DEPTH_PNG_SCALE = 256.0


def atomic_write_bytes(path, data: bytes):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror or exc}") from None


# ---- PFM ----------------------------------------------------------------------

def encode_pfm(grid, little_endian: bool = True) -> bytes:
    """PFM bytes for a ``(H, W)`` or ``(H, W, 3)`` grid stored as float32, bottom row first."""
    a = np.asarray(grid)
    if a.ndim == 2:
        magic = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"PF"
    else:
        raise FormatError(f"PFM holds (H, W) or (H, W, 3) grids, got {a.shape}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise FormatError("PFM grids must be non-empty")
    dtype = np.dtype("<f4" if little_endian else ">f4")
    body = np.ascontiguousarray(a[::-1], dtype=dtype).tobytes()
    scale = b"-1.0" if little_endian else b"1.0"
    return magic + b"\n" + f"{a.shape[1]} {a.shape[0]}".encode() + b"\n" + scale + b"\n" + body


def decode_pfm(data: bytes) -> np.ndarray:
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if not m:
        raise FormatError("not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    width, height = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise FormatError("bad PFM scale") from None
    if width == 0 or height == 0 or scale == 0:
        raise FormatError("PFM dimensions and scale must be non-zero")
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    count = width * height * channels
    body = data[m.end():]
    if len(body) < count * 4:
        raise FormatError("truncated PFM data")
    a = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return a.reshape(shape)[::-1].copy()


def write_pfm(path, grid, little_endian: bool = True):
    atomic_write_bytes(path, encode_pfm(grid, little_endian))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(_read(path))


def write_flow_pfm(path, flow, valid=None):
    """Flow as a 3-channel PFM ``(u, v, valid)``; invalid vectors are stored as 0."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must be (H, W, 2), got {flow.shape}")
    ok = np.all(np.isfinite(flow), axis=-1) if valid is None else np.asarray(valid, bool) & np.all(np.isfinite(flow), axis=-1)
    out = np.concatenate([np.where(ok[..., None], flow, 0.0), ok[..., None]], axis=-1)
    write_pfm(path, out)


def read_flow_pfm(path):
    """Returns ``(flow, valid)``."""
    a = read_pfm(path)
    if a.ndim != 3:
        raise FormatError("flow PFM must have three channels")
    return a[..., :2].astype(np.float64), a[..., 2] > 0


# ---- image codecs -------------------------------------------------------------

def _cv2():
    try:
        import cv2
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise FormatError("PNG support needs opencv-python-headless") from exc
    return cv2


def encode_png(raw: np.ndarray) -> bytes:
    """PNG bytes for uint8/uint16 ``(H, W)`` or RGB ``(H, W, 3)`` arrays."""
    cv2 = _cv2()
    arr = raw[..., ::-1] if raw.ndim == 3 else raw
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(arr))
    if not ok:
        raise FormatError("PNG encoding failed")
    return buf.tobytes()


def decode_png(data: bytes) -> np.ndarray:
    cv2 = _cv2()
    arr = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise FormatError("not a decodable PNG")
    if arr.ndim == 3:
        arr = arr[..., 2::-1] if arr.shape[2] >= 3 else arr
    return np.ascontiguousarray(arr)


def _netpbm_tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset of the raster."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def decode_netpbm(data: bytes) -> tuple[np.ndarray, int]:
    """Binary P5/P6 raster as integers plus its maxval."""
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {data[:2]!r}")
    tokens, start = _netpbm_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("bad netpbm header") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise FormatError("netpbm dimensions or maxval out of range")
    channels = 3 if tokens[0] == b"P6" else 1
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    count = width * height * channels
    if len(data) - start < count * dtype.itemsize:
        raise FormatError("truncated netpbm raster")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=start)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return raw.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def encode_netpbm(raw: np.ndarray, maxval: int) -> bytes:
    if raw.ndim == 2:
        magic = b"P5"
    elif raw.ndim == 3 and raw.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"netpbm holds gray or RGB rasters, got {raw.shape}")
    dtype = ">u2" if maxval > 255 else "u1"
    header = magic + f"\n{raw.shape[1]} {raw.shape[0]}\n{maxval}\n".encode()
    return header + np.ascontiguousarray(raw, dtype=dtype).tobytes()


def _is_png(path) -> bool:
    return Path(path).suffix.lower() == ".png"


def read_raw_image(path) -> tuple[np.ndarray, int]:
    """Integer raster and its maximum code value, from netpbm or PNG."""
    data = _read(path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        raw = decode_png(data)
        return raw, 65535 if raw.dtype == np.uint16 else 255
    return decode_netpbm(data)


def write_raw_image(path, raw: np.ndarray):
    raw = np.asarray(raw)
    if raw.dtype not in (np.uint8, np.uint16):
        raise FormatError(f"raw rasters must be uint8 or uint16, got {raw.dtype}")
    maxval = 255 if raw.dtype == np.uint8 else 65535
    atomic_write_bytes(path, encode_png(raw) if _is_png(path) else encode_netpbm(raw, maxval))


def read_image(path) -> np.ndarray:
    """Image with intensities scaled to ``[0, 1]``."""
    raw, maxval = read_raw_image(path)
    return raw.astype(np.float64) / maxval


def write_image(path, image, bits: int = 8):
    """Store ``[0, 1]`` intensities as 8- or 16-bit netpbm (or PNG by extension)."""
    if bits not in (8, 16):
        raise FormatError("bits must be 8 or 16")
    a = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise FormatError("image contains non-finite values")
    maxval = 255 if bits == 8 else 65535
    raw = np.rint(np.clip(a, 0.0, 1.0) * maxval).astype(np.uint8 if bits == 8 else np.uint16)
    write_raw_image(path, raw)


def write_depth_png(path, depth, valid=None):
    """KITTI depth convention: uint16 code ``round(depth * 256)``, 0 marks missing."""
    d = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(d) & (d > 0) if valid is None else np.asarray(valid, bool)
    code = np.rint(np.where(ok, d, 0.0) * DEPTH_PNG_SCALE)
    if np.any(code > 65535):
        raise FormatError("depth exceeds the 16-bit range (255.99 m)")
    write_raw_image(path, code.astype(np.uint16))


def read_depth_png(path):
    """Returns ``(depth, valid)`` with ``depth = code / 256``."""
    raw, _ = read_raw_image(path)
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise FormatError("depth images must be single-channel 16-bit")
    return raw.astype(np.float64) / DEPTH_PNG_SCALE, raw > 0


def write_kitti_flow_png(path, flow, valid=None):
    """KITTI flow PNG: 16-bit RGB with ``64 f + 2^15`` in the first two channels and validity in the third."""
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise FormatError(f"flow must be (H, W, 2), got {f.shape}")
    finite = np.all(np.isfinite(f), axis=-1)
    ok = finite if valid is None else np.asarray(valid, bool) & finite
    f = np.where(ok[..., None], f, 0.0)
    code = np.rint(f * KITTI_FLOW_SCALE + KITTI_FLOW_OFFSET)
    if np.any(code < 0) or np.any(code > 65535):
        raise FormatError(f"flow magnitude exceeds the encodable range of +-{KITTI_FLOW_LIMIT:.2f} px")
    raw = np.concatenate([code, ok[..., None].astype(np.float64)], axis=-1).astype(np.uint16)
    atomic_write_bytes(path, encode_png(raw))


def read_kitti_flow_png(path):
    """Returns ``(flow, valid)``; invalid vectors read as 0."""
    raw = decode_png(_read(path))
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise FormatError("KITTI flow PNGs are 16-bit three-channel images")
    valid = raw[..., 2] > 0
    flow = (raw[..., :2].astype(np.float64) - KITTI_FLOW_OFFSET) / KITTI_FLOW_SCALE
    return np.where(valid[..., None], flow, 0.0), valid


# ---- poses --------------------------------------------------------------------

def pose_to_text(T: PoseSE3) -> str:
    r = " ".join(repr(float(x)) for x in T.rotation.ravel())
    t = " ".join(repr(float(x)) for x in T.translation)
    return f"rotation={r}\ntranslation={t}\n"


def pose_from_text(text: str) -> PoseSE3:
    kv = parse_key_value(text)
    try:
        R = np.array([float(x) for x in kv["rotation"].split()]).reshape(3, 3)
        t = np.array([float(x) for x in kv["translation"].split()]).reshape(3)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad pose file: {exc}") from None
    return PoseSE3(R, t)


def write_pose(path, T: PoseSE3):
    atomic_write_text(path, pose_to_text(T))


def read_pose(path) -> PoseSE3:
    return pose_from_text(_read(path).decode("utf-8", errors="replace"))


def _suffix(path) -> str:
    return Path(path).suffix.lower()


def write_grid(path, grid):
    """Float grid as PFM (float32) or ``.npy`` (lossless float64), chosen by extension."""
    if _suffix(path) == ".npy":
        buf = io.BytesIO()
        np.save(buf, np.asarray(grid, dtype=np.float64), allow_pickle=False)
        atomic_write_bytes(path, buf.getvalue())
    elif _suffix(path) == ".pfm":
        write_pfm(path, grid)
    else:
        raise FormatError(f"float grids are stored as .pfm or .npy, not {path}")


def read_grid(path) -> np.ndarray:
    """Float grid from ``.npy``, PFM or any supported image (intensities in ``[0, 1]``)."""
    if _suffix(path) == ".npy":
        try:
            return np.load(io.BytesIO(_read(path)), allow_pickle=False).astype(np.float64)
        except ValueError as exc:
            raise FormatError(f"bad .npy file {path}: {exc}") from None
    if _suffix(path) == ".pfm":
        return read_pfm(path).astype(np.float64)
    return read_image(path)


def read_mask(path) -> np.ndarray:
    """Binary mask; image intensities above one half, or nonzero float values, are set."""
    grid = read_grid(path)
    threshold = 0.0 if _suffix(path) in (".pfm", ".npy") else 0.5
    return (grid > threshold).astype(np.uint8)


def write_mask(path, mask):
    """8-bit single-channel mask with values 0 and 255."""
    write_raw_image(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def write_flow(path, flow, valid=None):
    """Flow as a KITTI PNG, a ``(u, v, valid)`` PFM, or a ``(H, W, 3)`` ``.npy``."""
    if _is_png(path):
        write_kitti_flow_png(path, flow, valid)
    elif _suffix(path) == ".pfm":
        write_flow_pfm(path, flow, valid)
    else:
        f = np.asarray(flow, dtype=np.float64)
        ok = np.all(np.isfinite(f), axis=-1) if valid is None else np.asarray(valid, bool) & np.all(np.isfinite(f), axis=-1)
        write_grid(path, np.concatenate([np.where(ok[..., None], f, 0.0), ok[..., None]], axis=-1))


def read_flow(path):
    """``(flow, valid)`` from a KITTI PNG, a flow PFM or a flow ``.npy``."""
    if _is_png(path):
        return read_kitti_flow_png(path)
    a = read_grid(path)
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError(f"flow files hold (H, W, 3) grids of (u, v, valid), got {a.shape}")
    return a[..., :2], a[..., 2] > 0
