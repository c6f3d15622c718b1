"""Binary containers and small file formats.

Tensor container (.fvt):  magic "FVGT", u32 version, u32 header length,
JSON header {dtype:"f32le", shape}, raw little-endian payload, CRC32 of the
payload. Checkpoint container: magic "FVGC", u32 version=1, u32 header
length, JSON header {config, extra, tensors: name -> [dtype, shape, offset]},
payload, CRC32. Both round-trip byte-exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from anchorflow.errors import ChecksumError, FormatError, IoError

FVT_MAGIC = b"FVGT"
CKPT_MAGIC = b"FVGC"
VERSION = 1

_DTYPES = {"f32le": "<f4", "f64le": "<f8", "i64le": "<i8"}
_DTYPE_NAMES = {np.dtype("<f4"): "f32le", np.dtype("<f8"): "f64le", np.dtype("<i8"): "i64le"}


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        magic, struct.pack("<II", VERSION, len(hbytes)), hbytes, payload,
        struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF),
    ])


def _unpack(blob: bytes, magic: bytes) -> tuple[dict, bytes]:
    if len(blob) < 12 or blob[:4] != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if len(blob) < 12 + hlen + 4:
        raise ChecksumError("file truncated")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}") from e
    payload = blob[12 + hlen:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise ChecksumError("payload CRC mismatch")
    return header, payload


def _write_file(path, blob: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(blob)
    except OSError as e:
        raise IoError(str(e)) from e


def _read_file(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        raise
    except OSError as e:
        raise IoError(str(e)) from e


# ------------------------------------------------------------------- .fvt

def write_fvt(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = {"dtype": "f32le", "shape": list(arr.shape)}
    _write_file(path, _pack(FVT_MAGIC, header, arr.tobytes()))


def read_fvt(path) -> np.ndarray:
    header, payload = _unpack(_read_file(path), FVT_MAGIC)
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise FormatError(f"unknown dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    arr = np.frombuffer(payload, dtype=dtype)
    if arr.size != int(np.prod(shape)):
        raise FormatError(f"payload size does not match shape {shape}")
    return arr.reshape(shape).copy()


# ------------------------------------------------------------- checkpoint

def write_checkpoint(path, config: dict, tensors: dict[str, np.ndarray],
                     extra: dict | None = None) -> None:
    table = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype("<f4")
        dtype_name = _DTYPE_NAMES[np.dtype(arr.dtype.newbyteorder("<"))]
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table[name] = [dtype_name, list(arr.shape), offset]
        chunks.append(raw)
        offset += len(raw)
    header = {"config": config, "extra": extra or {}, "tensors": table}
    _write_file(path, _pack(CKPT_MAGIC, header, b"".join(chunks)))


def read_checkpoint(path) -> tuple[dict, dict, dict[str, np.ndarray]]:
    header, payload = _unpack(_read_file(path), CKPT_MAGIC)
    tensors = {}
    for name, (dtype_name, shape, offset) in header["tensors"].items():
        dtype = _DTYPES.get(dtype_name)
        if dtype is None:
            raise FormatError(f"tensor {name}: unknown dtype {dtype_name!r}")
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * np.dtype(dtype).itemsize
        if end > len(payload):
            raise FormatError(f"tensor {name}: payload overrun")
        tensors[name] = np.frombuffer(payload[offset:end], dtype=dtype).reshape(shape).copy()
    return header["config"], header.get("extra", {}), tensors


# ------------------------------------------------------------------- PPM

def write_ppm(path, frame: np.ndarray) -> None:
    """Binary P6, 8-bit, value = round(255 * pixel)."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise FormatError(f"expected HxWx3 frame, got {frame.shape}")
    h, w, _ = frame.shape
    data = np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    _write_file(path, b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = _read_file(path)
    if not blob.startswith(b"P6"):
        raise FormatError("not a P6 PPM")
    parts = blob.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


# ------------------------------------------------------------------- CSV

def write_csv(path, header: list[str], rows: list[list], run_id: str) -> None:
    """Plain CSV with a trailing provenance comment line."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    lines.append(f"# run_id={run_id}")
    _write_file(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)
