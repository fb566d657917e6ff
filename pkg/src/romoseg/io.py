"""Readers and writers for the on-disk artifacts.

* tensors: NPY v1.0, C order, ``<f4`` or ``|u1`` only, rank 2 or 3
* masks: binary PGM (P5, maxval 255) holding 0 / 255
* trajectories: TUM text format ``t tx ty tz qx qy qz qw``
"""
from __future__ import annotations

import ast
import logging
import math
import os
import warnings
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError
from .trajectory import Trajectory

log = logging.getLogger(__name__)

NPY_MAGIC = b"\x93NUMPY"
_DESCR = {"<f4": np.dtype("<f4"), "|u1": np.dtype("u1"), "<u1": np.dtype("u1")}
_HEADER_KEYS = {"descr", "fortran_order", "shape"}

FLOW_FWD = "flow_fwd_{:06d}.npy"
FLOW_BWD = "flow_bwd_{:06d}.npy"
FEATURE = "feat_{:06d}.npy"
MASK = "mask_{:06d}.pgm"


# ---------------------------------------------------------------- tensors

def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:6] != NPY_MAGIC:
        raise FormatError("missing NPY magic string", path, 0)
    if len(raw) < 10:
        raise FormatError("truncated NPY preamble", path, len(raw))
    if raw[6:8] != b"\x01\x00":
        raise FormatError(f"unsupported NPY version {raw[6]}.{raw[7]}", path, 6)
    header_len = int.from_bytes(raw[8:10], "little")
    start = 10 + header_len
    if len(raw) < start:
        raise FormatError("truncated NPY header", path, len(raw))
    try:
        header = ast.literal_eval(raw[10:start].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"unparseable NPY header: {exc}", path, 10) from None
    if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
        raise FormatError("NPY header must hold exactly descr/fortran_order/shape", path, 10)
    if header["descr"] not in _DESCR:
        raise FormatError(f"unsupported dtype {header['descr']!r}", path, 10)
    if header["fortran_order"] is not False:
        raise FormatError("Fortran-ordered payloads are not supported", path, 10)
    shape = header["shape"]
    if (not isinstance(shape, tuple) or len(shape) not in (2, 3)
            or not all(isinstance(n, int) and n >= 0 for n in shape)):
        raise FormatError(f"shape must be a rank-2 or rank-3 tuple, got {shape!r}", path, 10)
    dtype = _DESCR[header["descr"]]
    expected = math.prod(shape) * dtype.itemsize
    payload = raw[start:]
    if len(payload) != expected:
        raise IntegrityError(
            f"payload holds {len(payload)} bytes, shape {shape} needs {expected}", path, start)
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def _npy_header(dtype: np.dtype, shape: tuple) -> bytes:
    descr = "<f4" if dtype == np.float32 else "|u1"
    text = "{'descr': '%s', 'fortran_order': False, 'shape': %r, }" % (descr, tuple(shape))
    # numpy pads so the payload starts on a 64-byte boundary
    total = 10 + len(text) + 1
    text += " " * (-total % 64) + "\n"
    return NPY_MAGIC + b"\x01\x00" + len(text).to_bytes(2, "little") + text.encode("latin1")


def write_tensor(array: np.ndarray, path) -> None:
    array = np.asarray(array)
    if array.dtype not in (np.float32, np.uint8):
        raise ValueError(f"tensors must be float32 or uint8, got {array.dtype}")
    if array.ndim not in (2, 3):
        raise ValueError(f"tensors must have rank 2 or 3, got shape {array.shape}")
    data = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(_npy_header(array.dtype, array.shape))
        fh.write(data.tobytes(order="C"))


# ---------------------------------------------------------------- masks

def _pgm_tokens(raw: bytes, path, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        begin = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if begin == pos:
            raise FormatError("malformed PGM header", path, pos)
        tokens.append(int(raw[begin:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError("PGM header must end in a single whitespace byte", path, pos)
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Any 8-bit binary PGM as a ``uint8`` array of shape ``(H, W)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] != b"P5":
        raise FormatError("not a binary PGM (P5)", path, 0)
    (width, height, maxval), start = _pgm_tokens(raw, path, 3)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", path, start - 1)
    payload = raw[start:]
    if len(payload) != width * height:
        raise IntegrityError(
            f"payload holds {len(payload)} bytes, {width}x{height} needs {width * height}",
            path, start)
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def as_mask_bytes(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"masks are 2-D, got shape {mask.shape}")
    if mask.dtype == bool:
        return np.where(mask, 255, 0).astype(np.uint8)
    bad = (mask != 0) & (mask != 255)
    if bad.any():
        raise ValueError(f"mask values must be 0 or 255, found {np.unique(mask[bad])[:5].tolist()}")
    return mask.astype(np.uint8)


def write_mask(mask: np.ndarray, path) -> None:
    data = as_mask_bytes(mask)
    height, width = data.shape
    try:
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (width, height))
            fh.write(data.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write mask {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    """Binary mask as ``uint8`` 0/255; any other value is a format error."""
    data = read_pgm(path)
    if ((data != 0) & (data != 255)).any():
        raise FormatError("mask holds values other than 0 and 255", path)
    return data


def write_mask_png(mask: np.ndarray, path) -> None:
    from PIL import Image  # optional dependency

    Image.fromarray(as_mask_bytes(mask), mode="L").save(path)


# ---------------------------------------------------------------- trajectories

def read_trajectory(path) -> Trajectory:
    path = Path(path)
    stamps, rows = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise FormatError(f"line {lineno}: expected 8 fields, got {len(parts)}", path)
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric field", path) from None
        if not all(math.isfinite(v) for v in values):
            raise FormatError(f"line {lineno}: non-finite value", path)
        stamps.append(values[0])
        rows.append(values[1:])
    if not rows:
        raise FormatError("trajectory holds no poses", path)
    stamps = np.asarray(stamps)
    if np.any(np.diff(stamps) <= 0):
        bad = int(np.argmax(np.diff(stamps) <= 0)) + 1
        raise FormatError(f"timestamps not strictly increasing at pose {bad}", path)
    rows = np.asarray(rows)
    quats = rows[:, 3:]
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms == 0):
        raise FormatError("zero-norm quaternion", path)
    off = np.abs(norms - 1.0) > 1e-6
    if off.any():
        warnings.warn(f"{path}: renormalised {int(off.sum())} quaternion(s)", stacklevel=2)
        quats = quats / norms[:, None]
    return Trajectory(stamps, rows[:, :3], quats)


def write_trajectory(traj: Trajectory, path) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
        lines.append(" ".join(repr(float(v)) for v in (t, *p, *q)))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- sequences

def frame_indices(directory, pattern: str = FEATURE) -> list[int]:
    """Frame indices present for a ``%06d`` file pattern, sorted."""
    prefix, suffix = pattern.split("{")[0], pattern.split("}")[1]
    found = []
    for name in os.listdir(directory):
        if name.startswith(prefix) and name.endswith(suffix):
            stem = name[len(prefix):len(name) - len(suffix)]
            if stem.isdigit():
                found.append(int(stem))
    return sorted(found)
