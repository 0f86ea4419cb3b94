"""Binary persistence for drives, teacher labels, and model weights.

All three formats are flat little-endian layouts: an 8-byte magic, a u32
version, declared sizes, dense payload, and a trailing CRC32 computed over
every preceding byte. Readers validate in a fixed order — magic, version,
declared-field sanity, exact length, checksum — so that any corruption is
rejected with a typed error rather than crashing or being accepted.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    ConfigError,
    FileFormatError,
    MagicError,
    SchemaError,
    TruncationError,
    VersionError,
)
from .sim import Drive, Frame, RadarGeometry

DRIVE_MAGIC = b"RADKD1\x00\x00"
LABELS_MAGIC = b"RADKDL1\x00"
WEIGHTS_MAGIC = b"RADKDW1\x00"
FORMAT_VERSION = 1

WEIGHT_KINDS = {"teacher-mlp": 1, "student-cnn": 2}
_KIND_NAMES = {v: k for k, v in WEIGHT_KINDS.items()}

_DRIVE_HEADER = struct.Struct("<8sIIIIffffQ")
_LABELS_HEADER = struct.Struct("<8sIII")
_WEIGHTS_HEADER = struct.Struct("<8sIII")
_FRAME_TAIL = struct.Struct("<fd")  # hostSpeed f32, timestamp f64

_F4 = np.dtype("<f4")


def _read_file(path):
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FileFormatError(f"cannot read {path}: {e}") from None


def _append_crc(buf):
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)


def _check_magic(data, magic, what):
    if len(data) < len(magic):
        raise TruncationError(f"{what} file shorter than its magic")
    if data[:len(magic)] != magic:
        raise MagicError(f"not a {what} file (bad magic)")


def _check_crc(data, what):
    stored = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{what} file checksum mismatch")


def _bitmap_bytes(n_range):
    return (n_range + 7) // 8


# ---------------------------------------------------------------- drives


def write_drive(path, drive):
    geometry = drive.geometry
    buf = bytearray()
    buf += _DRIVE_HEADER.pack(
        DRIVE_MAGIC, FORMAT_VERSION, len(drive.frames),
        geometry.n_range, geometry.n_azimuth,
        geometry.range_resolution, geometry.fov_degrees,
        geometry.lane_half_width, drive.frame_interval,
        drive.rng_seed & 0xFFFFFFFFFFFFFFFF,
    )
    for frame in drive.frames:
        if frame.map.shape != (geometry.n_range, geometry.n_azimuth):
            raise ConfigError("frame map shape does not match drive geometry")
        buf += frame.map.astype(_F4, copy=False).tobytes()
        buf += _FRAME_TAIL.pack(frame.host_speed, frame.timestamp)
        buf += np.packbits(frame.ground_truth != 0).tobytes()
    _append_crc(buf)
    Path(path).write_bytes(bytes(buf))


def read_drive(path):
    data = _read_file(path)
    _check_magic(data, DRIVE_MAGIC, "drive")
    if len(data) < _DRIVE_HEADER.size + 4:
        raise TruncationError("drive header incomplete")
    (_, version, n_frames, n_range, n_azimuth,
     res, fov, lane, interval, seed) = _DRIVE_HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported drive format version {version}")
    if not 1 <= n_range <= 100_000 or not 2 <= n_azimuth <= 100_000:
        raise SchemaError("drive header grid size out of domain")
    if n_frames > 10_000_000:
        raise SchemaError("drive header frame count out of domain")
    for name, value in (("rangeResolution", res), ("fovDegrees", fov),
                        ("laneHalfWidth", lane), ("frameInterval", interval)):
        if not math.isfinite(value) or value <= 0:
            raise SchemaError(f"drive header {name} out of domain")
    if fov > 180:
        raise SchemaError("drive header fovDegrees out of domain")

    map_bytes = n_range * n_azimuth * 4
    frame_size = map_bytes + _FRAME_TAIL.size + _bitmap_bytes(n_range)
    expected = _DRIVE_HEADER.size + n_frames * frame_size + 4
    if len(data) != expected:
        raise TruncationError(
            f"drive file length {len(data)} does not match declared contents {expected}"
        )
    _check_crc(data, "drive")

    geometry = RadarGeometry(n_range=n_range, n_azimuth=n_azimuth,
                             range_resolution=float(res), fov_degrees=float(fov),
                             lane_half_width=float(lane))
    frames = []
    offset = _DRIVE_HEADER.size
    for _ in range(n_frames):
        map_ = np.frombuffer(data, _F4, count=n_range * n_azimuth, offset=offset)
        map_ = map_.reshape(n_range, n_azimuth).copy()
        offset += map_bytes
        speed, ts = _FRAME_TAIL.unpack_from(data, offset)
        offset += _FRAME_TAIL.size
        if not math.isfinite(speed) or speed < 0 or not math.isfinite(ts):
            raise SchemaError("frame host speed/timestamp out of domain")
        bits = np.frombuffer(data, np.uint8, count=_bitmap_bytes(n_range), offset=offset)
        offset += _bitmap_bytes(n_range)
        gt = np.unpackbits(bits)[:n_range].astype(np.uint8)
        frames.append(Frame(map=map_, host_speed=float(speed),
                            timestamp=float(ts), ground_truth=gt))
    return Drive(geometry=geometry, frames=frames,
                 frame_interval=float(interval), rng_seed=int(seed))


# ---------------------------------------------------------------- labels


def write_labels(path, labels, n_range):
    """Per-frame Option<label vector>: absence is distinct from all-zero."""
    buf = bytearray()
    buf += _LABELS_HEADER.pack(LABELS_MAGIC, FORMAT_VERSION, len(labels), n_range)
    empty = bytes(_bitmap_bytes(n_range))
    for label in labels:
        if label is None:
            buf += b"\x00" + empty
            continue
        label = np.asarray(label)
        if label.shape != (n_range,):
            raise ConfigError(f"label vector must have length {n_range}")
        buf += b"\x01" + np.packbits(label != 0).tobytes()
    _append_crc(buf)
    Path(path).write_bytes(bytes(buf))


def read_labels(path, expect_frames=None):
    data = _read_file(path)
    _check_magic(data, LABELS_MAGIC, "labels")
    if len(data) < _LABELS_HEADER.size + 4:
        raise TruncationError("labels header incomplete")
    _, version, n_frames, n_range = _LABELS_HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported labels format version {version}")
    if not 1 <= n_range <= 100_000 or n_frames > 10_000_000:
        raise SchemaError("labels header out of domain")
    frame_size = 1 + _bitmap_bytes(n_range)
    expected = _LABELS_HEADER.size + n_frames * frame_size + 4
    if len(data) != expected:
        raise TruncationError(
            f"labels file length {len(data)} does not match declared contents {expected}"
        )
    _check_crc(data, "labels")
    if expect_frames is not None and n_frames != expect_frames:
        raise SchemaError(
            f"labels file has {n_frames} frames but the paired drive has {expect_frames}"
        )
    labels = []
    offset = _LABELS_HEADER.size
    for _ in range(n_frames):
        present = data[offset]
        if present not in (0, 1):
            raise SchemaError("label presence flag out of domain")
        bits = np.frombuffer(data, np.uint8, count=_bitmap_bytes(n_range), offset=offset + 1)
        offset += frame_size
        labels.append(np.unpackbits(bits)[:n_range].astype(np.uint8) if present else None)
    return labels


# ---------------------------------------------------------------- weights


def write_weights(path, kind, tensors):
    if kind not in WEIGHT_KINDS:
        raise ConfigError(f"unknown weights kind {kind!r}")
    buf = bytearray()
    buf += _WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, FORMAT_VERSION,
                                WEIGHT_KINDS[kind], len(tensors))
    for t in tensors:
        t = np.asarray(t)
        if t.ndim < 1 or t.ndim > 4:
            raise ConfigError("weight tensors must have 1..4 dimensions")
        buf += struct.pack("<I", t.ndim)
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += t.astype(_F4, copy=False).tobytes()
    _append_crc(buf)
    Path(path).write_bytes(bytes(buf))


def read_weights(path, expect_kind=None):
    data = _read_file(path)
    _check_magic(data, WEIGHTS_MAGIC, "weights")
    if len(data) < _WEIGHTS_HEADER.size + 4:
        raise TruncationError("weights header incomplete")
    _, version, kind_tag, count = _WEIGHTS_HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported weights format version {version}")
    if kind_tag not in _KIND_NAMES:
        raise SchemaError(f"unknown weights kind tag {kind_tag}")
    if count > 1024:
        raise SchemaError("weights tensor count out of domain")

    # structure walk: find each tensor's extent before touching payload
    end = len(data) - 4
    offset = _WEIGHTS_HEADER.size
    shapes = []
    offsets = []
    for _ in range(count):
        if offset + 4 > end:
            raise TruncationError("weights file ends inside a tensor header")
        ndim = struct.unpack_from("<I", data, offset)[0]
        offset += 4
        if not 1 <= ndim <= 4:
            raise SchemaError(f"tensor rank {ndim} out of domain")
        if offset + 4 * ndim > end:
            raise TruncationError("weights file ends inside a shape descriptor")
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        if any(d < 1 for d in shape) or size > 100_000_000:
            raise SchemaError(f"tensor shape {shape} out of domain")
        if offset + 4 * size > end:
            raise TruncationError("weights file ends inside tensor data")
        shapes.append(shape)
        offsets.append(offset)
        offset += 4 * size
    if offset != end:
        raise TruncationError("weights file has trailing bytes after declared tensors")
    _check_crc(data, "weights")

    kind = _KIND_NAMES[kind_tag]
    if expect_kind is not None and kind != expect_kind:
        raise SchemaError(f"weights file holds {kind}, expected {expect_kind}")
    tensors = []
    for shape, off in zip(shapes, offsets):
        size = int(np.prod(shape, dtype=np.int64))
        t = np.frombuffer(data, _F4, count=size, offset=off).reshape(shape).copy()
        tensors.append(t)
    return kind, tensors


# ---------------------------------------------------------------- json


def read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None
