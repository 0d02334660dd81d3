"""Dense 3D volumes, label maps, the MRVOL001 container, and intensity normalization.

Arrays are indexed ``data[x, y, z]``. On disk the payload is written with x varying
fastest (Fortran order), after a fixed little-endian header::

    bytes 0-7   magic b"MRVOL001"
    u32 x3      nx, ny, nz
    f32 x3      sx, sy, sz (mm per voxel)
    u8          payload code (0 = f32 intensities, 1 = u16 labels, 2 = f32 probability planes)
    u16         num_classes (codes 1 and 2 only)
    ...         raw payload
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MRVOL001"
_MAGIC_PREFIX = b"MRVOL"

CODE_INTENSITY = 0
CODE_LABELS = 1
CODE_PROB = 2

_HEADER = struct.Struct("<3I3fB")


class VolumeFormatError(ValueError):
    """Base class for malformed volume files."""


class UnsupportedVersionError(VolumeFormatError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class LabelRangeError(VolumeFormatError):
    pass


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"dims must be three positive voxel counts, got {dims}")
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity grid with voxel spacing in millimeters."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(data.shape, spacing)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Class-index grid; label 0 is background."""

    labels: np.ndarray
    num_classes: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {labels.shape}")
        if not 1 <= self.num_classes <= 0xFFFF:
            raise ValueError(f"num_classes out of range: {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelRangeError(
                f"labels must lie in [0, {self.num_classes}), found "
                f"[{labels.min()}, {labels.max()}]"
            )
        labels = labels.astype(np.uint16)
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(labels.shape, spacing)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"std must be positive, got {self.std}")


# -- I/O ---------------------------------------------------------------------


def _pack(dims, spacing, code, payload: np.ndarray, num_classes: int | None) -> bytes:
    head = MAGIC + _HEADER.pack(*dims, *spacing, code)
    if code in (CODE_LABELS, CODE_PROB):
        head += struct.pack("<H", num_classes)
    return head + payload.tobytes()


def save_volume(path, vol: Volume | LabelMap) -> None:
    """Write a volume or label map as an MRVOL001 file."""
    if isinstance(vol, LabelMap):
        payload = vol.labels.astype("<u2").ravel(order="F")
        blob = _pack(vol.dims, vol.spacing, CODE_LABELS, payload, vol.num_classes)
    else:
        payload = vol.data.astype("<f4").ravel(order="F")
        blob = _pack(vol.dims, vol.spacing, CODE_INTENSITY, payload, None)
    Path(path).write_bytes(blob)


def save_prob_planes(path, probs: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a (nx, ny, nz, num_classes) probability field, class-major."""
    probs = np.asarray(probs)
    dims = probs.shape[:3]
    num_classes = probs.shape[3]
    payload = np.concatenate(
        [probs[..., c].astype("<f4").ravel(order="F") for c in range(num_classes)]
    )
    Path(path).write_bytes(_pack(dims, spacing, CODE_PROB, payload, num_classes))


def read_mrvol(path) -> tuple[int, tuple, tuple, np.ndarray, int | None]:
    """Parse an MRVOL001 file into (code, dims, spacing, array, num_classes).

    The array is shaped (nx, ny, nz) for codes 0/1 and (nx, ny, nz, num_classes)
    for code 2.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise TruncatedPayloadError(f"{path}: file shorter than magic")
    magic = blob[:8]
    if magic != MAGIC:
        if magic.startswith(_MAGIC_PREFIX):
            raise UnsupportedVersionError(f"{path}: unsupported version {magic!r}")
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    pos = 8 + _HEADER.size
    if len(blob) < pos:
        raise TruncatedPayloadError(f"{path}: truncated header")
    nx, ny, nz, sx, sy, sz, code = _HEADER.unpack_from(blob, 8)
    dims, spacing = (nx, ny, nz), (sx, sy, sz)
    try:
        _check_geometry(dims, spacing)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from None
    num_classes = None
    if code in (CODE_LABELS, CODE_PROB):
        if len(blob) < pos + 2:
            raise TruncatedPayloadError(f"{path}: truncated header")
        (num_classes,) = struct.unpack_from("<H", blob, pos)
        pos += 2
    elif code != CODE_INTENSITY:
        raise VolumeFormatError(f"{path}: unknown payload code {code}")
    n = nx * ny * nz
    dtype, count = {
        CODE_INTENSITY: ("<f4", n),
        CODE_LABELS: ("<u2", n),
        CODE_PROB: ("<f4", n * (num_classes or 0)),
    }[code]
    expected = count * np.dtype(dtype).itemsize
    if len(blob) - pos < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(blob) - pos} bytes, header declares {expected}"
        )
    if len(blob) - pos > expected:
        raise VolumeFormatError(f"{path}: {len(blob) - pos - expected} trailing bytes")
    flat = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    if code == CODE_PROB:
        arr = np.stack(
            [p.reshape(dims, order="F") for p in flat.reshape(num_classes, n)], axis=-1
        )
    else:
        arr = flat.reshape(dims, order="F")
    return code, dims, spacing, arr, num_classes


def load_volume(path) -> Volume | LabelMap:
    """Read an MRVOL001 intensity volume or label map."""
    code, _, spacing, arr, num_classes = read_mrvol(path)
    if code == CODE_INTENSITY:
        if not np.all(np.isfinite(arr)):
            raise VolumeFormatError(f"{path}: non-finite intensities in payload")
        return Volume(arr.astype(np.float32), spacing)
    if code == CODE_LABELS:
        if arr.size and arr.max() >= num_classes:
            raise LabelRangeError(
                f"{path}: label {int(arr.max())} outside declared range [0, {num_classes})"
            )
        return LabelMap(arr.copy(), num_classes, spacing)
    raise VolumeFormatError(f"{path}: payload code {code} is not a volume or label map")


# -- normalization -----------------------------------------------------------


def compute_norm_stats(training_volumes) -> NormStats:
    """Global mean and population std over every voxel of every training volume."""
    vols = list(training_volumes)
    if not vols:
        raise ValueError("need at least one training volume")
    total = sum(v.data.size for v in vols)
    mean = sum(np.sum(v.data, dtype=np.float64) for v in vols) / total
    var = sum(np.sum((v.data.astype(np.float64) - mean) ** 2) for v in vols) / total
    std = float(np.sqrt(var))
    if std == 0.0:
        raise ValueError("degenerate intensity distribution: std is 0")
    return NormStats(float(mean), std)


def normalize(v: Volume, s: NormStats) -> Volume:
    data = (v.data.astype(np.float64) - s.mean) / s.std
    return Volume(data, v.spacing)


def denormalize(v: Volume, s: NormStats) -> Volume:
    return Volume(v.data.astype(np.float64) * s.std + s.mean, v.spacing)


# -- inspection --------------------------------------------------------------


def export_slice_pgm(path, vol: Volume | LabelMap, axis: int, index: int) -> None:
    """Write one slice as an 8-bit binary PGM, min-max windowed."""
    arr = vol.labels if isinstance(vol, LabelMap) else vol.data
    if not 0 <= index < arr.shape[axis]:
        raise IndexError(f"slice {index} outside axis {axis} of size {arr.shape[axis]}")
    img = np.take(arr, index, axis=axis).astype(np.float64).T  # rows = second in-plane axis
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo) * 255.0
    pixels = np.round(scaled).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
