"""Volume and mask containers plus their binary file formats.

VOL1: magic "VOL1", u32 version, u32 h, u32 w, u32 d, 3 x f32 spacing,
then d slices of h*w little-endian f32, row-major.
MSK1: magic "MSK1", same header fields, then u16 n_classes, then u8 labels
in the same slice order. Both formats are strict: wrong magic, wrong version,
or a payload that disagrees with the header dims is a format error, never a
silent misread.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, FormatError

VOL_MAGIC = b"VOL1"
MSK_MAGIC = b"MSK1"
FORMAT_VERSION = 1
DEFAULT_SPACING = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class Volume:
    """Grayscale volume, voxels indexed (depth, row, col), values in [0,1]."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise DimensionError(f"Volume needs (d,h,w) voxels, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ContractError("Volume contains non-finite voxels")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ContractError(f"Volume spacing must be 3 positive floats, got {self.spacing}")

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]


@dataclass(frozen=True)
class MaskVolume:
    """Integer label volume; class 0 is background."""

    labels: np.ndarray
    n_classes: int
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise DimensionError(f"MaskVolume needs (d,h,w) labels, got {self.labels.shape}")
        if self.n_classes < 2 or self.n_classes > 255:
            raise ContractError(f"MaskVolume n_classes out of range: {self.n_classes}")
        if self.labels.max(initial=0) >= self.n_classes:
            raise ContractError(
                f"mask label {self.labels.max()} exceeds n_classes-1 = {self.n_classes - 1}"
            )
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ContractError(f"MaskVolume spacing must be 3 positive floats, got {self.spacing}")

    @property
    def depth(self) -> int:
        return self.labels.shape[0]


def _write_header(fh, magic: bytes, h: int, w: int, d: int, spacing) -> None:
    fh.write(magic)
    fh.write(struct.pack("<IIII", FORMAT_VERSION, h, w, d))
    fh.write(struct.pack("<fff", *spacing))


def _read_header(blob: bytes, magic: bytes, path) -> tuple[int, int, int, tuple, int]:
    if blob[:4] != magic:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    if len(blob) < 32:
        raise FormatError(f"{path}: truncated header, {len(blob)} bytes")
    version, h, w, d = struct.unpack_from("<IIII", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    spacing = struct.unpack_from("<fff", blob, 20)
    if h < 1 or w < 1 or d < 1:
        raise FormatError(f"{path}: degenerate dims h={h} w={w} d={d}")
    return h, w, d, spacing, 32


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc


def write_volume(path, vol: Volume) -> None:
    d, h, w = vol.voxels.shape
    with open(path, "wb") as fh:
        _write_header(fh, VOL_MAGIC, h, w, d, vol.spacing)
        fh.write(np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    blob = _read_bytes(path)
    h, w, d, spacing, off = _read_header(blob, VOL_MAGIC, path)
    expected = d * h * w * 4
    payload = blob[off:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes for "
            f"{d}x{h}x{w} f32, got {len(payload)}"
        )
    voxels = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).copy()
    if not np.all(np.isfinite(voxels)):
        raise FormatError(f"{path}: non-finite voxel values")
    return Volume(voxels=voxels, spacing=spacing)


def write_mask(path, msk: MaskVolume) -> None:
    d, h, w = msk.labels.shape
    with open(path, "wb") as fh:
        _write_header(fh, MSK_MAGIC, h, w, d, msk.spacing)
        fh.write(struct.pack("<H", msk.n_classes))
        fh.write(np.ascontiguousarray(msk.labels, dtype=np.uint8).tobytes())


def read_mask(path) -> MaskVolume:
    blob = _read_bytes(path)
    h, w, d, spacing, off = _read_header(blob, MSK_MAGIC, path)
    if len(blob) < off + 2:
        raise FormatError(f"{path}: truncated before n_classes field")
    (n_classes,) = struct.unpack_from("<H", blob, off)
    off += 2
    expected = d * h * w
    payload = blob[off:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes for "
            f"{d}x{h}x{w} u8, got {len(payload)}"
        )
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w).copy()
    if labels.max(initial=0) >= n_classes:
        raise FormatError(f"{path}: label {labels.max()} >= n_classes {n_classes}")
    return MaskVolume(labels=labels, n_classes=n_classes, spacing=spacing)
