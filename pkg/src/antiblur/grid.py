"""Grid containers (images, deformation fields, label maps) and their file formats.

Everything here is a value: arrays are copied on construction and marked
read-only, so instances can be shared freely between threads.

Conventions
-----------
* Storage is row-major; axis ``c`` of the array is axis ``c`` of the grid.
* Displacement component ``c`` moves samples along storage axis ``c``.
* Intensities live nominally in ``[0, 1]``; images are stored as float32,
  which makes the float32 ``rawvol`` format lossless for every image.
* Fields are stored as float64 with shape ``(*dims, ndim)`` (component last,
  i.e. component-interleaved per grid point).
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, FormatError

__all__ = [
    "Image", "DeformationField", "LabelMap", "StageTrace",
    "zero_field", "load_image", "save_image", "load_field", "save_field",
    "load_labels", "save_labels",
]


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3):
        raise DimensionError(f"expected 2 or 3 axes, got {len(dims)}")
    if any(d < 2 for d in dims):
        raise DimensionError(f"every axis needs at least 2 voxels, got {dims}")
    return dims


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Image:
    """Scalar intensity grid in 2D or 3D."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        _check_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise DataError("image intensities must be finite")
        object.__setattr__(self, "data", _frozen(arr, np.float32))

    @property
    def dims(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-voxel displacement vectors in voxel units, shape ``(*dims, ndim)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim < 3:
            raise DimensionError(f"field array needs shape (*dims, ndim), got {arr.shape}")
        dims = _check_dims(arr.shape[:-1])
        if arr.shape[-1] != len(dims):
            raise DimensionError(
                f"{len(dims)}-axis field needs {len(dims)} components, got {arr.shape[-1]}")
        if not np.all(np.isfinite(arr)):
            raise DataError("displacements must be finite")
        object.__setattr__(self, "data", _frozen(arr, np.float64))

    @property
    def dims(self):
        return self.data.shape[:-1]

    @property
    def ndim(self):
        return self.data.ndim - 1

    def component(self, axis):
        return self.data[..., axis]

    def channels(self):
        """Component-first view, shape ``(ndim, *dims)``."""
        return np.moveaxis(self.data, -1, 0)

    @classmethod
    def from_channels(cls, channels):
        return cls(np.moveaxis(np.asarray(channels), 0, -1))

    def __eq__(self, other):
        if not isinstance(other, DeformationField):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer segmentation grid; label 0 is background."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        _check_dims(arr.shape)
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
                raise DataError("labels must be integers")
        if np.any(arr < 0):
            raise DataError("labels must be non-negative")
        object.__setattr__(self, "data", _frozen(arr, np.int32))

    @property
    def dims(self):
        return self.data.shape

    @property
    def label_set(self):
        return frozenset(int(v) for v in np.unique(self.data))

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class StageTrace:
    """What one stage of a multi-stage registration produced."""

    stage_index: int
    incremental_field: DeformationField
    combined_field: DeformationField
    warped: Image
    loss_similarity: float
    loss_regularizer: float
    loss_history: tuple = field(default=(), repr=False)


def zero_field(dims):
    """Identity transform: a field of zero displacements."""
    dims = _check_dims(dims)
    return DeformationField(np.zeros(dims + (len(dims),)))


# -- file formats -----------------------------------------------------------

def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("pgm", "rawvol"):
            raise FormatError(f"unknown format {fmt!r}")
        return fmt
    return "pgm" if str(path).lower().endswith(".pgm") else "rawvol"


def sidecar_path(path):
    return Path(str(path) + ".json")


def _pgm_tokens(buf):
    """Yield (token, end_offset) for the header, skipping ``#`` comments."""
    pos = 0
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
                pos += 1
            yield buf[start:pos], pos


def _read_pgm(path):
    buf = Path(path).read_bytes()
    header = []
    end = 0
    for tok, end in _pgm_tokens(buf):
        header.append(tok)
        if len(header) == 4:
            break
    if len(header) < 4 or header[0] != b"P5":
        raise FormatError(f"{path}: not a binary P5 PGM")
    try:
        width, height, maxval = (int(t) for t in header[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PGM header values")
    # exactly one whitespace byte separates header from raster
    payload = buf[end + 1:]
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height
    if len(payload) < count * dtype.itemsize:
        raise DimensionError(f"{path}: raster shorter than {width}x{height}")
    raster = np.frombuffer(payload, dtype=dtype, count=count).reshape(height, width)
    return raster, maxval


def _write_pgm(path, values, maxval=255):
    height, width = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(values.astype(np.uint8).tobytes())


def _read_rawvol(path):
    meta_path = sidecar_path(path)
    try:
        meta = json.loads(meta_path.read_text())
        dims = tuple(int(d) for d in meta["dims"])
        components = int(meta.get("components", 1))
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{meta_path}: malformed sidecar") from exc
    raw = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(dims)) * components
    if raw.size != expected:
        raise DimensionError(
            f"{path}: {raw.size} floats, sidecar dims {list(dims)} x {components} need {expected}")
    if not np.all(np.isfinite(raw)):
        raise DataError(f"{path}: payload contains NaN or Inf")
    shape = dims if components == 1 else dims + (components,)
    return raw.reshape(shape), dims, components


def _write_rawvol(path, arr, dims, components):
    tmp = str(path) + ".tmp"
    np.ascontiguousarray(arr, dtype="<f4").tofile(tmp)
    os.replace(tmp, path)
    meta = {"dims": [int(d) for d in dims], "components": int(components)}
    sidecar_path(path).write_text(json.dumps(meta) + "\n")


def load_image(path, fmt=None):
    """Read an image; PGM is scaled by its maxval, rawvol is read verbatim."""
    fmt = _infer_format(path, fmt)
    if fmt == "pgm":
        raster, maxval = _read_pgm(path)
        return Image(raster.astype(np.float64) / maxval)
    data, _, components = _read_rawvol(path)
    if components != 1:
        raise DimensionError(f"{path}: image sidecar declares {components} components")
    return Image(data)


def save_image(img, path, fmt=None):
    """Write ``img``; PGM quantizes to 8 bits (round half up), rawvol is lossless."""
    fmt = _infer_format(path, fmt)
    if fmt == "pgm":
        if img.ndim != 2:
            raise DimensionError("PGM holds 2D images only")
        q = np.floor(np.clip(img.data.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5)
        _write_pgm(path, q)
    else:
        _write_rawvol(path, img.data, img.dims, 1)


def load_field(path):
    data, dims, components = _read_rawvol(path)
    if components != len(dims):
        raise DimensionError(
            f"{path}: field needs {len(dims)} components, sidecar says {components}")
    return DeformationField(data.astype(np.float64))


def save_field(fld, path):
    """Store a field as float32 rawvol (lossy for float64 displacements)."""
    _write_rawvol(path, fld.data, fld.dims, fld.ndim)


def load_labels(path, fmt=None):
    fmt = _infer_format(path, fmt)
    if fmt == "pgm":
        raster, _ = _read_pgm(path)
        return LabelMap(raster.astype(np.int64))
    data, _, components = _read_rawvol(path)
    if components != 1:
        raise DimensionError(f"{path}: label sidecar declares {components} components")
    return LabelMap(data)


def save_labels(labels, path, fmt=None):
    fmt = _infer_format(path, fmt)
    if fmt == "pgm":
        if len(labels.dims) != 2 or labels.data.max(initial=0) > 255:
            raise DimensionError("PGM labels must be 2D with values <= 255")
        _write_pgm(path, labels.data)
    else:
        _write_rawvol(path, labels.data.astype(np.float32), labels.dims, 1)
