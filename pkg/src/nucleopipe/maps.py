"""Array types shared by the pipeline, their validators, and binary file I/O.

Every map is a plain numpy array:

* RGB image      -- ``uint8`` of shape ``(H, W, 3)``
* ProbMap        -- ``float32`` of shape ``(H, W)``, values in ``[0, 1]``
* ClassProbMap   -- ``float32`` of shape ``(H, W, C)``, per-pixel softmax
* LabelMap       -- ``uint16``/integer of shape ``(H, W)``, 0 = background
* ClassMap       -- integer of shape ``(H, W)``, values in ``0..C-1``

File formats:

* LabelMap / ClassMap -- binary PGM ``P5``, maxval 65535, 16-bit big-endian.
* ProbMap / ClassProbMap -- ``FMAP``: magic, u32 LE height, width, channels,
  then float32 LE payload, row-major, channel-last.
* RGB image -- binary PPM ``P6``, maxval 255.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

PathLike = Union[str, "os.PathLike[str]"]

NUM_CLASSES = 6
BACKGROUND = 0
CLASS_NAMES = ("background", "neoplastic", "inflammatory", "epithelium", "dead", "connective")

SOFTMAX_TOL = 1e-5
MAX_SIDE = 1 << 20
MAX_ELEMENTS = 1 << 31

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class MapValidationError(ValueError):
    """An array violates the invariants of its map type."""


class MapFormatError(ValueError):
    """Base class for malformed map files. ``code`` is a stable identifier."""

    code = "format"


class BadMagicError(MapFormatError):
    code = "bad-magic"


class HeaderError(MapFormatError):
    code = "bad-header"


class DimensionOverflowError(MapFormatError):
    code = "dimension-overflow"


class TruncatedPayloadError(MapFormatError):
    code = "truncated-payload"


# --------------------------------------------------------------------------
# validation


def validate_rgb(image: np.ndarray) -> np.ndarray:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise MapValidationError(f"RGB image must be uint8 (H, W, 3), got {image.dtype} {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise MapValidationError("RGB image must be non-empty")
    return image


def validate_prob_map(probs: np.ndarray) -> np.ndarray:
    if probs.ndim != 2 or probs.size == 0:
        raise MapValidationError(f"ProbMap must be a non-empty 2-D array, got shape {probs.shape}")
    if not np.issubdtype(probs.dtype, np.floating):
        raise MapValidationError(f"ProbMap must be floating point, got {probs.dtype}")
    # NaN fails both comparisons
    if not np.all((probs >= 0) & (probs <= 1)):
        raise MapValidationError("ProbMap values must lie in [0, 1]")
    return probs


def validate_class_prob_map(probs: np.ndarray, n_classes: int | None = NUM_CLASSES) -> np.ndarray:
    if probs.ndim != 3 or probs.shape[0] == 0 or probs.shape[1] == 0:
        raise MapValidationError(f"ClassProbMap must be (H, W, C), got shape {probs.shape}")
    if n_classes is not None and probs.shape[2] != n_classes:
        raise MapValidationError(f"ClassProbMap must have {n_classes} channels, got {probs.shape[2]}")
    if not np.all(probs >= 0):
        raise MapValidationError("ClassProbMap values must be non-negative")
    sums = probs.sum(axis=-1, dtype=np.float64)
    if not np.all(np.abs(sums - 1.0) <= SOFTMAX_TOL):
        raise MapValidationError("ClassProbMap channels must sum to 1 per pixel")
    return probs


def validate_label_map(labels: np.ndarray) -> np.ndarray:
    """Check the contiguous-id and per-instance 8-connectivity invariants."""
    if labels.ndim != 2 or labels.size == 0:
        raise MapValidationError(f"LabelMap must be a non-empty 2-D array, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise MapValidationError(f"LabelMap must be integer typed, got {labels.dtype}")
    if labels.min() < 0:
        raise MapValidationError("LabelMap ids must be non-negative")
    ids = np.unique(labels)
    ids = ids[ids != 0]
    if ids.size and (ids[0] != 1 or ids[-1] != ids.size):
        raise MapValidationError(f"LabelMap ids must be contiguous 1..K, got {ids.tolist()}")
    for idx, box in enumerate(ndimage.find_objects(labels.astype(np.int64, copy=False)), start=1):
        if box is None:
            continue
        _, n = ndimage.label(labels[box] == idx, structure=EIGHT_CONNECTED)
        if n != 1:
            raise MapValidationError(f"instance {idx} has {n} 8-connected components")
    return labels


def validate_class_map(classes: np.ndarray, n_classes: int = NUM_CLASSES) -> np.ndarray:
    if classes.ndim != 2 or classes.size == 0:
        raise MapValidationError(f"ClassMap must be a non-empty 2-D array, got shape {classes.shape}")
    if not np.issubdtype(classes.dtype, np.integer):
        raise MapValidationError(f"ClassMap must be integer typed, got {classes.dtype}")
    if classes.min() < 0 or classes.max() >= n_classes:
        raise MapValidationError(f"ClassMap values must lie in 0..{n_classes - 1}")
    return classes


def argmax_classes(probs: np.ndarray) -> np.ndarray:
    """Per-pixel channel index of the maximum; ties go to the lowest index."""
    # np.argmax returns the first occurrence, which is the lowest channel
    return np.argmax(probs, axis=-1).astype(np.uint16)


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    """Map the nonzero ids of ``labels`` onto 1..K preserving their order."""
    ids = np.unique(labels)
    lut = np.zeros(int(ids.max()) + 1 if ids.size else 1, dtype=np.int64)
    nonzero = ids[ids != 0]
    lut[nonzero] = np.arange(1, nonzero.size + 1)
    return lut[labels]


# --------------------------------------------------------------------------
# low-level readers/writers


def _check_dims(height: int, width: int, channels: int = 1) -> None:
    if height > MAX_SIDE or width > MAX_SIDE:
        raise DimensionOverflowError(f"{height}x{width} exceeds the {MAX_SIDE}-pixel side limit")
    if height * width * channels > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{height}x{width}x{channels} exceeds {MAX_ELEMENTS} elements")


def _read_netpbm_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse a binary netpbm header; returns (width, height, maxval, offset)."""
    if data[:2] != magic:
        raise BadMagicError(f"expected magic {magic!r}, got {data[:2]!r}")
    fields: list[int] = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        if pos >= n:
            raise HeaderError("header ends before width/height/maxval")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < n and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise HeaderError(f"unexpected byte {ch!r} in header")
    if pos >= n or not data[pos : pos + 1].isspace():
        raise HeaderError("missing whitespace after maxval")
    width, height, maxval = fields
    if width == 0 or height == 0:
        raise HeaderError("zero-sized image")
    if not 0 < maxval <= 65535:
        raise HeaderError(f"maxval {maxval} out of range")
    return width, height, maxval, pos + 1


def write_pgm(path: PathLike, array: np.ndarray) -> None:
    if array.ndim != 2:
        raise MapValidationError(f"PGM payload must be 2-D, got shape {array.shape}")
    if array.size and (array.min() < 0 or array.max() > 65535):
        raise MapValidationError("PGM samples must fit in 16 bits")
    h, w = array.shape
    header = b"P5\n%d %d\n65535\n" % (w, h)
    Path(path).write_bytes(header + array.astype(">u2").tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, maxval, offset = _read_netpbm_header(data, b"P5")
    _check_dims(height, width)
    dtype = ">u2" if maxval > 255 else "u1"
    need = height * width * np.dtype(dtype).itemsize
    if len(data) - offset < need:
        raise TruncatedPayloadError(f"expected {need} payload bytes, got {len(data) - offset}")
    arr = np.frombuffer(data, dtype=dtype, count=height * width, offset=offset)
    return arr.reshape(height, width).astype(np.uint16)


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    validate_rgb(image)
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes())


def read_ppm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, maxval, offset = _read_netpbm_header(data, b"P6")
    if maxval > 255:
        raise HeaderError("only 8-bit PPM (maxval <= 255) is supported")
    _check_dims(height, width, 3)
    need = height * width * 3
    if len(data) - offset < need:
        raise TruncatedPayloadError(f"expected {need} payload bytes, got {len(data) - offset}")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    return arr.reshape(height, width, 3).copy()


FMAP_MAGIC = b"FMAP"
_FMAP_HEADER = struct.Struct("<4sIII")


def write_fmap(path: PathLike, array: np.ndarray) -> None:
    """Write a 2-D (single channel) or 3-D channel-last float map."""
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise MapValidationError(f"FMAP payload must be 2-D or 3-D, got shape {array.shape}")
    h, w, c = array.shape
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    Path(path).write_bytes(_FMAP_HEADER.pack(FMAP_MAGIC, h, w, c) + payload)


def read_fmap(path: PathLike, squeeze: bool = True) -> np.ndarray:
    """Read an FMAP file; single-channel maps come back 2-D when ``squeeze``."""
    data = Path(path).read_bytes()
    if data[:4] != FMAP_MAGIC:
        raise BadMagicError(f"expected magic {FMAP_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _FMAP_HEADER.size:
        raise HeaderError("FMAP header truncated")
    _, h, w, c = _FMAP_HEADER.unpack_from(data)
    if h == 0 or w == 0 or c == 0:
        raise HeaderError("zero-sized FMAP")
    _check_dims(h, w, c)
    need = h * w * c * 4
    if len(data) - _FMAP_HEADER.size < need:
        raise TruncatedPayloadError(f"expected {need} payload bytes, got {len(data) - _FMAP_HEADER.size}")
    arr = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=_FMAP_HEADER.size)
    arr = arr.astype(np.float32).reshape(h, w, c)
    return arr[:, :, 0] if squeeze and c == 1 else arr


# --------------------------------------------------------------------------
# typed entry points

MAP_KINDS = ("rgb", "prob", "classprob", "labels", "classes")


def write_map(path: PathLike, array: np.ndarray, kind: str) -> None:
    """Validate ``array`` as ``kind`` and write it in that kind's format."""
    if kind == "rgb":
        write_ppm(path, array)
    elif kind == "prob":
        write_fmap(path, validate_prob_map(array))
    elif kind == "classprob":
        write_fmap(path, validate_class_prob_map(array, n_classes=None))
    elif kind == "labels":
        write_pgm(path, validate_label_map(array))
    elif kind == "classes":
        write_pgm(path, validate_class_map(array))
    else:
        raise ValueError(f"unknown map kind {kind!r}; expected one of {MAP_KINDS}")


def read_map(path: PathLike, kind: str) -> np.ndarray:
    """Read and validate a map of the given kind."""
    if kind == "rgb":
        return read_ppm(path)
    if kind == "prob":
        arr = read_fmap(path, squeeze=False)
        if arr.shape[2] != 1:
            raise MapValidationError(f"ProbMap file has {arr.shape[2]} channels")
        return validate_prob_map(arr[:, :, 0])
    if kind == "classprob":
        return validate_class_prob_map(read_fmap(path, squeeze=False), n_classes=None)
    if kind == "labels":
        return validate_label_map(read_pgm(path))
    if kind == "classes":
        return validate_class_map(read_pgm(path))
    raise ValueError(f"unknown map kind {kind!r}; expected one of {MAP_KINDS}")
