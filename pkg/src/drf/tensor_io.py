"""Tensor containers, image/CSV export and reproducible random streams.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. On disk a
tensor is a pair of files sharing a stem::

    <stem>.json   {"shape": [...], "dtype": "f32", "byte_order": "little",
                   "layout": "row-major"}
    <stem>.bin    raw little-endian IEEE-754 float32, row-major

Random streams use the Philox-4x64 counter-based generator keyed by
``(seed, stream_id)`` so that sequences are identical on every platform.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

_DTYPE = np.dtype("<f4")


class ContainerError(ValueError):
    """Raised when a tensor container cannot be read back faithfully."""


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p


def _with_ext(stem: Path, ext: str) -> Path:
    # append rather than replace: "cap.image" -> "cap.image.json"
    return stem.with_name(stem.name + ext)


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce ``data`` to a float32 tensor, optionally reshaping it."""
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"shape entries must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"shape {shape} does not match {arr.size} values")
        arr = arr.reshape(shape)
    return arr


def save_tensor(t, path) -> None:
    """Write ``t`` as a ``.json`` header plus ``.bin`` payload next to ``path``."""
    arr = np.ascontiguousarray(np.asarray(t, dtype=_DTYPE))
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise ContainerError(f"{path}: non-finite data")
    stem = _stem(path)
    header = {
        "shape": [int(s) for s in arr.shape],
        "dtype": "f32",
        "byte_order": "little",
        "layout": "row-major",
    }
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        with open(_with_ext(stem, ".bin"), "wb") as fh:
            fh.write(arr.tobytes(order="C"))
        with open(_with_ext(stem, ".json"), "w") as fh:
            json.dump(header, fh)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write tensor container at {stem}: {exc}") from exc


def load_tensor(path) -> np.ndarray:
    stem = _stem(path)
    try:
        with open(_with_ext(stem, ".json")) as fh:
            header = json.load(fh)
        raw = _with_ext(stem, ".bin").read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor container at {stem}: {exc}") from exc
    if header.get("dtype") != "f32" or header.get("byte_order") != "little":
        raise ContainerError(f"{stem}: unsupported dtype/byte order in header")
    shape = tuple(int(s) for s in header["shape"])
    if not shape or any(s <= 0 for s in shape):
        raise ContainerError(f"{stem}: corrupt container (bad shape {shape})")
    n = int(np.prod(shape))
    if len(raw) != n * _DTYPE.itemsize:
        raise ContainerError(
            f"{stem}: corrupt container ({len(raw)} bytes for shape {list(shape)})"
        )
    arr = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ContainerError(f"{stem}: non-finite data")
    return arr


def export_image(t, path, normalize: bool = True) -> None:
    """Write a rank-2 (gray) or rank-3 ``[h, w, 3]`` tensor as a 16-bit PNG.

    With ``normalize`` the image is mapped affinely so that its minimum
    becomes 0 and its maximum 65535; a constant image maps to 0. Without
    it, values are taken to lie in [0, 1] and are clipped.
    """
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError(f"export_image needs [h,w] or [h,w,3], got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("export_image: non-finite values")
    if normalize:
        lo, hi = arr.min(), arr.max()
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    q = np.rint(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if q.ndim == 3:
        q = q[:, :, ::-1]  # OpenCV stores BGR
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(os.fspath(path), np.ascontiguousarray(q)):
        raise OSError(f"cannot write PNG at {path}")


def read_image(path) -> np.ndarray:
    """Read a 16-bit PNG written by :func:`export_image` back to [0, 1] floats."""
    q = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise OSError(f"cannot read PNG at {path}")
    if q.ndim == 3:
        q = q[:, :, ::-1]
    return q.astype(np.float64) / 65535.0


def export_csv(rows: Iterable[Sequence], path, header: Sequence[str] | None = None) -> None:
    """Write ``(label, value, ...)`` rows as RFC-4180 CSV.

    Floats are written with nine digits after the decimal point. If no
    ``header`` is given one is generated from the row arity.
    """
    rows = [tuple(r) for r in rows]
    arity = {len(r) for r in rows}
    if len(arity) > 1:
        raise ValueError(f"ragged rows: arities {sorted(arity)}")
    if header is None:
        n = arity.pop() if arity else 1
        header = ["label"] + [f"value{i}" for i in range(n - 1)]
    elif rows and len(header) != len(rows[0]):
        raise ValueError("header arity does not match rows")

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.9f}"
        return str(v)

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise ValueError(f"{name} must fit in 64 unsigned bits, got {v}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: int) -> "RngStream":
        """Derive an independent stream with the same seed."""
        return RngStream(self.seed, int(stream_id) % 2**64)
