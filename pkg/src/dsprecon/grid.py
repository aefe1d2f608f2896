"""Seismic grid container and bit-exact file I/O.

A grid is a dense (nt, nx) array of float32 samples: rows are time
samples, columns are traces. The native interchange format is ``sgrd``,
a little-endian binary:

    magic "SGRD" | u32 version=1 | u32 nt | u32 nx | f32 dt | f32 dx |
    nt*nx samples as f32, trace-major (all of trace 0, then trace 1, ...)

so a file is exactly 24 + 4*nt*nx bytes. CSV (nt lines of nx decimal
fields, no header) is supported for inspection and spreadsheet import.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, ParameterError, ShapeError

_MAGIC = b"SGRD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIff")


@dataclass(frozen=True)
class SeismicGrid:
    """A 2D seismic section: ``values[i, j]`` is time sample i of trace j."""

    nt: int
    nx: int
    dt: float
    dx: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.nt < 2 or self.nx < 2:
            raise ParameterError(f"grid must be at least 2x2, got {self.nt}x{self.nx}")
        if not (self.dt > 0 and self.dx > 0):
            raise ParameterError(f"dt and dx must be positive, got dt={self.dt}, dx={self.dx}")
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != (self.nt, self.nx):
            raise ShapeError(f"values shape {v.shape} != (nt, nx) = ({self.nt}, {self.nx})")
        if not np.all(np.isfinite(v)):
            raise ParameterError("grid contains non-finite samples")
        object.__setattr__(self, "values", v)

    def with_values(self, values: np.ndarray) -> "SeismicGrid":
        """Same geometry, new samples."""
        return SeismicGrid(self.nt, self.nx, self.dt, self.dx, values)


@dataclass(frozen=True)
class NormParams:
    """Affine range parameters recorded by :func:`normalize01`."""

    vmin: float
    vmax: float

    @property
    def degenerate(self) -> bool:
        return self.vmax == self.vmin

    @property
    def span(self) -> float:
        return self.vmax - self.vmin


def make_grid(values: np.ndarray, dt: float = 0.004, dx: float = 10.0) -> SeismicGrid:
    """Wrap a plain (nt, nx) array in a grid with the given sampling."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"expected a 2D array, got ndim={values.ndim}")
    return SeismicGrid(values.shape[0], values.shape[1], dt, dx, values)


def save_grid(grid: SeismicGrid, path: str | os.PathLike, format: str = "sgrd") -> None:
    """Write a grid; ``sgrd`` output is byte-deterministic for a given grid."""
    if format == "sgrd":
        payload = _HEADER.pack(_MAGIC, _VERSION, grid.nt, grid.nx,
                               np.float32(grid.dt), np.float32(grid.dx))
        # trace-major: column j contiguous
        payload += np.asfortranarray(grid.values).tobytes(order="F")
        _atomic_write(path, payload)
    elif format == "csv":
        lines = []
        for row in grid.values:
            lines.append(",".join(np.format_float_positional(x, unique=True) for x in row))
        _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))
    else:
        raise ParameterError(f"unknown grid format {format!r}")


def load_grid(path: str | os.PathLike, format: str = "sgrd",
              dt: float = 0.004, dx: float = 10.0) -> SeismicGrid:
    """Read a grid back; sgrd round-trips bit-exactly with :func:`save_grid`.

    For CSV, which stores no sampling metadata, dt and dx supply it.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if format == "sgrd":
        return _decode_sgrd(raw, path)
    if format == "csv":
        return _decode_csv(raw, path, dt, dx)
    raise ParameterError(f"unknown grid format {format!r}")


def _decode_sgrd(raw: bytes, path) -> SeismicGrid:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, nt, nx, dt, dx = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: magic mismatch (got {magic!r}, want {_MAGIC!r})")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expect = _HEADER.size + 4 * nt * nx
    if len(raw) != expect:
        raise FormatError(f"{path}: sample-count mismatch (file {len(raw)} bytes, header implies {expect})")
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    values = flat.reshape(nx, nt).T  # stored trace-major
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: payload contains non-finite samples")
    return SeismicGrid(nt, nx, dt, dx, values.copy())


def _decode_csv(raw: bytes, path, dt: float, dx: float) -> SeismicGrid:
    rows = []
    for ln, line in enumerate(raw.decode("ascii", errors="replace").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError as exc:
            raise FormatError(f"{path}:{ln}: malformed value ({exc})") from exc
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise FormatError(f"{path}: ragged rows (expected {width} fields per line)")
    values = np.array(rows, dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: payload contains non-finite samples")
    return make_grid(values, dt, dx)


def _atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def normalize01(grid: SeismicGrid) -> tuple[SeismicGrid, NormParams]:
    """Map sample values affinely onto [0, 1] over the whole grid.

    A constant grid cannot be scaled; it comes back all-zeros with a
    degenerate NormParams that :func:`denormalize` refuses.
    """
    vmin = float(grid.values.min())
    vmax = float(grid.values.max())
    p = NormParams(vmin, vmax)
    if p.degenerate:
        return grid.with_values(np.zeros_like(grid.values)), p
    scaled = (grid.values.astype(np.float64) - vmin) / p.span
    return grid.with_values(scaled.astype(np.float32)), p


def denormalize(grid: SeismicGrid, p: NormParams) -> SeismicGrid:
    """Invert :func:`normalize01`. Rejects degenerate params."""
    if p.degenerate:
        raise ContractError("cannot denormalize with degenerate NormParams (vmin == vmax)")
    restored = grid.values.astype(np.float64) * p.span + p.vmin
    return grid.with_values(restored.astype(np.float32))
