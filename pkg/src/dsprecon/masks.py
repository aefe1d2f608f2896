"""Trace masks: which traces of a grid are observed.

Masking is always trace-wise — a trace is either fully observed or
fully missing. Applying a mask zeroes missing traces; pasting restores
observed traces verbatim into a reconstruction, which is what makes the
observed-data constraint exact rather than approximate.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError, ShapeError
from .grid import SeismicGrid

@dataclass(frozen=True)
class Mask:
    """Per-trace keep/drop flags. ``kept[j]`` is True when trace j is observed."""

    nx: int
    kept: np.ndarray = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool)
        if kept.shape != (self.nx,):
            raise ShapeError(f"kept has shape {kept.shape}, expected ({self.nx},)")
        if not kept.any():
            raise ParameterError("mask keeps no traces")
        object.__setattr__(self, "kept", kept)

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept)

    def is_regular(self, factor: int) -> bool:
        """True when the kept traces are exactly one residue class mod factor."""
        j = np.arange(self.nx)
        for phase in range(factor):
            if np.array_equal(self.kept, j % factor == phase):
                return True
        return False


def make_random_mask(nx: int, keep_fraction: float, seed: int) -> Mask:
    """Keep round(keep_fraction * nx) traces chosen uniformly without replacement.

    The count uses round-half-to-even so it is part of the reproducibility
    contract, and the draw is fixed by the seed.
    """
    if nx < 2:
        raise ParameterError(f"nx must be >= 2, got {nx}")
    if not (0.0 < keep_fraction <= 1.0):
        raise ParameterError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n_keep = round(keep_fraction * nx)
    if n_keep < 1:
        raise ParameterError(f"keep_fraction {keep_fraction} keeps no traces of {nx}")
    rng = np.random.default_rng(seed)
    kept = np.zeros(nx, dtype=bool)
    kept[rng.choice(nx, size=n_keep, replace=False)] = True
    return Mask(nx, kept, seed)


def make_regular_mask(nx: int, factor: int, phase: int = 0) -> Mask:
    """Keep trace j iff j mod factor == phase (0-based indices)."""
    if nx < 2:
        raise ParameterError(f"nx must be >= 2, got {nx}")
    if factor < 2:
        raise ParameterError(f"decimation factor must be >= 2, got {factor}")
    if not (0 <= phase < factor):
        raise ParameterError(f"phase must be in [0, {factor}), got {phase}")
    kept = np.arange(nx) % factor == phase
    return Mask(nx, kept, 0)


def apply_mask(grid: SeismicGrid, mask: Mask) -> SeismicGrid:
    """Zero out missing traces; kept traces are copied bit-for-bit."""
    if mask.nx != grid.nx:
        raise ShapeError(f"mask has {mask.nx} traces, grid has {grid.nx}")
    out = grid.values.copy()
    out[:, ~mask.kept] = 0.0
    return grid.with_values(out)


def paste_observed(recon: SeismicGrid, observed: SeismicGrid, mask: Mask) -> SeismicGrid:
    """Overwrite kept traces of a reconstruction with the observed data.

    The result agrees with the observed grid exactly (bitwise) on every
    kept trace, so masking the output reproduces the masked input.
    """
    if not (recon.nt == observed.nt and recon.nx == observed.nx):
        raise ShapeError(f"recon {recon.nt}x{recon.nx} vs observed {observed.nt}x{observed.nx}")
    if mask.nx != recon.nx:
        raise ShapeError(f"mask has {mask.nx} traces, grids have {recon.nx}")
    out = recon.values.copy()
    out[:, mask.kept] = observed.values[:, mask.kept]
    return recon.with_values(out)


def save_mask(mask: Mask, path: str | os.PathLike) -> None:
    """Two-line text format: nx, then one '1'/'0' character per trace."""
    bits = "".join("1" if k else "0" for k in mask.kept)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(f"{mask.nx}\n{bits}\n")
    os.replace(tmp, path)


def load_mask(path: str | os.PathLike) -> Mask:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2:
        raise FormatError(f"{path}: expected 2 lines, got {len(lines)}")
    try:
        nx = int(lines[0])
    except ValueError as exc:
        raise FormatError(f"{path}: line 1 is not an integer") from exc
    bits = lines[1].strip()
    if len(bits) != nx or set(bits) - {"0", "1"}:
        raise FormatError(f"{path}: line 2 must be exactly {nx} characters of '0'/'1'")
    return Mask(nx, np.array([c == "1" for c in bits]))
