"""Evaluation utilities: SNR, f-k spectra, trace extraction, and
feature-map export.

SNR follows the energy-ratio definition 10*log10(||X||_F^2 / ||X - X*||_F^2)
evaluated on original-amplitude grids. f-k magnitudes are reported in dB
relative to the grid's spectral peak and floored at -80 dB so plots and
CSV stay finite.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParameterError, ShapeError
from .grid import SeismicGrid
from .unet import NetworkParameters, capture_activations

DB_FLOOR = -80.0


def snr(original: SeismicGrid, recon: SeismicGrid) -> float:
    """Decibel energy ratio of the original over the residual.

    Returns inf when the residual is identically zero; an all-zero
    original has no defined SNR and raises.
    """
    if original.values.shape != recon.values.shape:
        raise ShapeError(f"shape mismatch {original.values.shape} vs {recon.values.shape}")
    x = original.values.astype(np.float64)
    e = x - recon.values.astype(np.float64)
    num = float(np.sum(x * x))
    if num == 0.0:
        raise ContractError("SNR undefined: original grid is identically zero")
    den = float(np.sum(e * e))
    if den == 0.0:
        return float("inf")
    return 10.0 * np.log10(num / den)


@dataclass
class FkSpectrum:
    """Magnitude spectrum over (temporal frequency, wavenumber).

    Rows are the non-negative frequency bins; columns are wavenumbers in
    cycles per trace spacing, shifted so zero sits in the middle column.
    """

    magnitude_db: np.ndarray = field(repr=False)
    freqs_hz: np.ndarray = field(repr=False)
    wavenumbers: np.ndarray = field(repr=False)


def fk_spectrum(grid: SeismicGrid, floor_db: float = DB_FLOOR) -> FkSpectrum:
    """2D Fourier magnitude of the grid, floored dB relative to its peak."""
    spec = np.fft.fft2(grid.values.astype(np.float64))
    nf = grid.nt // 2 + 1
    spec = np.fft.fftshift(spec[:nf, :], axes=1)
    mag = np.abs(spec)
    peak = mag.max()
    if peak == 0.0:
        db = np.full(mag.shape, floor_db)
    else:
        with np.errstate(divide="ignore"):
            db = 20.0 * np.log10(mag / peak)
        db = np.maximum(db, floor_db)
    freqs = np.fft.rfftfreq(grid.nt, grid.dt)
    waves = np.fft.fftshift(np.fft.fftfreq(grid.nx))
    return FkSpectrum(db, freqs, waves)


def extract_trace(grid: SeismicGrid, j: int) -> np.ndarray:
    """Column j of the grid, copied."""
    if not (0 <= j < grid.nx):
        raise ParameterError(f"trace index {j} out of range [0, {grid.nx})")
    return grid.values[:, j].copy()


def write_pgm(path: str | os.PathLike, data: np.ndarray) -> None:
    """8-bit binary PGM with per-map min-max scaling; a constant map has
    no scale and renders mid-gray."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"PGM export needs a 2D map, got ndim={data.ndim}")
    lo, hi = data.min(), data.max()
    if hi == lo:
        pix = np.full(data.shape, 128, dtype=np.uint8)
    else:
        pix = np.round((data - lo) / (hi - lo) * 255.0).astype(np.uint8)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + pix.tobytes())
    os.replace(tmp, path)


def write_map_csv(path: str | os.PathLike, data: np.ndarray) -> None:
    """Raw numbers backing an image, one CSV row per map row."""
    data = np.asarray(data)
    lines = [",".join(np.format_float_positional(float(x), unique=True) for x in row)
             for row in data]
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def export_feature_maps(params: NetworkParameters, z: np.ndarray, taps: list[str],
                        channels: list[int], out_dir: str | os.PathLike,
                        iteration: int = 0, kind: str = "feature") -> list[str]:
    """Write each selected (stage, channel) activation map as CSV plus PGM.

    Filenames follow {kind}_{stage}_{channel}_{iteration}.{csv,pgm} inside
    ``out_dir``. Returns the written paths.
    """
    acts = capture_activations(params, z, taps)
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    for stage, act in zip(taps, acts):
        n_ch = act.shape[1]
        for ch in channels:
            if not (0 <= ch < n_ch):
                raise ParameterError(f"channel {ch} out of range for stage {stage} with {n_ch} channels")
            fmap = act[0, ch]
            base = os.path.join(os.fspath(out_dir), f"{kind}_{stage}_{ch}_{iteration}")
            write_map_csv(base + ".csv", fmap)
            write_pgm(base + ".pgm", fmap)
            written += [base + ".csv", base + ".pgm"]
    return written
