"""Deep-prior reconstruction: fit the untrained generator to the
observed traces of a single corrupted grid, then read the missing
traces off the generator output.

The fixed network input is uniform noise on [0, 0.1); during fitting
it is re-perturbed each iteration with fresh Gaussian noise of standard
deviation ``perturb_sigma``, which regularizes the fit. Only observed
traces enter the loss, so the generator is free at the gaps; the final
reconstruction pastes the observed traces back verbatim.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .diagnostics import snr
from .errors import ContractError, DivergenceError, ParameterError, ReconError, ShapeError
from .grid import NormParams, SeismicGrid, denormalize, normalize01
from .masks import Mask, apply_mask, paste_observed
from .unet import NetworkParameters, UNetSpec, build_graph, build_unet, forward, _pad_reflectless

_PRECISIONS = {"single": np.float32, "double": np.float64}


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 3000
    lr: float = 0.001
    perturb_sigma: float = 0.03
    z_seed: int = 0
    init_seed: int = 0
    perturb_seed: int = 0
    snapshot_iters: tuple[int, ...] = ()
    precision: str = "single"
    snr_every: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ParameterError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr < 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        if self.perturb_sigma < 0:
            raise ParameterError(f"perturb_sigma must be >= 0, got {self.perturb_sigma}")
        if self.precision not in _PRECISIONS:
            raise ParameterError(f"precision must be one of {sorted(_PRECISIONS)}")
        if self.snr_every < 1:
            raise ParameterError("snr_every must be >= 1")

    @property
    def dtype(self):
        return _PRECISIONS[self.precision]


@dataclass
class FitReport:
    loss: np.ndarray                      # one entry per iteration, 1-based iters
    snr_iters: list[int]                  # iterations where SNR was evaluated
    snr_db: list[float]                   # empty when no ground truth given
    snapshots: list[tuple[int, SeismicGrid]]
    wall_time_s: float


def init_input(h: int, w: int, z_seed: int, dtype=np.float32) -> np.ndarray:
    """The fixed network input: (1, 1, h, w) i.i.d. uniform on [0, 0.1)."""
    rng = np.random.default_rng(z_seed)
    return (rng.random((1, 1, h, w)) * 0.1).astype(dtype)


def _mask_tensor(mask: Mask, nt: int, dtype) -> np.ndarray:
    """Broadcast per-trace flags to a (1, 1, nt, nx) 0/1 tensor (constant
    along the time axis)."""
    row = mask.kept.astype(dtype)
    return np.broadcast_to(row, (1, 1, nt, mask.nx)).copy()


def fit(observed: SeismicGrid, mask: Mask, config: FitConfig,
        ground_truth: SeismicGrid | None = None,
        ) -> tuple[NetworkParameters, np.ndarray, NormParams, FitReport]:
    """Optimize the generator on the observed traces.

    Returns the fitted parameters, the fixed input Z, the normalization
    used for the target, and a per-iteration report. Everything is
    determined by (z_seed, init_seed, perturb_seed, config, input) for a
    given precision mode.
    """
    if mask.nx != observed.nx:
        raise ShapeError(f"mask has {mask.nx} traces, grid has {observed.nx}")
    if ground_truth is not None and ground_truth.values.shape != observed.values.shape:
        raise ShapeError("ground truth shape differs from observed")
    dtype = config.dtype
    observed = apply_mask(observed, mask)
    normed, norm = normalize01(observed)
    if norm.degenerate:
        raise ContractError("observed grid is constant; nothing to fit")

    target = normed.values.astype(dtype)[None, None]
    mask01 = _mask_tensor(mask, observed.nt, dtype)
    target_p, _, _ = _pad_reflectless(target)
    mask01_p, _, _ = _pad_reflectless(mask01)

    z = init_input(observed.nt, observed.nx, config.z_seed, dtype)
    zp, _, _ = _pad_reflectless(z)
    params = build_unet(UNetSpec(), config.init_seed, dtype)
    state = ad.AdamState.init(params.tensors)
    perturb_rng = np.random.default_rng(config.perturb_seed)
    ws = ad.Workspace()

    loss_log = np.zeros(config.iterations)
    snr_iters: list[int] = []
    snr_db: list[float] = []
    snapshots: list[tuple[int, SeismicGrid]] = []
    want_snaps = set(config.snapshot_iters)
    t0 = time.perf_counter()

    for it in range(1, config.iterations + 1):
        ws.reset()
        tape = ad.Tape(dtype=dtype, workspace=ws)
        pnodes = {name: tape.leaf(t) for name, t in zip(params.names, params.tensors)}
        if config.perturb_sigma > 0:
            z_it = zp + perturb_rng.normal(0.0, config.perturb_sigma, zp.shape).astype(dtype)
        else:
            z_it = zp
        out, _ = build_graph(tape, pnodes, params.spec, tape.leaf(z_it))
        loss = ad.masked_mse(out, target_p, mask01_p)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise DivergenceError(it)
        loss_log[it - 1] = loss_val
        grads_by_id = ad.backward(loss, tape)
        grads = [grads_by_id.get(pnodes[name].id, np.zeros_like(t))
                 for name, t in zip(params.names, params.tensors)]
        new_tensors, state = ad.adam_step(params.tensors, grads, state, config.lr)
        params = NetworkParameters(params.spec, params.names, new_tensors)

        evaluate_snr = ground_truth is not None and (
            it % config.snr_every == 0 or it == config.iterations)
        if evaluate_snr or it in want_snaps:
            recon = reconstruct(params, z, norm, observed, mask)
            if evaluate_snr:
                snr_iters.append(it)
                snr_db.append(snr(ground_truth, recon))
            if it in want_snaps:
                snapshots.append((it, recon))

    report = FitReport(loss_log, snr_iters, snr_db, snapshots,
                       time.perf_counter() - t0)
    return params, z, norm, report


def reconstruct(params: NetworkParameters, z: np.ndarray, norm: NormParams,
                observed: SeismicGrid, mask: Mask) -> SeismicGrid:
    """Generator output on the clean (unperturbed) input, denormalized,
    with observed traces pasted back bit-for-bit."""
    if norm.degenerate:
        raise ContractError("degenerate normalization parameters")
    out = forward(params, z.astype(params.dtype))
    gen = observed.with_values(out[0, 0].astype(np.float32))
    return paste_observed(denormalize(gen, norm), observed, mask)


@dataclass
class LrSweepArm:
    lr: float
    snr_iters: list[int] = field(default_factory=list)
    snr_db: list[float] = field(default_factory=list)
    error: str | None = None


def lr_sweep(observed: SeismicGrid, mask: Mask, ground_truth: SeismicGrid,
             lrs: list[float], config: FitConfig) -> list[LrSweepArm]:
    """Run one fit per learning rate with shared seeds; a failing arm is
    recorded and the sweep continues."""
    arms = []
    for lr in lrs:
        arm = LrSweepArm(lr)
        try:
            _, _, _, report = fit(observed, mask, replace(config, lr=lr), ground_truth)
            arm.snr_iters = report.snr_iters
            arm.snr_db = report.snr_db
        except ReconError as exc:
            arm.error = f"{type(exc).__name__}: {exc}"
        arms.append(arm)
    return arms


def export_report_csv(report: FitReport, path: str | os.PathLike) -> None:
    """Columns iter, loss, snr_db; the SNR field is blank at iterations
    where it was not evaluated."""
    by_iter = dict(zip(report.snr_iters, report.snr_db))
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "snr_db"])
        for i, lv in enumerate(report.loss, start=1):
            s = by_iter.get(i)
            w.writerow([i, repr(float(lv)), "" if s is None else repr(float(s))])
    os.replace(tmp, path)


def export_sweep_csv(arms: list[LrSweepArm], path: str | os.PathLike) -> None:
    """Long-format CSV: lr, iter, snr_db (one row per logged point)."""
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lr", "iter", "snr_db"])
        for arm in arms:
            if arm.error is not None:
                w.writerow([arm.lr, "", f"error: {arm.error}"])
                continue
            for i, s in zip(arm.snr_iters, arm.snr_db):
                w.writerow([arm.lr, i, repr(float(s))])
    os.replace(tmp, path)
