"""The generator network: a five-stage encoder/decoder with additive
skip connections.

Each encoder stage is conv3x3(s1)-BN-LeakyReLU then conv3x3(s2)-BN-
LeakyReLU, halving resolution; the stage outputs (S1..S5) carry the
encoder filter counts. Each decoder stage is upsample(2x)-conv3x3-BN-
LeakyReLU; stages d1..d4 then add the encoder feature at the same
resolution, routed through a bias-free 1x1 projection when the channel
counts differ. d5 has no same-resolution encoder feature. A final 3x3
conv to one channel plus a sigmoid keeps the output inside (0, 1), the
range the normalized data lives in.

Inputs of arbitrary size >= 32 are zero-padded up to the next multiple
of 32 and the output is cropped back.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ParameterError, ShapeError

_ENCODER_FILTERS = (16, 32, 64, 128, 128)
_DECODER_FILTERS = (128, 128, 64, 32, 16)


@dataclass(frozen=True)
class UNetSpec:
    encoder_filters: tuple[int, ...] = _ENCODER_FILTERS
    decoder_filters: tuple[int, ...] = _DECODER_FILTERS
    leaky_slope: float = 0.2
    input_channels: int = 1
    output_channels: int = 1

    def __post_init__(self):
        if len(self.encoder_filters) != 5 or len(self.decoder_filters) != 5:
            raise ParameterError("expected exactly five encoder and five decoder stages")
        if any(f < 1 for f in self.encoder_filters + self.decoder_filters):
            raise ParameterError("filter counts must be positive")

    @property
    def depth(self) -> int:
        return len(self.encoder_filters)


@dataclass
class NetworkParameters:
    """Ordered parameter tensors; ``names[i]`` tags ``tensors[i]`` with its stage."""

    spec: UNetSpec
    names: list[str]
    tensors: list[np.ndarray] = field(repr=False)

    @property
    def dtype(self):
        return self.tensors[0].dtype

    def n_scalars(self) -> int:
        return sum(t.size for t in self.tensors)

    def astype(self, dtype) -> "NetworkParameters":
        return NetworkParameters(self.spec, list(self.names),
                                 [t.astype(dtype) for t in self.tensors])


def _layer_plan(spec: UNetSpec):
    """Yield (name, shape, kind) in build order; kind is conv/bn/proj."""
    enc, dec = spec.encoder_filters, spec.decoder_filters
    cin = spec.input_channels
    for k, f in enumerate(enc, start=1):
        yield f"enc{k}_conv1_w", (f, cin, 3, 3), "conv"
        yield f"enc{k}_conv1_b", (f,), "bias"
        yield f"enc{k}_bn1_gamma", (f,), "gamma"
        yield f"enc{k}_bn1_beta", (f,), "beta"
        yield f"enc{k}_conv2_w", (f, f, 3, 3), "conv"
        yield f"enc{k}_conv2_b", (f,), "bias"
        yield f"enc{k}_bn2_gamma", (f,), "gamma"
        yield f"enc{k}_bn2_beta", (f,), "beta"
        cin = f
    for j, f in enumerate(dec, start=1):
        yield f"dec{j}_conv_w", (f, cin, 3, 3), "conv"
        yield f"dec{j}_conv_b", (f,), "bias"
        yield f"dec{j}_bn_gamma", (f,), "gamma"
        yield f"dec{j}_bn_beta", (f,), "beta"
        skip_ch = _skip_source_channels(spec, j)
        if skip_ch is not None and skip_ch != f:
            yield f"dec{j}_skip_w", (f, skip_ch, 1, 1), "conv"
        cin = f
    yield "head_w", (spec.output_channels, cin, 3, 3), "conv"
    yield "head_b", (spec.output_channels,), "bias"


def _skip_source_channels(spec: UNetSpec, j: int) -> int | None:
    """Channels of the encoder feature added into decoder stage j (None for d5:
    no encoder feature exists at full resolution)."""
    k = spec.depth - j  # d1 <- S4, d2 <- S3, d3 <- S2, d4 <- S1
    if k < 1:
        return None
    return spec.encoder_filters[k - 1]


def build_unet(spec: UNetSpec, seed: int, dtype=np.float32) -> NetworkParameters:
    """He-normal conv weights (std = sqrt(2/fan_in)), zero biases, unit BN
    gains; fully determined by the seed."""
    rng = np.random.default_rng(seed)
    names, tensors = [], []
    for name, shape, kind in _layer_plan(spec):
        if kind == "conv":
            fan_in = int(np.prod(shape[1:]))
            t = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif kind == "gamma":
            t = np.ones(shape)
        else:
            t = np.zeros(shape)
        names.append(name)
        tensors.append(t.astype(dtype))
    return NetworkParameters(spec, names, tensors)


def parameter_count(spec: UNetSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _layer_plan(spec))


_STAGE_IDS = tuple(f"e{k}" for k in range(1, 6)) + tuple(f"d{j}" for j in range(1, 6))


def build_graph(tape: ad.Tape, param_nodes: dict[str, ad.Node], spec: UNetSpec,
                z: ad.Node, taps: tuple[str, ...] = ()) -> tuple[ad.Node, dict[str, ad.Node]]:
    """Wire the network on an existing tape. ``param_nodes`` maps tensor
    names to leaves; returns the output node and the tapped stage outputs."""
    for t in taps:
        if t not in _STAGE_IDS:
            raise ParameterError(f"unknown stage id {t!r}; valid: {', '.join(_STAGE_IDS)}")
    a = spec.leaky_slope
    tapped: dict[str, ad.Node] = {}
    skips: list[ad.Node] = []
    x = z
    for k in range(1, spec.depth + 1):
        x = ad.conv2d(x, param_nodes[f"enc{k}_conv1_w"], param_nodes[f"enc{k}_conv1_b"], stride=1)
        x = ad.batch_norm(x, param_nodes[f"enc{k}_bn1_gamma"], param_nodes[f"enc{k}_bn1_beta"])
        x = ad.leaky_relu(x, a)
        x = ad.conv2d(x, param_nodes[f"enc{k}_conv2_w"], param_nodes[f"enc{k}_conv2_b"], stride=2)
        x = ad.batch_norm(x, param_nodes[f"enc{k}_bn2_gamma"], param_nodes[f"enc{k}_bn2_beta"])
        x = ad.leaky_relu(x, a)
        skips.append(x)
        if f"e{k}" in taps:
            tapped[f"e{k}"] = x
    for j in range(1, spec.depth + 1):
        x = ad.upsample_bilinear2x(x)
        x = ad.conv2d(x, param_nodes[f"dec{j}_conv_w"], param_nodes[f"dec{j}_conv_b"], stride=1)
        x = ad.batch_norm(x, param_nodes[f"dec{j}_bn_gamma"], param_nodes[f"dec{j}_bn_beta"])
        x = ad.leaky_relu(x, a)
        k = spec.depth - j
        if k >= 1:
            s = skips[k - 1]
            key = f"dec{j}_skip_w"
            if key in param_nodes:
                s = ad.conv2d(s, param_nodes[key], None, stride=1)
            x = ad.add(x, s)
        if f"d{j}" in taps:
            tapped[f"d{j}"] = x
    x = ad.conv2d(x, param_nodes["head_w"], param_nodes["head_b"], stride=1)
    out = ad.sigmoid(x)
    return out, tapped


def _pad_reflectless(z: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Zero-pad H and W up to the next multiple of 32 (bottom/right)."""
    _, _, h, w = z.shape
    if h < 32 or w < 32:
        raise ShapeError(f"input spatial dims must be >= 32, got {h}x{w}")
    ph = (-h) % 32
    pw = (-w) % 32
    if ph or pw:
        z = np.pad(z, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return z, h, w


def forward(params: NetworkParameters, z: np.ndarray,
            workspace: ad.Workspace | None = None) -> np.ndarray:
    """Evaluate the generator on a (1, 1, H, W) input; pure inference."""
    z = np.asarray(z)
    if z.ndim != 4 or z.shape[0] != 1 or z.shape[1] != params.spec.input_channels:
        raise ShapeError(f"expected input shape (1, {params.spec.input_channels}, H, W), got {z.shape}")
    zp, h, w = _pad_reflectless(z)
    tape = ad.Tape(dtype=params.dtype, workspace=workspace)
    nodes = {name: tape.leaf(t) for name, t in zip(params.names, params.tensors)}
    out, _ = build_graph(tape, nodes, params.spec, tape.leaf(zp))
    return out.value[:, :, :h, :w]


def capture_activations(params: NetworkParameters, z: np.ndarray,
                        taps: list[str]) -> list[np.ndarray]:
    """Post-activation feature tensors at the requested stages, in the
    order the taps were given."""
    if not taps:
        return []
    z = np.asarray(z)
    zp, _, _ = _pad_reflectless(z)
    tape = ad.Tape(dtype=params.dtype)
    nodes = {name: tape.leaf(t) for name, t in zip(params.names, params.tensors)}
    _, tapped = build_graph(tape, nodes, params.spec, tape.leaf(zp), taps=tuple(taps))
    return [tapped[t].value for t in taps]


# ---------------------------------------------------------------------------
# checkpoint format: magic "UNET" | u32 version | 5x u32 encoder filters |
# 5x u32 decoder filters | f32 leaky_slope | u32 in_ch | u32 out_ch |
# u32 n_tensors | per tensor: u32 rank, rank x u32 dims, f32 payload (C order)

_CKPT_MAGIC = b"UNET"
_CKPT_VERSION = 1


def save_params(params: NetworkParameters, path: str | os.PathLike) -> None:
    spec = params.spec
    buf = bytearray()
    buf += _CKPT_MAGIC
    buf += struct.pack("<I", _CKPT_VERSION)
    buf += struct.pack("<5I", *spec.encoder_filters)
    buf += struct.pack("<5I", *spec.decoder_filters)
    buf += struct.pack("<fII", spec.leaky_slope, spec.input_channels, spec.output_channels)
    buf += struct.pack("<I", len(params.tensors))
    for t in params.tensors:
        buf += struct.pack("<I", t.ndim)
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t, dtype="<f4").tobytes()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(buf))
    os.replace(tmp, path)


def load_params(path: str | os.PathLike, dtype=np.float32) -> NetworkParameters:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, raw, off)
        off += struct.calcsize(fmt)
        return vals

    magic = raw[:4]; off = 4
    if magic != _CKPT_MAGIC:
        raise FormatError(f"{path}: magic mismatch (got {magic!r})")
    (version,) = take("<I")
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    enc = take("<5I")
    dec = take("<5I")
    slope, in_ch, out_ch = take("<fII")
    spec = UNetSpec(enc, dec, float(np.float32(slope)), in_ch, out_ch)
    (n_tensors,) = take("<I")
    expected = list(_layer_plan(spec))
    if n_tensors != len(expected):
        raise FormatError(f"{path}: tensor count {n_tensors} != {len(expected)} implied by spec")
    names, tensors = [], []
    for name, shape, _ in expected:
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        if dims != shape:
            raise FormatError(f"{path}: tensor {name} has dims {dims}, expected {shape}")
        count = int(np.prod(dims))
        t = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        names.append(name)
        tensors.append(t.astype(dtype))
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return NetworkParameters(spec, names, tensors)
