"""Convolutional spiking network: configuration, forward pass, BPTT, checkpoints.

Each block is ``conv -> 2x2 max pool -> LIF``; the last block's spikes are
flattened into a fully connected layer driving one LIF neuron per class.
Membranes start at zero for every sample and carry across its time steps.

Because no layer feeds back into an earlier one, the forward pass is
evaluated layer by layer over all time steps at once (convolutions see the
time axis as a batch) and the backward pass walks the layers in reverse,
running each LIF population's reverse-time recurrence in turn. This visits the
same computation graph as a step-by-step unroll.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lif import LifParams, LifTrace, Reset, SurrogateSpec, lif_sequence_backward, lif_sequence_forward
from .tensor_core import (
    ConvSpec,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    linear_backward,
    linear_forward,
    maxpool2d_backward,
    maxpool2d_forward,
)


class CheckpointError(ValueError):
    """Malformed or incompatible weight checkpoint."""


# With U_pre = beta*U + (1-beta)*I, binary inputs and +-1/sqrt(fan_in) weights,
# conv outputs rarely exceed ~0.8, so a unit threshold leaves every layer
# silent at initialisation. 0.25 keeps all layers active from the first step.
DEFAULT_NEURON = LifParams(beta=0.5, threshold=0.25)


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 2
    height: int = 180
    width: int = 240
    time_steps: int = 30
    conv_channels: tuple[int, ...] = (12, 32, 45)
    kernel_size: int = 5
    num_classes: int = 24
    hidden_lif: tuple[LifParams, ...] | None = None
    output_lif: LifParams = DEFAULT_NEURON
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.hidden_lif is None:
            object.__setattr__(self, "hidden_lif", (DEFAULT_NEURON,) * len(self.conv_channels))
        else:
            object.__setattr__(self, "hidden_lif", tuple(self.hidden_lif))
        if len(self.hidden_lif) != len(self.conv_channels):
            raise ValueError("need one LifParams per conv block")
        if not self.conv_channels:
            raise ValueError("at least one conv block is required")
        if min(self.in_channels, self.time_steps, self.kernel_size, *self.conv_channels) < 1:
            raise ValueError(f"all extents must be positive: {self}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        self.block_shapes()  # rejects geometries that do not survive every block

    def conv_specs(self) -> list[ConvSpec]:
        chans = (self.in_channels,) + self.conv_channels
        k = self.kernel_size
        return [ConvSpec(chans[i], chans[i + 1], k, k) for i in range(len(self.conv_channels))]

    def block_shapes(self) -> list[dict[str, tuple[int, int, int]]]:
        """Per-block ``conv`` and ``pool`` output shapes ``(C, H, W)``."""
        h, w = self.height, self.width
        out = []
        for i, spec in enumerate(self.conv_specs(), start=1):
            if spec.kernel_h > h or spec.kernel_w > w:
                raise ValueError(
                    f"geometry {self.height}x{self.width} too small: conv{i} needs at least "
                    f"{spec.kernel_h}x{spec.kernel_w} input, gets {h}x{w}"
                )
            h, w = spec.output_hw(h, w)
            conv = (spec.out_channels, h, w)
            if h < 2 or w < 2:
                raise ValueError(
                    f"geometry {self.height}x{self.width} too small: pool{i} needs at least "
                    f"2x2 input, gets {h}x{w}"
                )
            h, w = h // 2, w // 2
            out.append({"conv": conv, "pool": (spec.out_channels, h, w)})
        return out

    @property
    def flat_dim(self) -> int:
        return math.prod(self.block_shapes()[-1]["pool"])

    @property
    def frame_shape(self) -> tuple[int, int, int, int]:
        return (self.time_steps, self.in_channels, self.height, self.width)


class NetworkWeights:
    """Named parameter tensors, kept in declaration order.

    Names are ``conv{i}.weight``, ``conv{i}.bias`` for each block followed by
    ``fc.weight``, ``fc.bias``.
    """

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "NetworkWeights":
        return NetworkWeights({k: v.copy() for k, v in self.tensors.items()})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NetworkWeights):
            return NotImplemented
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )

    @staticmethod
    def shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for i, spec in enumerate(config.conv_specs(), start=1):
            out[f"conv{i}.weight"] = spec.kernel_shape
            out[f"conv{i}.bias"] = (spec.out_channels,)
        out["fc.weight"] = (config.num_classes, config.flat_dim)
        out["fc.bias"] = (config.num_classes,)
        return out

    def check(self, config: NetworkConfig) -> None:
        expected = self.shapes(config)
        if list(expected) != list(self.tensors):
            raise ShapeError(f"weight names {list(self.tensors)} != {list(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    @classmethod
    def zeros_like(cls, other: "NetworkWeights") -> "NetworkWeights":
        return cls({k: np.zeros_like(v) for k, v in other.items()})


def init_weights(config: NetworkConfig, rng: np.random.Generator) -> NetworkWeights:
    """Uniform in +-1/sqrt(fan_in) for every weight, zero biases."""
    tensors = {}
    for name, shape in NetworkWeights.shapes(config).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(math.prod(shape[1:]))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return NetworkWeights(tensors)


@dataclass
class BlockRecord:
    inputs: np.ndarray  # [T, C_in, H, W] spikes (or frames) entering the conv
    conv_shape: tuple[int, ...]  # [T, C, H', W'] conv output shape
    argmax: np.ndarray  # [T, C, H'/2, W'/2]
    lif: LifTrace


@dataclass
class ForwardRecord:
    blocks: list[BlockRecord]
    fc_inputs: np.ndarray  # [T, D]
    output: LifTrace

    @property
    def output_spikes(self) -> np.ndarray:
        """Output spike train ``[T, num_classes]``."""
        return self.output.spikes

    @property
    def time_steps(self) -> int:
        return self.fc_inputs.shape[0]


def forward(
    frames: np.ndarray,
    weights: NetworkWeights,
    config: NetworkConfig,
    relaxed: bool = False,
) -> ForwardRecord:
    """Run one sample ``[T, C, H, W]`` through the network.

    With ``relaxed=True`` every spike is replaced by the smooth relaxation
    whose slope is the surrogate gradient, giving a differentiable forward the
    backward pass is the exact adjoint of.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape != config.frame_shape:
        raise ShapeError(f"frames shape {frames.shape} != expected {config.frame_shape}")
    smooth = config.surrogate if relaxed else None
    x = frames
    blocks = []
    for i, (spec, lif) in enumerate(zip(config.conv_specs(), config.hidden_lif), start=1):
        conv = conv2d_forward(x, weights[f"conv{i}.weight"], weights[f"conv{i}.bias"], spec)
        pooled, argmax = maxpool2d_forward(conv)
        trace = lif_sequence_forward(pooled, lif, relaxed=smooth)
        blocks.append(BlockRecord(x, conv.shape, argmax, trace))
        x = trace.spikes
    flat = x.reshape(x.shape[0], -1)
    current = linear_forward(flat, weights["fc.weight"], weights["fc.bias"])
    out = lif_sequence_forward(current, config.output_lif, relaxed=smooth)
    return ForwardRecord(blocks, flat, out)


def backward(
    record: ForwardRecord,
    grad_output: np.ndarray,
    weights: NetworkWeights,
    config: NetworkConfig,
) -> NetworkWeights:
    """Backpropagation through time for one sample.

    Args:
        record: Result of :func:`forward` on the sample.
        grad_output: Loss gradient with respect to the output spikes, ``[T, K]``.
        weights: The weights used for the forward pass.
        config: The network configuration.

    Returns:
        Weight gradients summed over all time steps.
    """
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != record.output_spikes.shape:
        raise ShapeError(
            f"grad_output shape {grad_output.shape} != output spikes {record.output_spikes.shape}"
        )
    if len(record.blocks) != len(config.conv_channels):
        raise ShapeError("record does not match the network configuration")
    surrogate = config.surrogate
    grads: dict[str, np.ndarray] = {}

    out = record.output
    g_current = lif_sequence_backward(
        out.u_pre, grad_output, config.output_lif, surrogate, spikes=out.spikes
    )
    g_flat, grads["fc.weight"], grads["fc.bias"] = linear_backward(
        g_current, record.fc_inputs, weights["fc.weight"]
    )
    g_spikes = g_flat.reshape(record.blocks[-1].lif.spikes.shape)

    specs = config.conv_specs()
    for i in range(len(record.blocks), 0, -1):
        blk = record.blocks[i - 1]
        g_pool = lif_sequence_backward(
            blk.lif.u_pre, g_spikes, config.hidden_lif[i - 1], surrogate, spikes=blk.lif.spikes
        )
        g_conv = maxpool2d_backward(g_pool, blk.argmax, blk.conv_shape)
        g_spikes, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = conv2d_backward(
            g_conv, blk.inputs, weights[f"conv{i}.weight"], specs[i - 1], input_grad=i > 1
        )
    return NetworkWeights({name: grads[name] for name in weights})


def predict(spikes: np.ndarray | ForwardRecord) -> int:
    """Class with the most output spikes; ties go to the lowest index."""
    if isinstance(spikes, ForwardRecord):
        spikes = spikes.output_spikes
    spikes = np.asarray(spikes)
    if spikes.ndim != 2 or spikes.shape[0] < 1:
        raise ShapeError(f"expected a [T, num_classes] spike train, got {spikes.shape}")
    return int(np.argmax(spikes.sum(axis=0)))


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"EVWT"
CHECKPOINT_VERSION = 1
_RESET_CODES = {Reset.SUBTRACT: 0, Reset.ZERO: 1}


def _pack_lif(p: LifParams) -> bytes:
    return struct.pack("<ddB", p.beta, p.threshold, _RESET_CODES[p.reset])


def encode_checkpoint(config: NetworkConfig, weights: NetworkWeights) -> bytes:
    """Serialise a configuration echo followed by raw float64 tensors.

    Layout (little-endian)::

        "EVWT" | u16 version
        u16 in_channels | u32 height | u32 width | u32 time_steps
        u16 kernel_size | u16 num_blocks | u32 channels[num_blocks] | u32 num_classes
        (f64 beta, f64 threshold, u8 reset) for each block, then the output layer
        f64 surrogate slope
        tensors in declaration order, each as raw f64 values
    """
    weights.check(config)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    n = len(config.conv_channels)
    buf.write(
        struct.pack(
            "<HIIIHH", config.in_channels, config.height, config.width,
            config.time_steps, config.kernel_size, n,
        )
    )
    buf.write(struct.pack(f"<{n}I", *config.conv_channels))
    buf.write(struct.pack("<I", config.num_classes))
    for p in config.hidden_lif + (config.output_lif,):
        buf.write(_pack_lif(p))
    buf.write(struct.pack("<d", config.surrogate.slope))
    for _, arr in weights.items():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return chunk


def decode_checkpoint(data: bytes) -> tuple[NetworkConfig, NetworkWeights]:
    r = _Reader(data)
    if r.raw(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a weight checkpoint (bad magic)")
    (version,) = r.take("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    in_ch, height, width, steps, ksize, n = r.take("<HIIIHH")
    channels = r.take(f"<{n}I")
    (num_classes,) = r.take("<I")
    codes = {v: k for k, v in _RESET_CODES.items()}
    lifs = []
    for _ in range(n + 1):
        beta, theta, code = r.take("<ddB")
        if code not in codes:
            raise CheckpointError(f"unknown reset code {code}")
        lifs.append(LifParams(beta, theta, codes[code]))
    (slope,) = r.take("<d")
    try:
        config = NetworkConfig(
            in_channels=in_ch, height=height, width=width, time_steps=steps,
            conv_channels=channels, kernel_size=ksize, num_classes=num_classes,
            hidden_lif=tuple(lifs[:-1]), output_lif=lifs[-1], surrogate=SurrogateSpec(slope),
        )
    except ValueError as exc:
        raise CheckpointError(f"invalid configuration in checkpoint: {exc}") from exc
    tensors = {}
    for name, shape in NetworkWeights.shapes(config).items():
        count = math.prod(shape)
        tensors[name] = np.frombuffer(r.raw(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint tensors")
    return config, NetworkWeights(tensors)


def save_checkpoint(path: str | Path, config: NetworkConfig, weights: NetworkWeights) -> None:
    Path(path).write_bytes(encode_checkpoint(config, weights))


def load_checkpoint(path: str | Path) -> tuple[NetworkConfig, NetworkWeights]:
    return decode_checkpoint(Path(path).read_bytes())

