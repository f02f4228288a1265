"""Encoder-decoder depth regressor and the parameter-vector algebra around it."""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Union

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor


class AlignmentError(ValueError):
    """Two parameter vectors do not share names, order and shapes."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    input_size: tuple = (64, 64)
    encoder_channels: tuple = (8, 16, 32, 64)
    decoder_channels: tuple = (32, 16, 8)
    d_max: float = 10.0
    convs_per_stage: int = 1
    dtype: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if len(self.decoder_channels) != len(self.encoder_channels) - 1:
            raise ValueError("need one decoder block per stride-2 encoder stage")
        stride = 2 ** (len(self.encoder_channels) - 1)
        if any(s % stride for s in self.input_size):
            raise ValueError(f"input size {self.input_size} not divisible by encoder stride {stride}")
        if self.dtype not in dc.DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def bottleneck_channels(self) -> int:
        return self.encoder_channels[-1]

    @property
    def np_dtype(self):
        return dc.DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchConfig":
        return cls(**d)


DESK = ArchConfig()
FULL = ArchConfig(
    input_size=(256, 256),
    encoder_channels=(16, 32, 64, 128, 256, 512),
    decoder_channels=(256, 128, 64, 32, 16),
)


class ParamVector:
    """Ordered, named parameter arrays. Treated as an immutable value."""

    def __init__(self, params: Mapping[str, np.ndarray]):
        self._p = OrderedDict()
        for name, arr in params.items():
            a = np.array(arr, copy=True)
            a.flags.writeable = False
            self._p[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self._p[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._p)

    def __len__(self) -> int:
        return len(self._p)

    def items(self):
        return self._p.items()

    def names(self) -> list:
        return list(self._p)

    @property
    def total_len(self) -> int:
        return sum(a.size for a in self._p.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._p.values()])

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParamVector":
        return ParamVector(OrderedDict((n, fn(n, a)) for n, a in self._p.items()))

    def as_tensors(self, requires_grad: bool = False) -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, Tensor(a, requires_grad=requires_grad)) for n, a in self._p.items())

    def check_aligned(self, other: "ParamVector") -> None:
        if list(self._p) != list(other._p):
            raise AlignmentError("parameter names or order differ")
        for n, a in self._p.items():
            b = other._p[n]
            if a.shape != b.shape or a.dtype != b.dtype:
                raise AlignmentError(f"parameter {n!r}: {a.shape}/{a.dtype} vs {b.shape}/{b.dtype}")

    def equals(self, other: "ParamVector") -> bool:
        """Bit-exact comparison."""
        try:
            self.check_aligned(other)
        except AlignmentError:
            return False
        return all(a.tobytes() == other._p[n].tobytes() for n, a in self._p.items())

    def max_abs_diff(self, other: "ParamVector") -> float:
        self.check_aligned(other)
        return max(float(np.max(np.abs(a.astype(np.float64) - other._p[n]))) for n, a in self._p.items())

    def astype(self, dtype) -> "ParamVector":
        return self.map(lambda _, a: a.astype(dtype))

    def __repr__(self) -> str:
        return f"ParamVector({len(self)} tensors, {self.total_len} values)"


def _conv_names(cfg: ArchConfig) -> list:
    """(name, out, in) for every 3x3 convolution in build order."""
    layers = []
    cin = 3
    for s, ch in enumerate(cfg.encoder_channels):
        for r in range(cfg.convs_per_stage):
            layers.append((f"enc{s}.{r}", ch, cin))
            cin = ch
    skips = list(cfg.encoder_channels[:-1])
    for i, ch in enumerate(cfg.decoder_channels):
        layers.append((f"dec{i}", ch, cin))
        cin = ch + skips[-(i + 1)]
    layers.append(("head", 1, cin))
    return layers


def init_params(cfg: ArchConfig, seed: int) -> ParamVector:
    """He-normal kernels (std sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, cout, cin in _conv_names(cfg):
        fan_in = cin * 9
        params[f"{name}.w"] = (rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(cfg.np_dtype)
        params[f"{name}.b"] = np.zeros(cout, dtype=cfg.np_dtype)
    return ParamVector(params)


def zeros_like(theta: ParamVector) -> ParamVector:
    return theta.map(lambda _, a: np.zeros_like(a))


@dataclass
class Bottleneck:
    features: Tensor
    skip_features: list = field(default_factory=list)


ParamsLike = Union[ParamVector, Mapping[str, Tensor]]


def _tensors(theta: ParamsLike) -> Mapping[str, Tensor]:
    if isinstance(theta, ParamVector):
        return theta.as_tensors(False)
    return theta


def encode(images, theta: ParamsLike, cfg: ArchConfig) -> Bottleneck:
    """Run the encoder; returns the bottleneck plus the skip features (shallow first)."""
    p = _tensors(theta)
    x = dc.as_tensor(images, dtype=cfg.np_dtype)
    if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != cfg.input_size:
        raise DimensionError(f"expected images of shape (N, 3, {cfg.input_size[0]}, {cfg.input_size[1]}), got {x.shape}")
    if x.dtype != cfg.np_dtype:
        x = Tensor(x.data.astype(cfg.np_dtype))
    x = dc.add(x, -0.5)
    skips = []
    for s, _ in enumerate(cfg.encoder_channels):
        for r in range(cfg.convs_per_stage):
            stride = 2 if (s > 0 and r == 0) else 1
            x = dc.elu(dc.conv2d(x, p[f"enc{s}.{r}.w"], p[f"enc{s}.{r}.b"], stride=stride, padding=1))
        skips.append(x)
    return Bottleneck(features=skips[-1], skip_features=skips[:-1])


def decode(phi: Bottleneck, theta: ParamsLike, cfg: ArchConfig) -> Tensor:
    """Decoder head: per block conv + ELU + 2x upsampling, then skip concatenation."""
    p = _tensors(theta)
    x = phi.features
    if x.shape[1] != cfg.bottleneck_channels or len(phi.skip_features) != len(cfg.decoder_channels):
        raise DimensionError(
            f"bottleneck has {x.shape[1]} channels / {len(phi.skip_features)} skips; "
            f"config wants {cfg.bottleneck_channels} / {len(cfg.decoder_channels)}"
        )
    for i, _ in enumerate(cfg.decoder_channels):
        x = dc.elu(dc.conv2d(x, p[f"dec{i}.w"], p[f"dec{i}.b"], padding=1))
        x = dc.upsample2x(x)
        x = dc.concat_channels(x, phi.skip_features[-(i + 1)])
    logits = dc.conv2d(x, p["head.w"], p["head.b"], padding=1)
    return dc.mul(dc.sigmoid(logits), cfg.d_max)


def forward(images, theta: ParamsLike, cfg: ArchConfig) -> Tensor:
    return decode(encode(images, theta, cfg), theta, cfg)


def predict(images: np.ndarray, theta: ParamVector, cfg: ArchConfig, batch_size: int = 32) -> np.ndarray:
    """Tape-free inference in batches."""
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(forward(images[i:i + batch_size], theta, cfg).data)
    return np.concatenate(outs, axis=0)


def value_and_grad(theta: ParamVector, loss_fn: Callable[[Mapping[str, Tensor]], Tensor]):
    """Evaluate ``loss_fn`` on leaf copies of ``theta`` and return (loss, grads)."""
    dc.reset_tape()
    leaves = theta.as_tensors(requires_grad=True)
    # overflow surfaces as a non-finite loss, which callers treat as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        loss = loss_fn(leaves)
        dc.backward(loss)
    grads = OrderedDict()
    for n, t in leaves.items():
        grads[n] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return float(loss.data), ParamVector(grads)


def axpy_interpolate(theta_a: ParamVector, theta_b: ParamVector, beta: float) -> ParamVector:
    """``theta_a - beta * (theta_a - theta_b)``, exact at beta 0 and 1."""
    theta_a.check_aligned(theta_b)
    if beta == 0:
        return ParamVector(theta_a._p)
    if beta == 1:
        return ParamVector(theta_b._p)
    return ParamVector(OrderedDict(
        (n, ((1 - beta) * a + beta * theta_b[n]).astype(a.dtype)) for n, a in theta_a.items()
    ))


def sgd_step(theta: ParamVector, grads: ParamVector, lr: float, weight_decay: float = 0.0) -> ParamVector:
    """One SGD step with coupled L2 decay: ``theta - lr * (grad + wd * theta)``."""
    if grads is None:
        raise ValueError("sgd_step called without gradients")
    theta.check_aligned(grads)
    if weight_decay:
        return ParamVector(OrderedDict(
            (n, (a - lr * (grads[n] + weight_decay * a)).astype(a.dtype)) for n, a in theta.items()
        ))
    return ParamVector(OrderedDict((n, (a - lr * grads[n]).astype(a.dtype)) for n, a in theta.items()))


# ---------------------------------------------------------------------------
# checkpoint I/O

MAGIC = b"MDPT"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_params(theta: ParamVector, path) -> None:
    """Write ``MDPT`` | u32 version | per tensor: u32 name len, name, u8 dtype, u32 rank, u32 extents, LE data."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    for name, arr in theta.items():
        raw = name.encode("utf-8")
        dt = arr.dtype.newbyteorder("<")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<BI", _DTYPE_TAGS[dt], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=dt).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path) -> ParamVector:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8
    params = OrderedDict()
    try:
        while off < len(data):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BI", data, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape)) * dt.itemsize
            if off + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r} at byte {off}")
            params[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
            off += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed record at byte {off}") from exc
    return ParamVector(params)
