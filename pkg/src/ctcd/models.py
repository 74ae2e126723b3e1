"""Toy T-preserving encoders, the RKD adapter, and checkpoint files.

Two families stand in for convolutional and recurrent acoustic models:

* ``tdnn``: stacked same-padded 1D convolutions with ReLU;
* ``rnn``: stacked GRU layers, optionally bidirectional.

Both end in a per-frame linear projection onto the ``|Y'|`` output classes
and expose every hidden layer's output for representation matching.

Checkpoint byte layout (all integers unsigned 32-bit little-endian)::

    b"CTCDCKPT"                  magic, 8 bytes
    version                      currently 1
    header_len, header           UTF-8 JSON: {"spec": ..., "metadata": ...}
    n_arrays
    n_arrays times:
        name_len, name           UTF-8 parameter name
        ndim, dims[ndim]
        prod(dims) float64 values, little-endian, row-major
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ctcd.errors import (
    ConfigError,
    FormatError,
    NumericError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from ctcd.numcore import (
    DenseArray,
    Rng,
    add,
    concat,
    conv1d,
    matmul,
    mul,
    relu,
    sigmoid,
    slice_,
    tanh,
)

FAMILIES = ("tdnn", "rnn")
MAGIC = b"CTCDCKPT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    family: str
    input_dim: int
    layer_widths: tuple[int, ...]
    alphabet_size: int
    kernel_widths: tuple[int, ...] = ()
    bidirectional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "kernel_widths", tuple(int(k) for k in self.kernel_widths))
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not self.layer_widths:
            raise ConfigError("encoder needs at least one hidden layer")
        if any(w < 1 for w in self.layer_widths) or self.input_dim < 1:
            raise ConfigError("all widths must be >= 1")
        if self.alphabet_size < 2:
            raise ConfigError("alphabet_size counts the blank and must be >= 2")
        if self.family == "tdnn":
            if len(self.kernel_widths) != len(self.layer_widths):
                raise ConfigError("tdnn needs one kernel width per layer")
            if any(k < 1 or k % 2 == 0 for k in self.kernel_widths):
                raise ConfigError("kernel widths must be odd and >= 1")
        elif self.kernel_widths:
            raise ConfigError("kernel_widths only apply to tdnn")
        if self.family == "tdnn" and self.bidirectional:
            raise ConfigError("bidirectional only applies to rnn")

    @property
    def depth(self) -> int:
        return len(self.layer_widths)

    def hidden_dims(self) -> list[int]:
        mult = 2 if self.bidirectional else 1
        return [w * mult for w in self.layer_widths] if self.family == "rnn" else list(self.layer_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        d["kernel_widths"] = list(self.kernel_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(**d)


def parameter_shapes(spec: EncoderSpec) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    d_in = spec.input_dim
    for i, width in enumerate(spec.layer_widths):
        if spec.family == "tdnn":
            shapes[f"layer{i}.weight"] = (spec.kernel_widths[i], d_in, width)
            shapes[f"layer{i}.bias"] = (width,)
        else:
            for direction in ("fw", "bw") if spec.bidirectional else ("fw",):
                p = f"layer{i}.{direction}"
                shapes[f"{p}.w_x"] = (d_in, 3 * width)
                shapes[f"{p}.b_x"] = (3 * width,)
                shapes[f"{p}.u_zr"] = (width, 2 * width)
                shapes[f"{p}.u_h"] = (width, width)
        d_in = spec.hidden_dims()[i]
    shapes["output.weight"] = (d_in, spec.alphabet_size)
    shapes["output.bias"] = (spec.alphabet_size,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith("weight") and len(shape) == 3:
        return shape[0] * shape[1]
    return shape[0]


@dataclass
class EncoderOutput:
    logits: DenseArray
    hidden_layers: list[DenseArray]


class Encoder:
    def __init__(self, spec: EncoderSpec, params: dict[str, DenseArray]):
        expected = parameter_shapes(spec)
        if set(params) != set(expected):
            raise ShapeError(f"parameter names differ from spec: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.spec = spec
        self.params = {name: params[name] for name in expected}

    def parameters(self) -> list[DenseArray]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def freeze(self) -> "Encoder":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def forward(self, features) -> EncoderOutput:
        x = features if isinstance(features, DenseArray) else DenseArray(features)
        if x.ndim not in (2, 3) or x.shape[-1] != self.spec.input_dim:
            raise ConfigError(f"features {x.shape} do not match input_dim {self.spec.input_dim}")
        hidden = []
        for i in range(self.spec.depth):
            try:
                if self.spec.family == "tdnn":
                    x = self._tdnn_layer(i, x)
                else:
                    x = self._rnn_layer(i, x)
            except NumericError as exc:
                raise NumericError(f"layer {i}: {exc}") from None
            hidden.append(x)
        try:
            logits = add(matmul(x, self.params["output.weight"]), self.params["output.bias"])
        except NumericError as exc:
            raise NumericError(f"output layer: {exc}") from None
        return EncoderOutput(logits, hidden)

    __call__ = forward

    def _tdnn_layer(self, i: int, x: DenseArray) -> DenseArray:
        return relu(add(conv1d(x, self.params[f"layer{i}.weight"]), self.params[f"layer{i}.bias"]))

    def _rnn_layer(self, i: int, x: DenseArray) -> DenseArray:
        out = self._gru(f"layer{i}.fw", x, reverse=False)
        if self.spec.bidirectional:
            out = concat([out, self._gru(f"layer{i}.bw", x, reverse=True)], axis=-1)
        return out

    def _gru(self, prefix: str, x: DenseArray, reverse: bool) -> DenseArray:
        """z = s(Wz x + Uz h), r = s(Wr x + Ur h), h~ = tanh(Wh x + Uh (r*h)),
        h = (1 - z) * h_prev + z * h~."""
        p = self.params
        hid = p[f"{prefix}.u_h"].shape[0]
        time_axis = x.ndim - 2
        lead = (slice(None),) * time_axis
        proj = add(matmul(x, p[f"{prefix}.w_x"]), p[f"{prefix}.b_x"])
        if reverse:
            proj = slice_(proj, lead + (slice(None, None, -1),))
        h = DenseArray(np.zeros(proj.shape[:time_axis] + (1, hid)))
        outs = []
        for t in range(proj.shape[time_axis]):
            xt = slice_(proj, lead + (slice(t, t + 1),))
            hzr = matmul(h, p[f"{prefix}.u_zr"])
            z = sigmoid(add(slice_(xt, (..., slice(0, hid))), slice_(hzr, (..., slice(0, hid)))))
            r = sigmoid(add(slice_(xt, (..., slice(hid, 2 * hid))), slice_(hzr, (..., slice(hid, None)))))
            cand = tanh(add(slice_(xt, (..., slice(2 * hid, None))), matmul(mul(r, h), p[f"{prefix}.u_h"])))
            h = add(h, mul(z, add(cand, -h)))
            outs.append(h)
        out = concat(outs, axis=time_axis)
        if reverse:
            out = slice_(out, lead + (slice(None, None, -1),))
        return out


def build(spec: EncoderSpec, rng: Rng) -> Encoder:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            data = rng.uniform_array(shape, -bound, bound)
        params[name] = DenseArray(data, requires_grad=True)
    return Encoder(spec, params)


class Adapter:
    """Width-``K`` same-padded conv mapping student width D_s to teacher width D_t."""

    def __init__(self, weight: DenseArray, bias: DenseArray):
        if weight.ndim != 3 or bias.shape != (weight.shape[2],):
            raise ConfigError(f"adapter weight {weight.shape} / bias {bias.shape} inconsistent")
        self.weight, self.bias = weight, bias

    @classmethod
    def create(cls, d_stu: int, d_tea: int, rng: Rng, width: int = 3) -> "Adapter":
        bound = 1.0 / math.sqrt(width * d_stu)
        w = DenseArray(rng.uniform_array((width, d_stu, d_tea), -bound, bound), requires_grad=True)
        return cls(w, DenseArray(np.zeros(d_tea), requires_grad=True))

    @classmethod
    def identity(cls, dim: int, width: int = 3) -> "Adapter":
        w = np.zeros((width, dim, dim))
        w[width // 2] = np.eye(dim)
        return cls(DenseArray(w, requires_grad=True), DenseArray(np.zeros(dim), requires_grad=True))

    def parameters(self) -> list[DenseArray]:
        return [self.weight, self.bias]

    def __call__(self, w_stu: DenseArray) -> DenseArray:
        if w_stu.shape[-1] != self.weight.shape[1]:
            raise ConfigError(f"adapter expects {self.weight.shape[1]} channels, got {w_stu.shape[-1]}")
        return add(conv1d(w_stu, self.weight), self.bias)


# -- checkpoints --------------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: EncoderSpec
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.metadata == other.metadata
            and self.format_version == other.format_version
            and list(self.params) == list(other.params)
            and all(
                self.params[k].shape == other.params[k].shape
                and self.params[k].tobytes() == other.params[k].tobytes()
                for k in self.params
            )
        )

    @classmethod
    def from_encoder(cls, enc: Encoder, **metadata) -> "Checkpoint":
        return cls(enc.spec, {k: v.data.copy() for k, v in enc.params.items()}, dict(metadata))

    def to_encoder(self, trainable: bool = False) -> Encoder:
        params = {k: DenseArray(v.copy(), requires_grad=trainable) for k, v in self.params.items()}
        return Encoder(self.spec, params)


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"spec": ckpt.spec.to_dict(), "metadata": ckpt.metadata}, sort_keys=True).encode()
    out = [MAGIC, _u32(ckpt.format_version), _u32(len(header)), header, _u32(len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode()
        out += [_u32(len(raw)), raw, _u32(arr.ndim)] + [_u32(d) for d in arr.shape]
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(buf: bytes, spec: EncoderSpec | None = None) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    r.take(len(MAGIC), "magic")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(r.u32("header length"), "header").decode())
        stored_spec = EncoderSpec.from_dict(header["spec"])
        metadata = header["metadata"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    params = {}
    for _ in range(r.u32("array count")):
        name = r.take(r.u32("name length"), "name").decode()
        shape = tuple(r.u32(f"{name} dims") for _ in range(r.u32(f"{name} rank")))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * count, f"{name} data"), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    target = spec or stored_spec
    expected = parameter_shapes(target)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise ShapeError(f"checkpoint parameters do not match spec {target}")
    return Checkpoint(stored_spec, params, metadata, version)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load(path: str | os.PathLike, spec: EncoderSpec | None = None) -> Checkpoint:
    """Read a checkpoint; with ``spec`` given, stored shapes must match it."""
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), spec)
