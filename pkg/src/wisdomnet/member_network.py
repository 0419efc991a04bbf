"""The member CNN shared by every network in both ensemble layers.

Layer stack (channels-last, same-padded convolutions)::

    Conv7x7/64 -> ReLU -> MaxPool2 -> Conv3x3/64 -> ReLU -> MaxPool2
    -> Conv3x3/64 -> ReLU -> Flatten -> Dense64 -> ReLU -> Dense32 -> ReLU
    -> Dense2 -> softmax

Output index 0 is the class with label 0 and index 1 the class with label 1.
For the COVID layer that is ``[positive, negative]``; for the ARDS layer it is
``[non-ARDS, ARDS]``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wisdomnet import tensor_core as tc
from wisdomnet._io import atomic_write_bytes
from wisdomnet.errors import DimensionError, VersionMismatchError, WeightFormatError

CONV_LAYERS = (("conv1", 7, 64), ("conv2", 3, 64), ("conv3", 3, 64))
DENSE_LAYERS = (("dense1", 64), ("dense2", 32), ("dense3", 2))
POOL_SIZE = 2
DEFAULT_INPUT_SIDE = 256
IN_CHANNELS = 3

ARCHITECTURE = (
    ("conv", 7, 64), ("maxpool", 2, 64), ("conv", 3, 64), ("maxpool", 2, 64),
    ("conv", 3, 64), ("flatten",), ("dense", 64), ("dense", 32), ("dense", 2),
)

WEIGHT_MAGIC = b"WSDN"
WEIGHT_VERSION = 1
_HEADER = struct.Struct("<4sBIqI")  # magic, version, input_side, seed, n_params


@dataclass(frozen=True)
class ProbabilityPair:
    """Two-class softmax output; ``p_class0 + p_class1 == 1`` within 1e-6."""

    p_class0: float
    p_class1: float

    def __post_init__(self):
        for p in (self.p_class0, self.p_class1):
            if not (-1e-9 <= p <= 1 + 1e-9):
                raise ValueError(f"probability {p!r} outside [0, 1]")
        if abs(self.p_class0 + self.p_class1 - 1.0) > 1e-6:
            raise ValueError(f"probabilities {self.p_class0!r}, {self.p_class1!r} do not sum to 1")

    @classmethod
    def from_array(cls, arr) -> "ProbabilityPair":
        a = np.asarray(arr, dtype=np.float64).reshape(2)
        return cls(float(a[0]), float(a[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.p_class0, self.p_class1], dtype=np.float64)

    # COVID layer naming
    @property
    def p_positive(self) -> float:
        return self.p_class0

    @property
    def p_negative(self) -> float:
        return self.p_class1

    # ARDS layer naming
    @property
    def p_non_ards(self) -> float:
        return self.p_class0

    @property
    def p_ards(self) -> float:
        return self.p_class1


def flatten_length(input_side: int) -> int:
    return (input_side // 4) ** 2 * CONV_LAYERS[-1][2]


def parameter_shapes(input_side: int) -> dict[str, tuple[int, ...]]:
    """Ordered mapping of parameter name to shape for a given input side."""
    _check_input_side(input_side)
    shapes: dict[str, tuple[int, ...]] = {}
    channels = IN_CHANNELS
    for name, k, n in CONV_LAYERS:
        shapes[f"{name}.kernels"] = (k, k, channels, n)
        shapes[f"{name}.bias"] = (n,)
        channels = n
    width = flatten_length(input_side)
    for name, n in DENSE_LAYERS:
        shapes[f"{name}.weights"] = (width, n)
        shapes[f"{name}.bias"] = (n,)
        width = n
    return shapes


def parameter_count(input_side: int) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(input_side).values())


def _check_input_side(input_side) -> None:
    if not isinstance(input_side, (int, np.integer)) or input_side < 8 or input_side % 4:
        raise ValueError(f"input_side must be a multiple of 4 and >= 8, got {input_side!r}")


class MemberNetwork:
    """One member CNN: its parameters, seed identity and input size."""

    architecture = ARCHITECTURE

    def __init__(self, seed: int, input_side: int, params: dict[str, tc.Tensor]):
        _check_input_side(input_side)
        expected = parameter_shapes(input_side)
        if list(params) != list(expected):
            raise DimensionError(f"parameter names {list(params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.seed = int(seed)
        self.input_side = int(input_side)
        self.params = params
        self.evaluations = 0

    def __repr__(self):
        return f"MemberNetwork(seed={self.seed}, input_side={self.input_side})"

    @property
    def dtype(self) -> np.dtype:
        return self.params["conv1.kernels"].dtype

    def fingerprint(self) -> tuple:
        return self.architecture

    def parameters(self) -> list[tc.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "MemberNetwork":
        return MemberNetwork(self.seed, self.input_side,
                             {k: v.copy() for k, v in self.params.items()})

    def _conv(self, name: str) -> tc.ConvParams:
        return tc.ConvParams(self.params[f"{name}.kernels"].data, self.params[f"{name}.bias"].data)

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        side = self.input_side
        if images.ndim != 4 or images.shape[1:] != (side, side, IN_CHANNELS):
            raise DimensionError(
                f"expected images of shape {side}x{side}x{IN_CHANNELS}, got {images.shape}"
            )
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        return images.astype(self.dtype, copy=False)

    def forward_batch(self, images: np.ndarray, keep_cache: bool = False):
        """Run a batch ``N x side x side x 3`` through the stack.

        Returns ``N x 2`` softmax probabilities, plus the activation cache
        needed by :meth:`backward` when ``keep_cache`` is set.
        """
        x = self._check_images(images)
        cache = []
        for i, (name, k, _) in enumerate(CONV_LAYERS):
            params = self._conv(name)
            cols = tc.im2col(x, k)
            z = tc.conv2d_forward(x, params, cols=cols)
            a = tc.relu(z)
            cache.append(("conv", name, x, cols, z))
            x = a
            if i < len(CONV_LAYERS) - 1:
                x, index = tc.maxpool2d_forward(x, POOL_SIZE)
                cache.append(("pool", index))
        conv_shape = x.shape
        x = x.reshape(x.shape[0], -1)
        cache.append(("flatten", conv_shape))
        for i, (name, _) in enumerate(DENSE_LAYERS):
            z = tc.dense_forward(x, self.params[f"{name}.weights"].data, self.params[f"{name}.bias"].data)
            cache.append(("dense", name, x, z))
            x = tc.relu(z) if i < len(DENSE_LAYERS) - 1 else tc.softmax(z)
        if keep_cache:
            return x, cache
        return x

    def backward(self, cache, one_hot: np.ndarray, probs: np.ndarray) -> float:
        """Accumulate loss gradients into every parameter; return the loss."""
        loss = tc.cross_entropy_loss(one_hot, probs)
        g = tc.softmax_cross_entropy_backward(one_hot, probs)
        last_dense = True
        for entry in reversed(cache):
            kind = entry[0]
            if kind == "dense":
                _, name, x, z = entry
                if not last_dense:
                    g = tc.relu_backward(z, g)
                last_dense = False
                w = self.params[f"{name}.weights"]
                g, gw, gb = tc.dense_backward(x, w.data, g)
                w.accumulate(gw)
                self.params[f"{name}.bias"].accumulate(gb)
            elif kind == "flatten":
                g = g.reshape(entry[1])
            elif kind == "pool":
                g = tc.maxpool2d_backward(entry[1], g)
            else:
                _, name, x, cols, z = entry
                g = tc.relu_backward(z, g)
                g, gk, gb = tc.conv2d_backward(x, self._conv(name), g, cols=cols)
                self.params[f"{name}.kernels"].accumulate(gk)
                self.params[f"{name}.bias"].accumulate(gb)
        return loss

    def predict(self, image: np.ndarray) -> ProbabilityPair:
        """Probability pair for one image; counted in ``self.evaluations``."""
        out = ProbabilityPair.from_array(self.forward_batch(image)[0])
        self.evaluations += 1
        return out


def build_member(seed: int, input_side: int = DEFAULT_INPUT_SIDE) -> MemberNetwork:
    """He-initialised member network; identical seeds give identical weights."""
    _check_input_side(input_side)
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    rng = np.random.default_rng(seed)
    dtype = tc.get_default_dtype()
    params = {}
    for name, shape in parameter_shapes(input_side).items():
        if name.endswith(".bias"):
            params[name] = tc.Tensor(np.zeros(shape), dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            params[name] = tc.Tensor(w, dtype=dtype)
    return MemberNetwork(seed, input_side, params)


def forward(net: MemberNetwork, image: np.ndarray) -> ProbabilityPair:
    """Probability pair for a single ``side x side x 3`` image."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"expected a single H x W x 3 image, got shape {image.shape}")
    return net.predict(image)


def _encode(net: MemberNetwork) -> bytes:
    chunks = [_HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, net.input_side, net.seed, len(net.params))]
    for name, tensor in net.params.items():
        raw_name = name.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", tensor.data.ndim))
        chunks.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
        chunks.append(struct.pack("<Q", len(data)) + data)
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def save_weights(net: MemberNetwork, path) -> Path:
    """Write ``net`` to ``path`` atomically in the versioned little-endian format.

    Layout: magic ``WSDN``, u8 version, u32 input_side, i64 seed, u32 count,
    then per parameter a u16-prefixed name, u8 ndim, u32 dims and a
    u64-prefixed float32 buffer, followed by a CRC32 of everything before it.
    """
    path = Path(path)
    atomic_write_bytes(path, _encode(net))
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"{self.path}: truncated at byte {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_weights(path) -> MemberNetwork:
    """Read a weight file written by :func:`save_weights`.

    Raises :class:`WeightFormatError` (or :class:`VersionMismatchError`) on any
    defect; nothing is returned unless the whole file checks out.
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFormatError(f"{path}: {exc.strerror or exc}") from exc
    r = _Reader(buf, path)
    magic, version, input_side, seed, count = r.unpack(_HEADER.format)
    if magic != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: bad magic bytes {magic!r}")
    if version != WEIGHT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {WEIGHT_VERSION}")
    try:
        expected = parameter_shapes(input_side)
    except ValueError as exc:
        raise WeightFormatError(f"{path}: {exc}") from exc
    if count != len(expected):
        raise WeightFormatError(f"{path}: {count} parameters, expected {len(expected)}")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if name not in expected or tuple(shape) != expected[name]:
            raise WeightFormatError(f"{path}: unexpected parameter {name} with shape {shape}")
        if nbytes != 4 * int(np.prod(shape)):
            raise WeightFormatError(f"{path}: {name} buffer has {nbytes} bytes")
        arrays[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise WeightFormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    if zlib.crc32(buf[:body_end]) != crc:
        raise WeightFormatError(f"{path}: checksum mismatch")
    if list(arrays) != list(expected):
        raise WeightFormatError(f"{path}: parameters out of order")
    params = {name: tc.Tensor(arr, dtype=np.float32) for name, arr in arrays.items()}
    return MemberNetwork(seed, input_side, params)
