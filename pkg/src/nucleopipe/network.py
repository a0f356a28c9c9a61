"""Deterministic numpy forward pass of the three-head attention encoder-decoder.

Layer-path grammar (every tensor of a :class:`WeightBundle`)::

    enc/<s>/res/<conv>/{kernel,bias}          s = 0..stages-1
    enc/<s>/res/<bn>/{gamma,beta,mean,var}
    bottleneck/res/...                        same block layout as enc/<s>/res
    dec/<head>/<k>/att/cha/<c>/{kernel,bias}  k = 0..stages-1 (deepest first)
    dec/<head>/<k>/att/spa/<p>/{kernel,bias}
    dec/<head>/<k>/up/{kernel,bias}
    out/<head>/{kernel,bias}

with ``<conv>`` in ``conv1, conv2, fuse``, ``<bn>`` in ``bn1, bn2``,
``<c>`` in ``enc_avg, enc_max, dec_avg, dec_max, fuse, expand``, ``<p>`` in
``enc, dec, fuse`` and ``<head>`` in ``semantic, edge, class``.

Kernels are stored ``(kh, kw, c_in, c_out)``; activations are ``(H, W, C)``
float32. Encoder stage ``s`` runs a ResNet block at ``F * 2**s`` filters and
then 2x2 max-pools; the bottleneck block doubles once more. Decoder stage
``k`` gates the pooled encoder output of stage ``stages-1-k`` with channel and
spatial attention, concatenates the gated features with the decoder stream and
upsamples both with a 2x2 stride-2 transposed convolution (+ ReLU) to the
gated width, so the widths halve stage by stage down to ``F``.
"""

from __future__ import annotations

import struct
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .maps import (
    BadMagicError,
    DimensionOverflowError,
    HeaderError,
    MapValidationError,
    PathLike,
    TruncatedPayloadError,
    validate_rgb,
)

HEADS = ("semantic", "edge", "class")
BN_EPS = 1e-5
REFERENCE_PARAM_COUNT = 2_740_000


class WeightError(ValueError):
    """A weight bundle does not fit the network configuration."""


@dataclass(frozen=True)
class NetworkConfig:
    base_filters: int = 16
    stages: int = 4
    class_channels: int = 6
    input_size: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if self.base_filters <= 0 or self.base_filters % 8:
            raise ValueError(f"base_filters must be a positive multiple of 8, got {self.base_filters}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.class_channels < 2:
            raise ValueError("class_channels must be >= 2")
        step = 2**self.stages
        if any(n <= 0 or n % step for n in self.input_size):
            raise ValueError(f"input size {self.input_size} must be divisible by {step}")

    def width(self, stage: int) -> int:
        return self.base_filters * 2**stage


class WeightBundle(Mapping):
    """Immutable mapping from layer path to float32 tensor."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        frozen = {}
        for path, value in tensors.items():
            arr = np.array(value, dtype=np.float32)
            arr.setflags(write=False)
            frozen[path] = arr
        self._tensors = frozen

    def __getitem__(self, path: str) -> np.ndarray:
        return self._tensors[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"WeightBundle({len(self)} tensors, {self.size} values)"

    @property
    def size(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def equals(self, other: Mapping[str, np.ndarray]) -> bool:
        """Bit-exact comparison of paths, shapes and values."""
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == np.asarray(other[k], np.float32).tobytes()
            for k in self
        )


# --------------------------------------------------------------------------
# layer inventory


def _conv_shapes(prefix: str, k: int, c_in: int, c_out: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}/kernel": (k, k, c_in, c_out), f"{prefix}/bias": (c_out,)}


def _bn_shapes(prefix: str, c: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}/{name}": (c,) for name in ("gamma", "beta", "mean", "var")}


def resnet_shapes(prefix: str, c_in: int, filters: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    shapes.update(_conv_shapes(f"{prefix}/conv1", 1, c_in, filters))
    shapes.update(_conv_shapes(f"{prefix}/conv2", 3, filters, filters))
    shapes.update(_bn_shapes(f"{prefix}/bn1", filters))
    shapes.update(_conv_shapes(f"{prefix}/fuse", 3, 2 * filters, filters))
    shapes.update(_bn_shapes(f"{prefix}/bn2", filters))
    return shapes


def attention_shapes(prefix: str, enc_channels: int, dec_channels: int) -> dict[str, tuple[int, ...]]:
    r = enc_channels // 8
    shapes = {}
    shapes.update(_conv_shapes(f"{prefix}/cha/enc_avg", 1, enc_channels, r))
    shapes.update(_conv_shapes(f"{prefix}/cha/enc_max", 1, enc_channels, r))
    shapes.update(_conv_shapes(f"{prefix}/cha/dec_avg", 1, dec_channels, r))
    shapes.update(_conv_shapes(f"{prefix}/cha/dec_max", 1, dec_channels, r))
    shapes.update(_conv_shapes(f"{prefix}/cha/fuse", 1, 4 * r, r))
    shapes.update(_conv_shapes(f"{prefix}/cha/expand", 1, r, enc_channels))
    shapes.update(_conv_shapes(f"{prefix}/spa/enc", 1, 1, 1))
    shapes.update(_conv_shapes(f"{prefix}/spa/dec", 1, 1, 1))
    shapes.update(_conv_shapes(f"{prefix}/spa/fuse", 1, 2, 1))
    return shapes


def layer_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Canonical ordered inventory of every tensor the forward pass reads."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 3
    for s in range(cfg.stages):
        shapes.update(resnet_shapes(f"enc/{s}/res", c_in, cfg.width(s)))
        c_in = cfg.width(s)
    shapes.update(resnet_shapes("bottleneck/res", c_in, cfg.width(cfg.stages)))
    for head in HEADS:
        dec = cfg.width(cfg.stages)
        for k in range(cfg.stages):
            enc = cfg.width(cfg.stages - 1 - k)
            prefix = f"dec/{head}/{k}"
            shapes.update(attention_shapes(f"{prefix}/att", enc, dec))
            shapes.update(_conv_shapes(f"{prefix}/up", 2, enc + dec, enc))
            dec = enc
        out_channels = cfg.class_channels if head == "class" else 1
        shapes.update(_conv_shapes(f"out/{head}", 1, dec, out_channels))
    return shapes


def param_count(cfg: NetworkConfig) -> int:
    return sum(int(np.prod(shape)) for shape in layer_shapes(cfg).values())


def check_weights(weights: Mapping[str, np.ndarray], cfg: NetworkConfig) -> None:
    """Raise :class:`WeightError` naming the first missing, misshapen or extra path."""
    shapes = layer_shapes(cfg)
    for path, shape in shapes.items():
        if path not in weights:
            raise WeightError(f"missing layer path {path}")
        if tuple(weights[path].shape) != shape:
            raise WeightError(f"{path}: expected shape {shape}, got {tuple(weights[path].shape)}")
    extra = [p for p in weights if p not in shapes]
    if extra:
        raise WeightError(f"unexpected layer path {extra[0]}")


def init_weights(cfg: NetworkConfig, seed: int = 0) -> WeightBundle:
    """He-normal kernels from ``numpy.random.default_rng(seed)`` (PCG64).

    Kernels are drawn in canonical path order with std ``sqrt(2 / fan_in)``,
    ``fan_in = kh * kw * c_in``; biases and BN shifts/means are zero, BN
    scales and variances one.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for path, shape in layer_shapes(cfg).items():
        leaf = path.rsplit("/", 1)[1]
        if leaf == "kernel":
            fan_in = shape[0] * shape[1] * shape[2]
            tensors[path] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif leaf in ("gamma", "var"):
            tensors[path] = np.ones(shape)
        else:
            tensors[path] = np.zeros(shape)
    return WeightBundle(tensors)


def zero_weights(cfg: NetworkConfig) -> WeightBundle:
    return WeightBundle({p: np.zeros(s) for p, s in layer_shapes(cfg).items()})


# --------------------------------------------------------------------------
# primitive ops


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, dtype=np.float32)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float32)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return (z / z.sum(axis=-1, keepdims=True)).astype(np.float32)


def _param(weights: Mapping[str, np.ndarray], path: str) -> np.ndarray:
    try:
        return weights[path]
    except KeyError:
        raise WeightError(f"missing layer path {path}") from None


def conv2d(x: np.ndarray, weights: Mapping[str, np.ndarray], prefix: str) -> np.ndarray:
    """Stride-1 convolution with zero 'same' padding (odd square kernels)."""
    kernel = _param(weights, f"{prefix}/kernel")
    bias = _param(weights, f"{prefix}/bias")
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise WeightError(f"{prefix}: kernel expects {c_in} input channels, got {x.shape[-1]}")
    h, w = x.shape[:2]
    if kh == kw == 1:
        out = x @ kernel[0, 0]
    else:
        ph, pw = kh // 2, kw // 2
        padded = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
        out = np.zeros((h, w, c_out), dtype=np.float32)
        for dy in range(kh):
            for dx in range(kw):
                out += padded[dy : dy + h, dx : dx + w] @ kernel[dy, dx]
    return (out + bias).astype(np.float32)


def conv_transpose2x2(x: np.ndarray, weights: Mapping[str, np.ndarray], prefix: str) -> np.ndarray:
    """Kernel 2, stride 2 transposed convolution: exact 2x upsampling, no crop."""
    kernel = _param(weights, f"{prefix}/kernel")
    bias = _param(weights, f"{prefix}/bias")
    if kernel.shape[:2] != (2, 2) or x.shape[-1] != kernel.shape[2]:
        raise WeightError(f"{prefix}: kernel {kernel.shape} does not fit input with {x.shape[-1]} channels")
    h, w = x.shape[:2]
    c_out = kernel.shape[3]
    out = np.empty((h, 2, w, 2, c_out), dtype=np.float32)
    for a in range(2):
        for b in range(2):
            out[:, a, :, b, :] = x @ kernel[a, b]
    return (out.reshape(2 * h, 2 * w, c_out) + bias).astype(np.float32)


def batch_norm(x: np.ndarray, weights: Mapping[str, np.ndarray], prefix: str) -> np.ndarray:
    gamma = _param(weights, f"{prefix}/gamma")
    beta = _param(weights, f"{prefix}/beta")
    mean = _param(weights, f"{prefix}/mean")
    var = _param(weights, f"{prefix}/var")
    if gamma.shape[0] != x.shape[-1]:
        raise WeightError(f"{prefix}: batch norm over {gamma.shape[0]} channels, input has {x.shape[-1]}")
    scale = gamma / np.sqrt(var + np.float32(BN_EPS))
    return ((x - mean) * scale + beta).astype(np.float32)


def max_pool2x2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


# --------------------------------------------------------------------------
# blocks


def resnet_block(x: np.ndarray, weights: Mapping[str, np.ndarray], prefix: str) -> np.ndarray:
    """ResNet block: 1x1 conv + ReLU, 3x3 conv + ReLU + BN, then a fused
    3x3 conv + ReLU + BN over the concatenation of both intermediates.
    Output has the block's filter count and the input's spatial size."""
    t0 = _relu(conv2d(x, weights, f"{prefix}/conv1"))
    t1 = batch_norm(_relu(conv2d(t0, weights, f"{prefix}/conv2")), weights, f"{prefix}/bn1")
    fused = np.concatenate([t0, t1], axis=-1)
    return batch_norm(_relu(conv2d(fused, weights, f"{prefix}/fuse")), weights, f"{prefix}/bn2")


def _check_pair(f_enc: np.ndarray, f_dec: np.ndarray) -> None:
    if f_enc.shape[:2] != f_dec.shape[:2]:
        raise WeightError(f"encoder {f_enc.shape[:2]} and decoder {f_dec.shape[:2]} features differ in size")


def channel_attention(
    f_enc: np.ndarray, f_dec: np.ndarray, weights: Mapping[str, np.ndarray], prefix: str
) -> np.ndarray:
    """Channel gate of shape (1, 1, C_enc) with values in (0, 1)."""
    _check_pair(f_enc, f_dec)

    def descriptors(f: np.ndarray, side: str) -> np.ndarray:
        avg = f.mean(axis=(0, 1), keepdims=True, dtype=np.float32)
        mx = f.max(axis=(0, 1), keepdims=True)
        return np.concatenate(
            [_relu(conv2d(avg, weights, f"{prefix}/{side}_avg")), _relu(conv2d(mx, weights, f"{prefix}/{side}_max"))],
            axis=-1,
        )

    i_desc = descriptors(f_enc, "enc")
    j_desc = descriptors(f_dec, "dec")
    hidden = _relu(conv2d(np.concatenate([i_desc, j_desc], axis=-1), weights, f"{prefix}/fuse"))
    gate = _sigmoid(conv2d(hidden, weights, f"{prefix}/expand"))
    if gate.shape[-1] != f_enc.shape[-1]:
        raise WeightError(f"{prefix}: gate has {gate.shape[-1]} channels, encoder features {f_enc.shape[-1]}")
    return gate


def _channel_pool(f: np.ndarray) -> np.ndarray:
    # average over channels; the following max over a single channel is the identity
    return f.mean(axis=-1, keepdims=True, dtype=np.float32)


def spatial_attention(
    f_enc: np.ndarray, f_dec: np.ndarray, weights: Mapping[str, np.ndarray], prefix: str
) -> np.ndarray:
    """Spatial gate of shape (H, W, 1) with values in (0, 1)."""
    _check_pair(f_enc, f_dec)
    k = _relu(conv2d(_channel_pool(f_enc), weights, f"{prefix}/enc"))
    l = _relu(conv2d(_channel_pool(f_dec), weights, f"{prefix}/dec"))
    return _sigmoid(conv2d(np.concatenate([k, l], axis=-1), weights, f"{prefix}/fuse"))


def attention_fuse(f_enc: np.ndarray, a_cha: np.ndarray, a_spa: np.ndarray) -> np.ndarray:
    """Refined features: encoder features times both gates, broadcast."""
    try:
        out = f_enc * a_cha * a_spa
    except ValueError as exc:
        raise WeightError(f"attention gates do not broadcast over {f_enc.shape}: {exc}") from None
    if out.shape != f_enc.shape:
        raise WeightError(f"attention gates {a_cha.shape}, {a_spa.shape} change feature shape {f_enc.shape}")
    return out.astype(np.float32)


def decoder_stage(
    f_enc: np.ndarray, f_dec: np.ndarray, weights: Mapping[str, np.ndarray], prefix: str
) -> np.ndarray:
    a_cha = channel_attention(f_enc, f_dec, weights, f"{prefix}/att/cha")
    a_spa = spatial_attention(f_enc, f_dec, weights, f"{prefix}/att/spa")
    refined = attention_fuse(f_enc, a_cha, a_spa)
    return _relu(conv_transpose2x2(np.concatenate([refined, f_dec], axis=-1), weights, f"{prefix}/up"))


@dataclass(frozen=True)
class NetworkOutput:
    semantic: np.ndarray
    edges: np.ndarray
    classes: np.ndarray

    def __iter__(self):
        return iter((self.semantic, self.edges, self.classes))


def forward(image: np.ndarray, weights: Mapping[str, np.ndarray], cfg: NetworkConfig) -> NetworkOutput:
    """Run the three-head network on one uint8 RGB tile (scaled to [0, 1]).

    Returns semantic and edge probability maps ``(H, W)`` and a class
    probability map ``(H, W, C)``.
    """
    validate_rgb(image)
    if image.shape[:2] != tuple(cfg.input_size):
        raise MapValidationError(f"image is {image.shape[:2]}, network expects {cfg.input_size}")
    check_weights(weights, cfg)

    x = image.astype(np.float32) / np.float32(255.0)
    skips = []
    for s in range(cfg.stages):
        x = max_pool2x2(resnet_block(x, weights, f"enc/{s}/res"))
        skips.append(x)
    bottleneck = resnet_block(x, weights, "bottleneck/res")

    maps = {}
    for head in HEADS:
        d = bottleneck
        for k in range(cfg.stages):
            d = decoder_stage(skips[cfg.stages - 1 - k], d, weights, f"dec/{head}/{k}")
        logits = conv2d(d, weights, f"out/{head}")
        maps[head] = _softmax(logits) if head == "class" else _sigmoid(logits)[:, :, 0]
    return NetworkOutput(maps["semantic"], maps["edge"], maps["class"])


# --------------------------------------------------------------------------
# WBDL container

WBDL_MAGIC = b"WBDL"


def write_weights(path: PathLike, weights: Mapping[str, np.ndarray]) -> None:
    chunks = [WBDL_MAGIC, struct.pack("<I", len(weights))]
    for name, tensor in weights.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(tensor, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weights(path: PathLike) -> WeightBundle:
    data = Path(path).read_bytes()
    if data[:4] != WBDL_MAGIC:
        raise BadMagicError(f"expected magic {WBDL_MAGIC!r}, got {data[:4]!r}")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedPayloadError(f"file ends inside {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "entry count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "path length"))
        try:
            name = take(name_len, "path").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise HeaderError(f"layer path is not UTF-8: {exc}") from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if size > 1 << 31:
            raise DimensionOverflowError(f"{name}: {dims} is too large")
        if name in tensors:
            raise HeaderError(f"duplicate layer path {name}")
        payload = take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if pos != len(data):
        raise HeaderError(f"{len(data) - pos} trailing bytes after last entry")
    return WeightBundle(tensors)
