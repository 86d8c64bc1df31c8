"""Minimal tensor/NN engine: forward pass, backprop, and SGD for a small
convolutional blocked/free classifier.

Tensors are plain ``numpy.ndarray`` values (float32, row-major, channels
last). All operations here are pure functions of their inputs; ``ModelParams``
values are frozen read-only arrays safe to share across threads.

Class convention: output index 0 is "free", index 1 is "blocked".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .seeds import seed_stream

BLOCKED_INDEX = 1
FREE_INDEX = 0

# Floor applied inside log() so cross-entropy stays finite.
LOG_FLOOR = 1e-12

MODEL_MAGIC = b"FLOA"
MODEL_VERSION = 1


class ArchError(ValueError):
    """Architecture descriptor is internally inconsistent."""


class ShapeMismatchError(ValueError):
    """Input tensor shape does not match the architecture."""


class ModelFormatError(ValueError):
    """Model byte stream violates the file format."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class HeaderMismatchError(ModelFormatError):
    """Declared parameter count disagrees with the architecture or payload."""


# ---------------------------------------------------------------------------
# Architecture description


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


Layer = Union[Conv, Relu, MaxPool, Flatten, Dense]


@dataclass(frozen=True)
class ArchDescriptor:
    """Layer stack of the classifier plus its input image shape (H, W, C).

    The final layer must be a Dense(2) head (free / blocked).
    """

    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shape_chain()  # raises ArchError on inconsistency
        last = self.layers[-1] if self.layers else None
        if not (isinstance(last, Dense) and last.out_features == 2):
            raise ArchError("final layer must be dense(2) (free/blocked head)")

    def shape_chain(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes, starting with the input shape."""
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ArchError(f"input shape must be 3 positive dims, got {self.input_shape}")
        if not self.layers:
            raise ArchError("architecture has no layers")
        chain = [self.input_shape]
        shape: tuple[int, ...] = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _layer_output_shape(layer, shape, i)
            chain.append(shape)
        return chain

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, shapes in _param_shapes(self) for s in shapes)

    def to_text(self) -> str:
        """Canonical one-line form, parseable by ``ArchDescriptor.from_text``."""
        h, w, c = self.input_shape
        parts = [f"{h}x{w}x{c}"]
        for layer in self.layers:
            if isinstance(layer, Conv):
                parts.append(f"conv:{layer.out_channels}:{layer.kernel}:{layer.stride}:{layer.padding}")
            elif isinstance(layer, Relu):
                parts.append("relu")
            elif isinstance(layer, MaxPool):
                parts.append(f"maxpool:{layer.kernel}:{layer.stride}")
            elif isinstance(layer, Flatten):
                parts.append("flatten")
            elif isinstance(layer, Dense):
                parts.append(f"dense:{layer.out_features}")
            else:  # pragma: no cover - layer set is closed
                raise ArchError(f"unknown layer {layer!r}")
        return "|".join(parts)

    @staticmethod
    def from_text(text: str) -> "ArchDescriptor":
        tokens = text.strip().split("|")
        if len(tokens) < 2:
            raise ArchError(f"arch text needs input shape and layers: {text!r}")
        dims = tokens[0].split("x")
        if len(dims) != 3 or not all(t.isdigit() for t in dims):
            raise ArchError(f"bad input shape token {tokens[0]!r}")
        layers: list[Layer] = []
        for tok in tokens[1:]:
            name, _, rest = tok.partition(":")
            args = rest.split(":") if rest else []
            try:
                if name == "conv" and len(args) == 4:
                    layers.append(Conv(*(int(a) for a in args)))
                elif name == "relu" and not args:
                    layers.append(Relu())
                elif name == "maxpool" and len(args) == 2:
                    layers.append(MaxPool(*(int(a) for a in args)))
                elif name == "flatten" and not args:
                    layers.append(Flatten())
                elif name == "dense" and len(args) == 1:
                    layers.append(Dense(int(args[0])))
                else:
                    raise ArchError(f"bad layer token {tok!r}")
            except ValueError as e:
                raise ArchError(f"bad layer token {tok!r}") from e
        return ArchDescriptor((int(dims[0]), int(dims[1]), int(dims[2])), tuple(layers))


def _layer_output_shape(layer: Layer, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ArchError(f"layer {index}: conv needs HxWxC input, got {shape}")
        h, w, c = shape
        if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0 or layer.out_channels < 1:
            raise ArchError(f"layer {index}: bad conv parameters {layer}")
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ArchError(f"layer {index}: conv collapses {shape} to {(ho, wo)}")
        return (ho, wo, layer.out_channels)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ArchError(f"layer {index}: maxpool needs HxWxC input, got {shape}")
        h, w, c = shape
        if layer.kernel < 1 or layer.stride < 1:
            raise ArchError(f"layer {index}: bad maxpool parameters {layer}")
        ho = (h - layer.kernel) // layer.stride + 1
        wo = (w - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ArchError(f"layer {index}: maxpool collapses {shape} to {(ho, wo)}")
        return (ho, wo, c)
    if isinstance(layer, Relu):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ArchError(f"layer {index}: dense needs flat input, got {shape}")
        if layer.out_features < 1:
            raise ArchError(f"layer {index}: bad dense width {layer.out_features}")
        return (layer.out_features,)
    raise ArchError(f"layer {index}: unknown layer {layer!r}")


def _param_shapes(arch: ArchDescriptor) -> list[tuple[int, list[tuple[int, ...]]]]:
    """(layer index, [weight shape, bias shape]) for every parameterized layer."""
    chain = arch.shape_chain()
    out = []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            cin = chain[i][2]
            out.append((i, [(layer.kernel, layer.kernel, cin, layer.out_channels), (layer.out_channels,)]))
        elif isinstance(layer, Dense):
            out.append((i, [(chain[i][0], layer.out_features), (layer.out_features,)]))
    return out


def default_arch() -> ArchDescriptor:
    """Desk-scale convolutional stack (stacked conv+pool with a dense head)."""
    return ArchDescriptor(
        (64, 64, 3),
        (
            Conv(8, 5, 2, 2), Relu(), MaxPool(2, 2),
            Conv(16, 3, 1, 1), Relu(), MaxPool(2, 2),
            Conv(32, 3, 1, 1), Relu(), MaxPool(2, 2),
            Flatten(), Dense(64), Relu(), Dense(2),
        ),
    )


# Parameter count of default_arch(); verified against an independent
# layer-by-layer hand sum in the test suite.
DEFAULT_ARCH_PARAM_COUNT = 39378


# ---------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class ModelParams:
    """Architecture plus one flat float32 vector of all its parameters.

    Layout: for each parameterized layer in order, the weight tensor
    (row-major) followed by its bias vector. The values array is frozen;
    training steps allocate new vectors.
    """

    arch: ArchDescriptor
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32).ravel()
        expected = self.arch.param_count()
        if values.size != expected:
            raise ArchError(f"parameter vector has {values.size} values, arch implies {expected}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class Gradients:
    """Flat gradient vector with the same layout as ``ModelParams.values``."""

    values: np.ndarray


def _split_params(arch: ArchDescriptor, values: np.ndarray) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Views of (weights, bias) per parameterized layer index."""
    out = {}
    offset = 0
    for i, shapes in _param_shapes(arch):
        wshape, bshape = shapes
        wn = int(np.prod(wshape))
        bn = int(np.prod(bshape))
        w = values[offset:offset + wn].reshape(wshape)
        b = values[offset + wn:offset + wn + bn].reshape(bshape)
        out[i] = (w, b)
        offset += wn + bn
    return out


def init_params(arch: ArchDescriptor, seed: int) -> ModelParams:
    """He-scaled normal weights (std sqrt(2/fan_in)), zero biases."""
    arch.shape_chain()
    rng = seed_stream(seed, "init")
    chunks: list[np.ndarray] = []
    chain = arch.shape_chain()
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            fan_in = layer.kernel * layer.kernel * chain[i][2]
            n = fan_in * layer.out_channels
            w = rng.standard_normal(n, dtype=np.float32) * np.float32(np.sqrt(2.0 / fan_in))
            chunks.append(w)
            chunks.append(np.zeros(layer.out_channels, dtype=np.float32))
        elif isinstance(layer, Dense):
            fan_in = chain[i][0]
            n = fan_in * layer.out_features
            w = rng.standard_normal(n, dtype=np.float32) * np.float32(np.sqrt(2.0 / fan_in))
            chunks.append(w)
            chunks.append(np.zeros(layer.out_features, dtype=np.float32))
    return ModelParams(arch, np.concatenate(chunks) if chunks else np.zeros(0, np.float32))


# ---------------------------------------------------------------------------
# Layer kernels (im2col convolution, stacked-window max pooling)


def _conv_forward(x, w, b, stride, padding):
    n, h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * cin)
    out = cols @ w.reshape(k * k * cin, cout)
    out += b
    cache = (cols, x.shape, (n, h, wd, cin), k, stride, padding, ho, wo)
    return out.reshape(n, ho, wo, cout), cache


def _conv_backward(dout, w, cache, need_dx=True):
    cols, padded_shape, in_shape, k, stride, padding, ho, wo = cache
    n, h, wd, cin = in_shape
    cout = w.shape[3]
    dout2 = dout.reshape(n * ho * wo, cout)
    dw = (cols.T @ dout2).reshape(w.shape)
    db = dout2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dout2 @ w.reshape(k * k * cin, cout).T).reshape(n, ho, wo, k, k, cin)
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, u : u + (ho - 1) * stride + 1 : stride,
                v : v + (wo - 1) * stride + 1 : stride, :] += dcols[:, :, :, u, v, :]
    if padding:
        dx = dxp[:, padding : padding + h, padding : padding + wd, :]
    else:
        dx = dxp
    return dx, dw, db


def _maxpool_forward(x, k, stride):
    n, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    stack = np.stack([
        x[:, u : u + (ho - 1) * stride + 1 : stride, v : v + (wo - 1) * stride + 1 : stride, :]
        for u in range(k) for v in range(k)
    ])
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]
    return out, (arg, x.shape, k, stride, ho, wo)


def _maxpool_backward(dout, cache):
    arg, in_shape, k, stride, ho, wo = cache
    dx = np.zeros(in_shape, dtype=dout.dtype)
    t = 0
    for u in range(k):
        for v in range(k):
            dx[:, u : u + (ho - 1) * stride + 1 : stride,
               v : v + (wo - 1) * stride + 1 : stride, :] += np.where(arg == t, dout, 0)
            t += 1
    return dx


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(arch: ArchDescriptor, batch: np.ndarray) -> None:
    if batch.ndim != 4 or tuple(batch.shape[1:]) != arch.input_shape:
        raise ShapeMismatchError(
            f"batch shape {tuple(batch.shape)} does not match arch input "
            f"(N, {', '.join(str(d) for d in arch.input_shape)})"
        )


def _run_layers(arch, values, batch, dtype, keep_caches):
    params = _split_params(arch, values)
    x = np.ascontiguousarray(batch, dtype=dtype)
    caches = []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            w, b = params[i]
            x, cache = _conv_forward(x, w.astype(dtype, copy=False), b.astype(dtype, copy=False),
                                     layer.stride, layer.padding)
            caches.append(("conv", i, cache))
        elif isinstance(layer, Relu):
            mask = x > 0
            x = x * mask
            caches.append(("relu", i, mask if keep_caches else None))
        elif isinstance(layer, MaxPool):
            x, cache = _maxpool_forward(x, layer.kernel, layer.stride)
            caches.append(("maxpool", i, cache))
        elif isinstance(layer, Flatten):
            caches.append(("flatten", i, x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            w, b = params[i]
            caches.append(("dense", i, x))
            x = x @ w.astype(dtype, copy=False) + b.astype(dtype, copy=False)
    return x, caches, params


def forward_values(arch: ArchDescriptor, values: np.ndarray, batch: np.ndarray,
                   dtype=np.float32) -> np.ndarray:
    """Class probabilities (N, 2) for a raw parameter vector."""
    _check_batch(arch, batch)
    logits, _, _ = _run_layers(arch, values, batch, dtype, keep_caches=False)
    return _softmax(logits)


def forward(params: ModelParams, batch: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Post-softmax class probabilities, one row per batch image."""
    return forward_values(params.arch, params.values, batch, dtype)


def loss_and_grad_values(arch: ArchDescriptor, values: np.ndarray, batch: np.ndarray,
                         labels: np.ndarray, dtype=np.float32) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the flat parameter vector."""
    _check_batch(arch, batch)
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != batch.shape[0]:
        raise ValueError(f"need one label per image: {y.shape} vs batch {batch.shape[0]}")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (free) or 1 (blocked)")
    y = y.astype(np.intp)

    logits, caches, params = _run_layers(arch, values, batch, dtype, keep_caches=True)
    n = batch.shape[0]
    probs = _softmax(logits)
    loss = float(-np.log(np.maximum(probs[np.arange(n), y], LOG_FLOOR)).mean())

    grads = np.zeros(values.size, dtype=dtype)
    grad_views = _split_params(arch, grads)
    dx = probs.copy()
    dx[np.arange(n), y] -= 1
    dx /= n
    for pos, (kind, i, cache) in enumerate(reversed(caches)):
        bottom = pos == len(caches) - 1  # input gradient is never consumed
        if kind == "dense":
            w, _ = params[i]
            gw, gb = grad_views[i]
            xin = cache
            gw[...] = xin.T @ dx
            gb[...] = dx.sum(axis=0)
            if not bottom:
                dx = dx @ w.astype(dtype, copy=False).T
        elif kind == "flatten":
            dx = dx.reshape(cache)
        elif kind == "maxpool":
            dx = _maxpool_backward(dx, cache)
        elif kind == "relu":
            dx = dx * cache
        elif kind == "conv":
            w, _ = params[i]
            gw, gb = grad_views[i]
            dx, dw, db = _conv_backward(dx, w.astype(dtype, copy=False), cache,
                                        need_dx=not bottom)
            gw[...] = dw
            gb[...] = db
    return loss, grads


def loss_and_grad(params: ModelParams, batch: np.ndarray, labels: Sequence[int],
                  dtype=np.float32) -> tuple[float, Gradients]:
    loss, grads = loss_and_grad_values(params.arch, params.values, batch,
                                       np.asarray(labels), dtype)
    return loss, Gradients(grads)


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    """values - lr * grads, elementwise; lr = 0 is a bit-exact no-op."""
    g = np.asarray(grads.values if isinstance(grads, Gradients) else grads)
    if g.shape != params.values.shape:
        raise ValueError(f"gradient length {g.shape} does not match params {params.values.shape}")
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if lr == 0:
        return params
    return ModelParams(params.arch, params.values - np.float32(lr) * g.astype(np.float32, copy=False))


def predict_proba(params: ModelParams, image: np.ndarray) -> float:
    """Probability that the environment ahead is blocked, for one image."""
    img = np.asarray(image)
    if tuple(img.shape) != params.arch.input_shape:
        raise ShapeMismatchError(
            f"image shape {tuple(img.shape)} does not match arch input {params.arch.input_shape}")
    return float(forward(params, img[None])[0, BLOCKED_INDEX])


# ---------------------------------------------------------------------------
# Model file format
#
# magic "FLOA" | version u16 LE | arch text length u32 LE | arch text UTF-8 |
# parameter count u64 LE | raw float32 LE values. Round-trips bit-exactly.


def serialize_params(params: ModelParams) -> bytes:
    arch_text = params.arch.to_text().encode("utf-8")
    head = MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(arch_text))
    count = struct.pack("<Q", params.values.size)
    return head + arch_text + count + params.values.astype("<f4", copy=False).tobytes()


def deserialize_params(data: bytes) -> ModelParams:
    if len(data) < 4:
        raise TruncatedModelError(f"model stream ends inside magic ({len(data)} bytes)")
    if data[:4] != MODEL_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    if len(data) < 10:
        raise TruncatedModelError("model stream ends inside header")
    version, arch_len = struct.unpack_from("<HI", data, 4)
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"unsupported model version {version}")
    offset = 10
    if len(data) < offset + arch_len + 8:
        raise TruncatedModelError("model stream ends inside arch descriptor")
    try:
        arch_text = data[offset:offset + arch_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise ModelFormatError("arch descriptor is not valid UTF-8") from e
    try:
        arch = ArchDescriptor.from_text(arch_text)
    except ArchError as e:
        raise ModelFormatError(f"invalid arch descriptor: {e}") from e
    offset += arch_len
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if count != arch.param_count():
        raise HeaderMismatchError(
            f"declared {count} parameters but arch implies {arch.param_count()}")
    end = offset + count * 4
    if len(data) < end:
        raise TruncatedModelError(f"expected {count * 4} value bytes, got {len(data) - offset}")
    if len(data) > end:
        raise HeaderMismatchError(f"{len(data) - end} trailing bytes after parameter payload")
    values = np.frombuffer(data[offset:end], dtype="<f4").astype(np.float32)
    return ModelParams(arch, values)


def params_checksum(params: ModelParams) -> int:
    """CRC32 of the serialized model, for round reports and join handshakes."""
    import zlib

    return zlib.crc32(serialize_params(params)) & 0xFFFFFFFF


def arch_checksum(arch: ArchDescriptor) -> int:
    import zlib

    return zlib.crc32(arch.to_text().encode("utf-8")) & 0xFFFFFFFF
