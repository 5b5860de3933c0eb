"""Minimal dense CNN engine: fixed layer vocabulary, reverse-mode gradients,
Adam, and a binary checkpoint format.

The layer set is just large enough to realize the embedding network and the
affine-regression network: conv2d (same padding), maxpool2, relu, flatten,
global average pooling and dense. Arithmetic is float32 by default but the
ops preserve whatever dtype they are given, so gradient checks can run in
float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

CHECKPOINT_MAGIC = b"AMCK"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    """Tensor shape incompatible with the layer or parameter it meets."""


class NonFiniteActivation(FloatingPointError):
    """A layer produced NaN/Inf; the message names the layer."""


class NoForwardState(RuntimeError):
    """backward() called without the state returned by forward()."""


class UnsupportedInputSize(ValueError):
    """Requested input size is outside the supported set."""


class VersionMismatch(ValueError):
    """Checkpoint format version differs from this build."""


class ArchitectureMismatch(ValueError):
    """Checkpoint architecture differs from the expected network."""


class CorruptPayload(ValueError):
    """Checkpoint file is truncated or internally inconsistent."""


# ---------------------------------------------------------------------------
# Layer vocabulary


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    kind = "conv2d"


@dataclass(frozen=True)
class MaxPool2:
    kind = "maxpool2"


@dataclass(frozen=True)
class Relu:
    kind = "relu"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class GlobalAvgPool:
    kind = "global_avg_pool"


@dataclass(frozen=True)
class Dense:
    out_dim: int
    kind = "dense"


_LAYER_KINDS = {
    "conv2d": Conv2d, "maxpool2": MaxPool2, "relu": Relu,
    "flatten": Flatten, "global_avg_pool": GlobalAvgPool, "dense": Dense,
}


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the input geometry it expects."""

    layers: tuple
    in_channels: int
    input_size: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.param_shapes()  # validates chain compatibility

    def param_shapes(self) -> list[tuple[int, ...]]:
        """Shapes of all parameters in layer order (weights then bias per layer)."""
        shapes = []
        state = ("map", self.in_channels, self.input_size, self.input_size)
        for i, layer in enumerate(self.layers):
            kind = layer.kind
            if kind == "conv2d":
                if state[0] != "map":
                    raise ShapeMismatch(f"layer {i}: conv2d needs a feature map input")
                _, c, h, w = state
                p = layer.kernel // 2
                ho = (h + 2 * p - layer.kernel) // layer.stride + 1
                wo = (w + 2 * p - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise ShapeMismatch(f"layer {i}: conv2d output collapses to zero size")
                shapes.append((layer.out_channels, c, layer.kernel, layer.kernel))
                shapes.append((layer.out_channels,))
                state = ("map", layer.out_channels, ho, wo)
            elif kind == "maxpool2":
                if state[0] != "map" or state[2] % 2 or state[3] % 2 or state[2] < 2:
                    raise ShapeMismatch(
                        f"layer {i}: maxpool2 needs an even-sized feature map, got {state}")
                state = ("map", state[1], state[2] // 2, state[3] // 2)
            elif kind == "relu":
                pass
            elif kind == "flatten":
                if state[0] != "map":
                    raise ShapeMismatch(f"layer {i}: flatten needs a feature map input")
                _, c, h, w = state
                state = ("flat", c * h * w)
            elif kind == "global_avg_pool":
                if state[0] != "map":
                    raise ShapeMismatch(f"layer {i}: global_avg_pool needs a feature map")
                state = ("flat", state[1])
            elif kind == "dense":
                if state[0] != "flat":
                    raise ShapeMismatch(f"layer {i}: dense needs a flat input")
                shapes.append((state[1], layer.out_dim))
                shapes.append((layer.out_dim,))
                state = ("flat", layer.out_dim)
            else:  # pragma: no cover
                raise ShapeMismatch(f"layer {i}: unknown kind {kind!r}")
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())

    def output_dim(self) -> int:
        state = ("map", self.in_channels, self.input_size, self.input_size)
        for layer in self.layers:
            if layer.kind == "conv2d":
                _, c, h, w = state
                p = layer.kernel // 2
                state = ("map", layer.out_channels,
                         (h + 2 * p - layer.kernel) // layer.stride + 1,
                         (w + 2 * p - layer.kernel) // layer.stride + 1)
            elif layer.kind == "maxpool2":
                state = ("map", state[1], state[2] // 2, state[3] // 2)
            elif layer.kind == "flatten":
                state = ("flat", state[1] * state[2] * state[3])
            elif layer.kind == "global_avg_pool":
                state = ("flat", state[1])
            elif layer.kind == "dense":
                state = ("flat", layer.out_dim)
        if state[0] != "flat":
            raise ShapeMismatch("network does not end in a flat output")
        return state[1]

    def to_json_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"kind": layer.kind}
            if layer.kind == "conv2d":
                d.update(out_channels=layer.out_channels, kernel=layer.kernel,
                         stride=layer.stride)
            elif layer.kind == "dense":
                d.update(out_dim=layer.out_dim)
            layers.append(d)
        return {"layers": layers, "in_channels": self.in_channels,
                "input_size": self.input_size}

    @classmethod
    def from_json_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            kind = ld["kind"]
            if kind == "conv2d":
                layers.append(Conv2d(ld["out_channels"], ld["kernel"], ld["stride"]))
            elif kind == "dense":
                layers.append(Dense(ld["out_dim"]))
            elif kind in _LAYER_KINDS:
                layers.append(_LAYER_KINDS[kind]())
            else:
                raise CorruptPayload(f"unknown layer kind {kind!r} in checkpoint")
        return cls(tuple(layers), d["in_channels"], d["input_size"])


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> list[Tensor]:
    """He-style initialization: weights N(0, sqrt(2/fan_in)), biases zero."""
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = np.sqrt(2.0 / fan_in)
            params.append((rng.standard_normal(shape) * std).astype(np.float32))
    return params


# ---------------------------------------------------------------------------
# Forward / backward


def _check_finite(arr: Tensor, i: int, kind: str) -> None:
    # a non-finite element always makes the f64 sum non-finite
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteActivation(f"non-finite output at layer {i} ({kind})")


def _conv_forward(x, w, b, stride):
    # columns kept as [B, C*k*k, Ho*Wo] so every copy runs over contiguous rows
    bsz, c, h, wd = x.shape
    o, ci, k, _ = w.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d expects {ci} input channels, got {c}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    cols = np.empty((bsz, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + ho * stride:stride,
                                    kj:kj + wo * stride:stride]
    cols = cols.reshape(bsz, c * k * k, ho * wo)
    y = w.reshape(o, c * k * k) @ cols + b[:, None]
    return y.reshape(bsz, o, ho, wo), (cols, x.shape)


def _conv_backward(gy, w, cache, stride):
    cols, x_shape = cache
    bsz, c, h, wd = x_shape
    o, _, k, _ = w.shape
    p = k // 2
    ho, wo = gy.shape[2], gy.shape[3]
    gy3 = gy.reshape(bsz, o, ho * wo)
    # gemm sees cols^T via strides, so no transposed copy materializes
    gw = (gy3 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, k, k)
    gb = gy3.sum(axis=(0, 2))
    gcols = (w.reshape(o, c * k * k).T @ gy3).reshape(bsz, c, k, k, ho, wo)
    gxp = np.zeros((bsz, c, h + 2 * p, wd + 2 * p), dtype=gy.dtype)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += \
                gcols[:, :, ki, kj]
    return gw, gb, gxp[:, :, p:p + h, p:p + wd]


def forward(spec: NetworkSpec, params: list[Tensor], x: Tensor,
            keep_state: bool = True):
    """Run the network; returns (output, state) where state feeds backward().

    Pass keep_state=False for inference to skip activation caching.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != spec.in_channels or \
            x.shape[2] != spec.input_size or x.shape[3] != spec.input_size:
        raise ShapeMismatch(
            f"input {x.shape} does not match (B, {spec.in_channels}, "
            f"{spec.input_size}, {spec.input_size})")
    shapes = spec.param_shapes()
    if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
        raise ShapeMismatch("parameter list does not match the network spec")

    caches = []
    pi = 0
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "conv2d":
            x, cache = _conv_forward(x, params[pi], params[pi + 1], layer.stride)
            pi += 2
            caches.append(cache if keep_state else None)
        elif kind == "maxpool2":
            h, w = x.shape[2], x.shape[3]
            quads = (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2],
                     x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
            x = np.maximum(np.maximum(quads[0], quads[1]),
                           np.maximum(quads[2], quads[3]))
            caches.append((quads, x, (h, w)) if keep_state else None)
        elif kind == "relu":
            mask = x > 0
            x = x * mask
            caches.append(mask if keep_state else None)
        elif kind == "flatten":
            shape = x.shape
            x = x.reshape(shape[0], -1)
            caches.append(shape if keep_state else None)
        elif kind == "global_avg_pool":
            shape = x.shape
            x = x.mean(axis=(2, 3))
            caches.append(shape if keep_state else None)
        elif kind == "dense":
            caches.append(x if keep_state else None)
            x = x @ params[pi] + params[pi + 1]
            pi += 2
        _check_finite(x, i, kind)
    return x, (caches if keep_state else None)


def backward(spec: NetworkSpec, params: list[Tensor], state, gy: Tensor,
             need_input_grad: bool = True):
    """Reverse-mode gradients; returns (per-parameter grads, input grad).

    With need_input_grad=False the input gradient is skipped (None), which
    saves the most expensive column scatter when the first layer is a conv.
    """
    if state is None:
        raise NoForwardState("run forward(..., keep_state=True) first")
    caches = state
    if len(caches) != len(spec.layers) or any(c is None for c in caches):
        raise NoForwardState("forward state is incomplete for this network")

    grads = [None] * len(params)
    pi = len(params)
    g = np.asarray(gy)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        kind = layer.kind
        cache = caches[i]
        if kind == "conv2d":
            pi -= 2
            if i == 0 and not need_input_grad:
                cols, _ = cache
                gy3 = g.reshape(g.shape[0], g.shape[1], -1)
                grads[pi] = (gy3 @ cols.transpose(0, 2, 1)).sum(axis=0) \
                    .reshape(params[pi].shape)
                grads[pi + 1] = gy3.sum(axis=(0, 2))
                g = None
                break
            gw, gb, g = _conv_backward(g, params[pi], cache, layer.stride)
            grads[pi] = gw
            grads[pi + 1] = gb
        elif kind == "maxpool2":
            quads, m, (h, w) = cache
            gx = np.zeros((g.shape[0], g.shape[1], h, w), dtype=g.dtype)
            # route gradient to the first quadrant attaining the max (valid
            # subgradient even under ties)
            taken = np.zeros(m.shape, dtype=bool)
            slots = ((0, 0), (0, 1), (1, 0), (1, 1))
            for q, (si, sj) in zip(quads, slots):
                hit = (q == m) & ~taken
                gx[:, :, si::2, sj::2] = g * hit
                taken |= hit
            g = gx
        elif kind == "relu":
            g = g * cache
        elif kind == "flatten":
            g = g.reshape(cache)
        elif kind == "global_avg_pool":
            bsz, c, h, w = cache
            g = np.broadcast_to(g[:, :, None, None] / (h * w), (bsz, c, h, w)).copy()
        elif kind == "dense":
            pi -= 2
            x = cache
            grads[pi] = x.T @ g
            grads[pi + 1] = g.sum(axis=0)
            g = g @ params[pi].T
    return grads, g


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Adam moments and step counter; learning defaults follow common practice."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = None
    v: list = None
    step: int = 0

    @classmethod
    def init(cls, params: list[Tensor], learning_rate: float = 1e-4) -> "AdamState":
        return cls(learning_rate=learning_rate,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[Tensor],
              grads: list[Tensor]) -> tuple[list[Tensor], AdamState]:
    """One bias-corrected Adam update; inputs are not mutated."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params/grads/state lengths differ")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_params.append((p - state.learning_rate * mhat /
                           (np.sqrt(vhat) + state.eps)).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(state.learning_rate, b1, b2, state.eps,
                                 new_m, new_v, t)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass(frozen=True)
class Checkpoint:
    spec: NetworkSpec
    params: list
    step: int
    seed: int

    def digest(self) -> str:
        h = hashlib.sha1()
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
        return h.hexdigest()


def save_checkpoint(path, spec: NetworkSpec, params: list[Tensor],
                    step: int, seed: int) -> None:
    header = json.dumps({"architecture": spec.to_json_dict(), "seed": int(seed)},
                        sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params)
    blob = (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<I", len(header)) + header
            + struct.pack("<Q", step) + payload)
    Path(path).write_bytes(blob)


def load_checkpoint(path, expected: NetworkSpec | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptPayload(f"{path}: not a checkpoint file")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    hlen = struct.unpack_from("<I", data, 8)[0]
    if len(data) < 12 + hlen + 8:
        raise CorruptPayload(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        spec = NetworkSpec.from_json_dict(header["architecture"])
        seed = int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptPayload(f"{path}: bad header ({exc})") from exc
    if expected is not None and spec != expected:
        raise ArchitectureMismatch(f"{path}: architecture differs from expected spec")
    step = struct.unpack_from("<Q", data, 12 + hlen)[0]
    payload = data[12 + hlen + 8:]
    shapes = spec.param_shapes()
    need = sum(int(np.prod(s)) for s in shapes) * 4
    if len(payload) != need:
        raise CorruptPayload(f"{path}: payload {len(payload)} bytes, expected {need}")
    params = []
    off = 0
    for s in shapes:
        cnt = int(np.prod(s))
        params.append(np.frombuffer(payload, dtype="<f4", count=cnt,
                                    offset=off).reshape(s).copy())
        off += cnt * 4
    return Checkpoint(spec, params, int(step), seed)


# ---------------------------------------------------------------------------
# Stock architectures


def default_embed_net(input_size: int, embed_dim: int = 64) -> NetworkSpec:
    """Embedding network: 4 conv blocks (8,16,32,64ch) + GAP + 2-layer head."""
    if input_size not in (64, 128):
        raise UnsupportedInputSize(f"input_size must be 64 or 128, got {input_size}")
    layers = []
    for ch in (8, 16, 32, 64):
        layers += [Conv2d(ch, kernel=3, stride=1), Relu(), MaxPool2()]
    layers += [GlobalAvgPool(), Dense(128), Relu(), Dense(embed_dim)]
    return NetworkSpec(tuple(layers), in_channels=1, input_size=input_size)


def default_regression_net(input_size: int = 128) -> NetworkSpec:
    """Affine-regression network: 7 conv blocks then dense 256 and dense 6.

    Input is 2 channels: moving and fixed image concatenated. The six outputs
    are (a11, a12, a21, a22, tx, ty) with translation as an axis fraction.
    """
    if input_size != 128:
        raise UnsupportedInputSize(
            f"regression net needs input_size 128 (7 halvings reach 1), got {input_size}")
    layers = []
    for ch in (8, 16, 32, 32, 64, 64, 64):
        layers += [Conv2d(ch, kernel=3, stride=1), Relu(), MaxPool2()]
    layers += [Flatten(), Dense(256), Relu(), Dense(6)]
    return NetworkSpec(tuple(layers), in_channels=2, input_size=input_size)


def init_regression_params(spec: NetworkSpec,
                           rng: np.random.Generator) -> list[Tensor]:
    """He init with the final dense zeroed and biased to the identity transform."""
    params = init_params(spec, rng)
    params[-2] = np.zeros_like(params[-2])
    params[-1] = np.array([1, 0, 0, 1, 0, 0], dtype=np.float32)
    return params
