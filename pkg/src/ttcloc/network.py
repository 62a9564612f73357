"""Snippet scoring network with exact hand-derived gradients.

Architecture per snippet sequence (T, D):

    z1 = x @ w1 + b1                  (T, H)
    h1 = relu(z1)
    u  = h1 + conv3(h1)               residual temporal conv, zero padded
    h2 = relu(u)
    h3 = dropout(h2)                  inverted scaling, train time only
    out = h3 @ w2 + b2                (T, C + 1)

The first C output columns are per-class action scores; the last column is
a learned per-snippet threshold that doubles as a background score.  All
math is float64; relu'(0) is taken as 0.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import ValidationError

GATING_KINDS = ("sigmoid", "softsign", "binarize")


@dataclass
class NetworkParams:
    w1: np.ndarray  # (D, H)
    b1: np.ndarray  # (H,)
    conv_kernel: np.ndarray  # (3, H, H)
    conv_bias: np.ndarray  # (H,)
    w2: np.ndarray  # (H, C + 1)
    b2: np.ndarray  # (C + 1,)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1] - 1

    def copy(self) -> "NetworkParams":
        return NetworkParams(**{k: v.copy() for k, v in self.as_dict().items()})


def zeros_like_params(params: NetworkParams) -> NetworkParams:
    return NetworkParams(**{k: np.zeros_like(v) for k, v in params.as_dict().items()})


# A GradientBundle has the same fields and shapes as NetworkParams.
GradientBundle = NetworkParams


@dataclass
class ScoreMap:
    scores: np.ndarray  # (T, C)
    thresholds: np.ndarray  # (T,)


@dataclass
class Gate:
    values: np.ndarray  # (T, C)
    kind: str


@dataclass
class ForwardCache:
    features: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    pre_act: np.ndarray  # h1 + conv3(h1), before the second relu
    h2: np.ndarray
    h3: np.ndarray
    dropout_mask: np.ndarray | None
    dropout_scale: float
    params: NetworkParams


def init_params(rng: np.random.Generator, feature_dim: int, hidden_dim: int, num_classes: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases; deterministic given the rng state."""
    if min(feature_dim, hidden_dim, num_classes) < 1:
        raise ValidationError("init_params: all dimensions must be >= 1")

    def glorot(shape, fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape)

    d, h, c = feature_dim, hidden_dim, num_classes
    return NetworkParams(
        w1=glorot((d, h), d, h),
        b1=np.zeros(h),
        conv_kernel=glorot((3, h, h), 3 * h, 3 * h),
        conv_bias=np.zeros(h),
        w2=glorot((h, c + 1), h, c + 1),
        b2=np.zeros(c + 1),
    )


def _conv3(h1: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Temporal width-3 convolution with zero padding at both ends."""
    t = h1.shape[0]
    padded = np.zeros((t + 2, h1.shape[1]))
    padded[1 : t + 1] = h1
    return padded[0:t] @ kernel[0] + padded[1 : t + 1] @ kernel[1] + padded[2 : t + 2] @ kernel[2] + bias


def forward(
    params: NetworkParams,
    features: np.ndarray,
    dropout_mask: np.ndarray | None = None,
    drop_rate: float = 0.7,
) -> tuple[ScoreMap, ForwardCache]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.feature_dim:
        raise ValidationError(f"forward: features must be (T, {params.feature_dim}), got {x.shape}")
    z1 = x @ params.w1 + params.b1
    h1 = np.maximum(z1, 0.0)
    pre_act = h1 + _conv3(h1, params.conv_kernel, params.conv_bias)
    h2 = np.maximum(pre_act, 0.0)
    if dropout_mask is not None:
        if dropout_mask.shape != h2.shape:
            raise ValidationError(f"forward: dropout mask shape {dropout_mask.shape} != {h2.shape}")
        scale = 1.0 / (1.0 - drop_rate)
        h3 = h2 * dropout_mask * scale
    else:
        scale = 1.0
        h3 = h2
    out = h3 @ params.w2 + params.b2
    c = params.num_classes
    smap = ScoreMap(scores=out[:, :c], thresholds=out[:, c])
    cache = ForwardCache(x, z1, h1, pre_act, h2, h3, dropout_mask, scale, params)
    return smap, cache


def backward(cache: ForwardCache, d_scores: np.ndarray, d_thresholds: np.ndarray) -> GradientBundle:
    """Exact chain rule back to every parameter array."""
    params = cache.params
    t = cache.features.shape[0]
    c = params.num_classes
    if d_scores.shape != (t, c) or d_thresholds.shape != (t,):
        raise ValidationError("backward: upstream gradient shapes do not match the forward pass")
    d_out = np.concatenate([d_scores, d_thresholds[:, None]], axis=1)

    d_w2 = cache.h3.T @ d_out
    d_b2 = d_out.sum(axis=0)
    d_h3 = d_out @ params.w2.T

    if cache.dropout_mask is not None:
        d_h2 = d_h3 * cache.dropout_mask * cache.dropout_scale
    else:
        d_h2 = d_h3
    d_pre = d_h2 * (cache.pre_act > 0)

    # conv backward over the zero-padded sequence
    padded = np.zeros((t + 2, params.hidden_dim))
    padded[1 : t + 1] = cache.h1
    d_kernel = np.stack([padded[k : k + t].T @ d_pre for k in range(3)])
    d_conv_bias = d_pre.sum(axis=0)
    d_padded = np.zeros_like(padded)
    for k in range(3):
        d_padded[k : k + t] += d_pre @ params.conv_kernel[k].T
    d_h1 = d_pre + d_padded[1 : t + 1]  # residual path + conv path

    d_z1 = d_h1 * (cache.z1 > 0)
    d_w1 = cache.features.T @ d_z1
    d_b1 = d_z1.sum(axis=0)
    return GradientBundle(w1=d_w1, b1=d_b1, conv_kernel=d_kernel, conv_bias=d_conv_bias, w2=d_w2, b2=d_b2)


# ---------------------------------------------------------------------------
# Gating


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softsign01(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x / (1.0 + np.abs(x)) + 1.0)


def gate_values(x: np.ndarray, kind: str) -> np.ndarray:
    """Gate nonlinearity applied to score-minus-threshold margins."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softsign":
        return _softsign01(x)
    if kind == "binarize":
        return (x > 0).astype(np.float64)
    raise ValidationError(f"unknown gating kind {kind!r}; expected one of {GATING_KINDS}")


def gate_input_grad(x: np.ndarray, values: np.ndarray, kind: str) -> np.ndarray:
    """d gate / d input, elementwise.

    Binarization uses the identity as a surrogate gradient, so training can
    pass information through the hard step.
    """
    if kind == "sigmoid":
        return values * (1.0 - values)
    if kind == "softsign":
        return 0.5 / np.square(1.0 + np.abs(x))
    if kind == "binarize":
        return np.ones_like(x)
    raise ValidationError(f"unknown gating kind {kind!r}; expected one of {GATING_KINDS}")


def apply_gate(score_map: ScoreMap, kind: str) -> Gate:
    x = score_map.scores - score_map.thresholds[:, None]
    return Gate(values=gate_values(x, kind), kind=kind)


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, then named little-endian float64 arrays.
# Layout (all integers little-endian):
#   bytes 0..3   magic b"TTCK"
#   uint32       format version (currently 1)
#   uint32       number of arrays
#   per array:   uint16 name length, name (utf-8), uint8 ndim,
#                ndim * uint32 dims, then the float64 values row-major.

_CKPT_MAGIC = b"TTCK"
_CKPT_VERSION = 1
_PARAM_ORDER = ("w1", "b1", "conv_kernel", "conv_bias", "w2", "b2")


def save_params(params: NetworkParams, path: str) -> None:
    arrays = params.as_dict()
    chunks = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(_PARAM_ORDER))]
    for name in _PARAM_ORDER:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_params(path: str) -> NetworkParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValidationError(f"{path}: not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
        offset += 8 * size
    missing = set(_PARAM_ORDER) - set(arrays)
    if missing:
        raise ValidationError(f"{path}: checkpoint missing arrays {sorted(missing)}")
    params = NetworkParams(**{k: arrays[k] for k in _PARAM_ORDER})
    h = params.hidden_dim
    if params.conv_kernel.shape != (3, h, h) or params.b1.shape != (h,):
        raise ValidationError(f"{path}: inconsistent parameter shapes")
    return params
