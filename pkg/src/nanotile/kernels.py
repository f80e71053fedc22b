"""Untiled golden kernels: conv, pool, relu, add, fully-connected.

Tensors are numpy arrays shaped (K, H, W), channel-major then row-major,
dtype int16 for Q4.12 or float64 for the real-arithmetic twin.  Convolutions
use same-zero padding (pad = kernel//2) with ceil output sizing, accumulate
products exactly and renormalize once per output element.

The integer accumulation is routed through float64 GEMM: every partial sum is
bounded by len * 2**30 < 2**53, so the float path is bit-exact and an order
of magnitude faster than integer matmul.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fxp, net


def _check3(x: np.ndarray, name: str = "tensor") -> None:
    if x.ndim != 3:
        raise ValueError(f"{name}: expected (K, H, W), got shape {x.shape}")


def im2col(x_padded: np.ndarray, kh: int, kw: int, stride: int,
           h_out: int, w_out: int) -> np.ndarray:
    """Window extraction: (K, Hp, Wp) -> (h_out*w_out, K*kh*kw)."""
    k = x_padded.shape[0]
    s0, s1, s2 = x_padded.strides
    windows = np.lib.stride_tricks.as_strided(
        x_padded,
        shape=(h_out, w_out, k, kh, kw),
        strides=(s1 * stride, s2 * stride, s0, s1, s2),
        writeable=False)
    return windows.reshape(h_out * w_out, k * kh * kw)


def conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """im2col over an already fully padded input, as exact float64."""
    h_out = (xp.shape[1] - kh) // stride + 1
    w_out = (xp.shape[2] - kw) // stride + 1
    cols = im2col(xp, kh, kw, stride, h_out, w_out).astype(np.float64)
    if cols.shape[1] * (1 << 30) >= (1 << 53):
        raise ValueError("dot length too long for exact float64 accumulation")
    return cols


def conv_acc_on_padded(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Exact accumulator (K_out, H_out, W_out) over a fully padded input,
    no bias.  Output row 0 reads input rows [0, kh)."""
    k_out, k_in, kh, kw = w.shape
    if xp.shape[0] != k_in:
        raise ValueError(f"channel mismatch: input {xp.shape[0]}, weights {k_in}")
    h_out = (xp.shape[1] - kh) // stride + 1
    w_out = (xp.shape[2] - kw) // stride + 1
    cols = conv_cols(xp, kh, kw, stride)
    acc = (cols @ w.reshape(k_out, -1).astype(np.float64).T).astype(np.int64)
    return acc.T.reshape(k_out, h_out, w_out)


def conv_accumulate(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                    stride: int) -> np.ndarray:
    """Exact conv accumulator at scale 2**-24, same-zero padding, bias included."""
    k_out, k_in, kh, kw = w.shape
    _check3(x)
    if x.shape[0] != k_in:
        raise ValueError(f"channel mismatch: input {x.shape[0]}, weights {k_in}")
    pad = kh // 2
    xp = np.zeros((k_in, x.shape[1] + 2 * pad, x.shape[2] + 2 * pad), np.int16)
    xp[:, pad:pad + x.shape[1], pad:pad + x.shape[2]] = x
    acc = conv_acc_on_padded(xp, w, stride)
    return acc + (b.astype(np.int64) << fxp.FRAC_BITS)[:, None, None]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int,
           fused_relu: bool = False, fused_pool: bool = False) -> np.ndarray:
    """Q4.12 convolution; renorm once, then optional fused pool and ReLU."""
    out = fxp.renorm_array(conv_accumulate(x, w, b, stride))
    if fused_pool:
        out = maxpool2(out)
    if fused_relu:
        out = relu(out)
    return out


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2/s2 max-pool; odd trailing rows/cols pool over what is in range."""
    _check3(x)
    k, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    padded = np.full((k, 2 * ho, 2 * wo), np.iinfo(np.int16).min, np.int16)
    padded[:, :h, :w] = x
    return padded.reshape(k, ho, 2, wo, 2).max(axis=(2, 4))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def add(a: np.ndarray, b: np.ndarray, fused_relu: bool = False) -> np.ndarray:
    """Saturating elementwise Q4.12 addition."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = fxp.sat_add_array(a, b)
    return relu(out) if fused_relu else out


def fully_connected(x_flat: np.ndarray, w_flat: np.ndarray, b: int) -> np.int16:
    """Single renorm after the full fan-in accumulation; returns the Q4.12 raw."""
    if x_flat.shape != w_flat.shape:
        raise ValueError(f"length mismatch: {x_flat.shape} vs {w_flat.shape}")
    acc = int(np.dot(x_flat.astype(np.int64), w_flat.astype(np.int64)))
    acc += int(b) << fxp.FRAC_BITS
    return fxp.renorm_array(np.array([acc]))[0]


# Real-arithmetic twins (float64), same topology conventions.

def conv2d_real(x, w, b, stride, fused_relu=False, fused_pool=False):
    k_out, k_in, kh, kw = w.shape
    pad = kh // 2
    h_out = -(-x.shape[1] // stride)
    w_out = -(-x.shape[2] // stride)
    xp = np.zeros((k_in, x.shape[1] + 2 * pad, x.shape[2] + 2 * pad))
    xp[:, pad:pad + x.shape[1], pad:pad + x.shape[2]] = x
    cols = im2col(xp, kh, kw, stride, h_out, w_out)
    out = (cols @ w.reshape(k_out, -1).T).T.reshape(k_out, h_out, w_out)
    out = out + b[:, None, None]
    if fused_pool:
        k, h, wd = out.shape
        ho, wo = -(-h // 2), -(-wd // 2)
        padded = np.full((k, 2 * ho, 2 * wo), -np.inf)
        padded[:, :h, :wd] = out
        out = padded.reshape(k, ho, 2, wo, 2).max(axis=(2, 4))
    if fused_relu:
        out = np.maximum(out, 0.0)
    return out


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class InferResult:
    steering: float
    collision_prob: float
    raw_steering: int      # Q4.12 raw (float64 value for the real engine)
    raw_collision: int


def infer_untiled(graph: net.NetworkGraph, store: net.WeightStore,
                  image: np.ndarray, arithmetic: str = "q412") -> InferResult:
    """Run the graph in order; steering dequantized, collision logit through sigmoid."""
    if arithmetic not in ("q412", "real"):
        raise ValueError(f"unknown arithmetic {arithmetic!r}")
    fixed = arithmetic == "q412"
    acts: dict[str, np.ndarray] = {
        net.INPUT_TENSOR: image if fixed else fxp.dequantize_array(image)}
    heads: dict[str, float | np.int16] = {}

    for spec in graph.layers:
        src = acts[spec.inputs[0]]
        if spec.kind == net.CONV:
            w, b = store[spec.name]
            if fixed:
                out = conv2d(src, w, b, spec.stride, spec.fused_relu, spec.fused_pool)
            else:
                out = conv2d_real(src, fxp.dequantize_array(w), fxp.dequantize_array(b),
                                  spec.stride, spec.fused_relu, spec.fused_pool)
        elif spec.kind == net.RELU:
            out = relu(src) if fixed else np.maximum(src, 0.0)
        elif spec.kind == net.ADD:
            other = acts[spec.inputs[1]]
            if fixed:
                out = add(src, other, spec.fused_relu)
            else:
                out = src + other
                if spec.fused_relu:
                    out = np.maximum(out, 0.0)
        elif spec.kind == net.FC:
            w, b = store[spec.name]
            flat = src.ravel()
            if fixed:
                heads[spec.name] = fully_connected(flat, w.ravel(), int(b[0]))
            else:
                heads[spec.name] = float(flat @ fxp.dequantize_array(w.ravel())
                                         + fxp.dequantize_array(b)[0])
            continue
        else:
            raise ValueError(f"unknown layer kind {spec.kind}")
        acts[spec.output] = out

    if fixed:
        steer_raw, coll_raw = int(heads["fully_1"]), int(heads["fully_2"])
        steering = steer_raw / fxp.SCALE
        collision = sigmoid(coll_raw / fxp.SCALE)
        return InferResult(steering, collision, steer_raw, coll_raw)
    steering, logit = float(heads["fully_1"]), float(heads["fully_2"])
    return InferResult(steering, sigmoid(logit), steering, logit)
