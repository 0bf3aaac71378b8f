"""Differentiable primitives with exact pullbacks.

Layout conventions:

* spatial tensors are ``(..., H, W, C)``; any leading axes are batch axes;
* ``affine`` acts on the last axis, ``(..., in) -> (..., out)``;
* a pullback maps an output cotangent ``w`` to ``(input_cotangent, param_cotangents)``
  where ``param_cotangents`` is a dict keyed like the layer's parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import RandomSource, ShapeError, Tensor, dtype_for

Pullback = Callable[[Tensor], tuple[Tensor, dict]]

KINDS = ("affine", "conv2d", "relu", "maxpool2d", "tile_upsample", "space_to_depth", "scale_shift")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: str = "same"
    factor: tuple[int, int] = (1, 1)
    block: int = 1
    channels: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def affine(cls, in_features: int, out_features: int) -> "LayerSpec":
        return cls("affine", in_features=in_features, out_features=out_features)

    @classmethod
    def conv2d(cls, in_channels: int, out_channels: int, kernel=3, stride=1, padding="same") -> "LayerSpec":
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        return cls("conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel=_pair(kernel), stride=_pair(stride), padding=padding)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls("relu")

    @classmethod
    def maxpool2d(cls, kernel=2, stride=None) -> "LayerSpec":
        return cls("maxpool2d", kernel=_pair(kernel), stride=_pair(kernel if stride is None else stride))

    @classmethod
    def tile_upsample(cls, factor=2) -> "LayerSpec":
        return cls("tile_upsample", factor=_pair(factor))

    @classmethod
    def space_to_depth(cls, block=2) -> "LayerSpec":
        return cls("space_to_depth", block=int(block))

    @classmethod
    def scale_shift(cls, channels: int) -> "LayerSpec":
        return cls("scale_shift", channels=channels)

    @property
    def has_params(self) -> bool:
        return self.kind in ("affine", "conv2d", "scale_shift")


# -- shape functions ---------------------------------------------------------

def _conv_out(size: int, k: int, s: int, padding: str) -> tuple[int, int]:
    """Returns (output extent, total padding) along one spatial axis."""
    if padding == "same":
        out = -(-size // s)
        pad = max((out - 1) * s + k - size, 0)
    else:
        pad = 0
        if k > size:
            raise ShapeError(f"kernel {k} larger than input extent {size}")
        out = (size - k) // s + 1
    if k > size + pad:
        raise ShapeError(f"kernel {k} larger than padded input extent {size + pad}")
    return out, pad


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape produced by ``spec`` on an input of ``in_shape``; rejects invalid inputs."""
    in_shape = tuple(int(d) for d in in_shape)
    if any(d <= 0 for d in in_shape) or not in_shape:
        raise ShapeError(f"invalid input shape {in_shape}")
    k = spec.kind
    if k == "affine":
        if in_shape[-1] != spec.in_features:
            raise ShapeError(f"affine expects {spec.in_features} input features, got {in_shape[-1]}")
        return in_shape[:-1] + (spec.out_features,)
    if k == "relu":
        return in_shape
    if len(in_shape) < 3:
        raise ShapeError(f"{k} needs a (..., H, W, C) input, got {in_shape}")
    *lead, H, W, C = in_shape
    lead = tuple(lead)
    if k == "conv2d":
        if C != spec.in_channels:
            raise ShapeError(f"conv2d expects {spec.in_channels} channels, got {C}")
        ho, _ = _conv_out(H, spec.kernel[0], spec.stride[0], spec.padding)
        wo, _ = _conv_out(W, spec.kernel[1], spec.stride[1], spec.padding)
        return lead + (ho, wo, spec.out_channels)
    if k == "maxpool2d":
        (kh, kw), (sh, sw) = spec.kernel, spec.stride
        if kh > H or kw > W or (H - kh) % sh or (W - kw) % sw:
            raise ShapeError(f"maxpool kernel {spec.kernel}/stride {spec.stride} does not tile {H}x{W}")
        return lead + ((H - kh) // sh + 1, (W - kw) // sw + 1, C)
    if k == "tile_upsample":
        fh, fw = spec.factor
        return lead + (H * fh, W * fw, C)
    if k == "space_to_depth":
        b = spec.block
        if H % b or W % b:
            raise ShapeError(f"space_to_depth block {b} does not divide {H}x{W}")
        return lead + (H // b, W // b, C * b * b)
    if k == "scale_shift":
        if C != spec.channels:
            raise ShapeError(f"scale_shift expects {spec.channels} channels, got {C}")
        return in_shape
    raise AssertionError(k)


# -- parameters --------------------------------------------------------------

def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "affine":
        return {"w": (spec.out_features, spec.in_features), "b": (spec.out_features,)}
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        return {"w": (kh, kw, spec.in_channels, spec.out_channels), "b": (spec.out_channels,)}
    if spec.kind == "scale_shift":
        return {"scale": (spec.channels,), "shift": (spec.channels,)}
    return {}


def init_params(spec: LayerSpec, rng: RandomSource, precision: str = "double") -> dict[str, Tensor]:
    """He-style fan-in scaled uniform weights, zero biases, unit scale."""
    dt = dtype_for(precision)
    shapes = param_shapes(spec)
    if spec.kind in ("affine", "conv2d"):
        w_shape = shapes["w"]
        fan_in = spec.in_features if spec.kind == "affine" else w_shape[0] * w_shape[1] * w_shape[2]
        limit = math.sqrt(6.0 / fan_in)
        return {"w": rng.uniform(-limit, limit, w_shape).astype(dt), "b": np.zeros(shapes["b"], dt)}
    if spec.kind == "scale_shift":
        return {"scale": np.ones(spec.channels, dt), "shift": np.zeros(spec.channels, dt)}
    return {}


# -- primitives ----------------------------------------------------------------

def _to4d(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    lead = x.shape[:-3]
    return x.reshape((-1,) + x.shape[-3:]), lead


def _affine(spec, params, x):
    W, b = params["w"], params["b"]
    y = x @ W.T + b

    def pb(w):
        dx = w @ W
        w2 = w.reshape(-1, w.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        return dx, {"w": w2.T @ x2, "b": w2.sum(axis=0)}

    return y, pb


def _relu(spec, params, x):
    mask = x > 0
    y = np.where(mask, x, 0.0).astype(x.dtype, copy=False)

    def pb(w):
        return np.where(mask, w, 0.0).astype(w.dtype, copy=False), {}

    return y, pb


def _conv2d(spec, params, x):
    W, b = params["w"], params["b"]
    x4, lead = _to4d(x)
    B, H, Wd, C = x4.shape
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    ho, ph = _conv_out(H, kh, sh, spec.padding)
    wo, pw = _conv_out(Wd, kw, sw, spec.padding)
    top, left = ph // 2, pw // 2
    xp = np.pad(x4, ((0, 0), (top, ph - top), (left, pw - left), (0, 0)))
    # (B, Ho, Wo, C, kh, kw)
    patches = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    Wt = W.transpose(2, 0, 1, 3)  # (C, kh, kw, Cout)
    y = np.tensordot(patches, Wt, axes=([3, 4, 5], [0, 1, 2])) + b

    def pb(w):
        w4 = w.reshape((B, ho, wo, W.shape[3]))
        dWt = np.tensordot(patches, w4, axes=([0, 1, 2], [0, 1, 2]))  # (C, kh, kw, Cout)
        dpatch = np.tensordot(w4, W, axes=([3], [3]))  # (B, Ho, Wo, kh, kw, C)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += dpatch[:, :, :, i, j, :]
        dx = dxp[:, top:top + H, left:left + Wd, :]
        return dx.reshape(lead + (H, Wd, C)), {"w": dWt.transpose(1, 2, 0, 3), "b": w4.sum(axis=(0, 1, 2))}

    return y.reshape(lead + y.shape[1:]), pb


def _maxpool2d(spec, params, x):
    x4, lead = _to4d(x)
    B, H, Wd, C = x4.shape
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    ho, wo = (H - kh) // sh + 1, (Wd - kw) // sw + 1
    win = sliding_window_view(x4, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]  # (B, Ho, Wo, C, kh, kw)
    flat = win.reshape(B, ho, wo, C, kh * kw)
    arg = flat.argmax(axis=-1)  # first occurrence: ties go to the lowest flat index
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    bi, oi, oj, ci = np.indices(arg.shape)
    rows = oi * sh + arg // kw
    cols = oj * sw + arg % kw

    def pb(w):
        w4 = w.reshape(B, ho, wo, C)
        dx = np.zeros_like(x4)
        np.add.at(dx, (bi, rows, cols, ci), w4)
        return dx.reshape(x.shape), {}

    return y.reshape(lead + y.shape[1:]), pb


def _tile_upsample(spec, params, x):
    fh, fw = spec.factor
    y = np.repeat(np.repeat(x, fh, axis=-3), fw, axis=-2)

    def pb(w):
        *lead, H, Wd, C = x.shape
        return w.reshape(tuple(lead) + (H, fh, Wd, fw, C)).sum(axis=(-4, -2)), {}

    return y, pb


def _space_to_depth(spec, params, x):
    b = spec.block
    *lead, H, Wd, C = x.shape
    lead = tuple(lead)
    n = len(lead)
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    y = x.reshape(lead + (H // b, b, Wd // b, b, C)).transpose(perm).reshape(lead + (H // b, Wd // b, b * b * C))

    def pb(w):
        inv = w.reshape(lead + (H // b, Wd // b, b, b, C)).transpose(perm)
        return inv.reshape(x.shape), {}

    return y, pb


def _scale_shift(spec, params, x):
    scale, shift = params["scale"], params["shift"]
    y = x * scale + shift

    def pb(w):
        axes = tuple(range(w.ndim - 1))
        return w * scale, {"scale": (w * x).sum(axis=axes), "shift": w.sum(axis=axes)}

    return y, pb


_IMPL = {
    "affine": _affine,
    "conv2d": _conv2d,
    "relu": _relu,
    "maxpool2d": _maxpool2d,
    "tile_upsample": _tile_upsample,
    "space_to_depth": _space_to_depth,
    "scale_shift": _scale_shift,
}


def layer_apply(spec: LayerSpec, params: dict | None, x: Tensor) -> tuple[Tensor, Pullback]:
    """Evaluate one layer and return its output together with the exact pullback."""
    x = np.asarray(x)
    output_shape(spec, x.shape)
    params = params or {}
    for name, shape in param_shapes(spec).items():
        if name not in params or params[name].shape != shape:
            raise ShapeError(f"{spec.kind} parameter {name!r} must have shape {shape}")
    return _IMPL[spec.kind](spec, params, x)


def tau_apply(matcher: LayerSpec | None, x: Tensor) -> tuple[Tensor, Pullback]:
    """Match spatial extents of a shortcut activation (max-pool down, tile up).

    ``None`` is the identity matcher, used when extents already agree.
    """
    if matcher is None:
        return x, lambda w: (w, {})
    if matcher.kind not in ("maxpool2d", "tile_upsample"):
        raise ValueError(f"tau matcher must be maxpool2d or tile_upsample, got {matcher.kind!r}")
    return layer_apply(matcher, None, x)


def space_to_depth(x: Tensor, block: int) -> tuple[Tensor, Pullback]:
    y, pb = layer_apply(LayerSpec.space_to_depth(block), None, x)
    return y, lambda w: pb(w)[0]


def fuse_apply(op: str, direct: Tensor, shortcut: Tensor, shortcut_gain: float = 1.0):
    """Fuse a direct and a (matched) shortcut activation.

    Returns ``(gamma, pullback)``; the pullback maps a cotangent of ``gamma`` to
    ``(direct_cotangent, shortcut_cotangent)``. ``shortcut_gain`` scales the
    shortcut operand and exists for ablation tests; 1.0 is the plain operator.
    """
    if op == "add":
        if direct.shape != shortcut.shape:
            raise ShapeError(f"add fusion needs identical shapes, got {direct.shape} and {shortcut.shape}")
        if shortcut_gain == 1.0:
            return direct + shortcut, lambda w: (w, w)
        return direct + shortcut_gain * shortcut, lambda w: (w, shortcut_gain * w)
    if op == "concat":
        if direct.shape[:-1] != shortcut.shape[:-1]:
            raise ShapeError(f"concat fusion needs matching non-channel extents, got {direct.shape} and {shortcut.shape}")
        split = direct.shape[-1]
        s = shortcut if shortcut_gain == 1.0 else shortcut_gain * shortcut
        gamma = np.concatenate([direct, s], axis=-1)
        if shortcut_gain == 1.0:
            return gamma, lambda w: (w[..., :split], w[..., split:])
        return gamma, lambda w: (w[..., :split], shortcut_gain * w[..., split:])
    raise ValueError(f"unknown fusion operator {op!r}")


def fused_shape(op: str, direct: tuple[int, ...], shortcut: tuple[int, ...]) -> tuple[int, ...]:
    if op == "add":
        if tuple(direct) != tuple(shortcut):
            raise ShapeError(f"add fusion with mismatched shapes {direct} vs {shortcut}")
        return tuple(direct)
    if op == "concat":
        if tuple(direct[:-1]) != tuple(shortcut[:-1]):
            raise ShapeError(f"concat fusion with mismatched extents {direct} vs {shortcut}")
        return tuple(direct[:-1]) + (direct[-1] + shortcut[-1],)
    raise ValueError(f"unknown fusion operator {op!r}")


# -- losses ------------------------------------------------------------------

def softmax_xent(logits: Tensor, label) -> tuple[float, Tensor]:
    """Cross-entropy of softmax(logits) against integer labels.

    ``logits`` has shape ``(..., K)`` and ``label`` the leading shape; the loss
    is averaged over the leading elements (a single vector gives the plain loss).
    """
    logits = np.asarray(logits)
    labels = np.asarray(label, dtype=np.int64)
    K = logits.shape[-1]
    flat = logits.reshape(-1, K)
    lab = labels.reshape(-1)
    if flat.shape[0] != lab.shape[0]:
        raise ShapeError(f"{lab.shape[0]} labels for {flat.shape[0]} logit vectors")
    if np.any(lab < 0) or np.any(lab >= K):
        raise ValueError(f"label out of range for {K} classes")
    shifted = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    rows = np.arange(lab.shape[0])
    loss = float(np.mean(np.log(z[:, 0]) - shifted[rows, lab]))
    grad = p
    # p[label] - 1 written as minus the other classes' mass, which avoids cancellation
    others = e.copy()
    others[rows, lab] = 0.0
    grad[rows, lab] = -others.sum(axis=1) / z[:, 0]
    grad /= lab.shape[0]
    return loss, grad.reshape(logits.shape)


def mse_loss(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.dot(diff.ravel(), diff.ravel()) / n), 2.0 * diff / n
