"""Convolution and the small set of network primitives built on it.

The fast ``conv2d`` is an im2col GEMM for dense kernels and a
shift-and-accumulate tap loop for grouped/depth-wise kernels; both share the
same padding arithmetic ("same-zero" rounds the output up to ceil(in/stride)
and puts any odd padding on the bottom/right). ``conv2d_reference`` is the
deliberately naive nested-loop oracle the fast path is tested against; do not
"optimize" it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    gelu,
    pixel_shuffle,
    record,
    reduce_mean,
    sigmoid,
)


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    bias: bool = True
    padding: str = "same"  # "same" (zero-filled) or "valid"

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw, self.stride, self.dilation, self.groups) < 1:
            raise ShapeError(f"non-positive field in {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in={self.in_channels} and out={self.out_channels}"
            )
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"unknown padding mode {self.padding!r}")

    @property
    def effective_kernel(self) -> tuple[int, int]:
        kh, kw = self.kernel
        return (kh - 1) * self.dilation + 1, (kw - 1) * self.dilation + 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        eh, ew = self.effective_kernel
        if self.padding == "same":
            return -(-h // self.stride), -(-w // self.stride)
        if eh > h or ew > w:
            raise ShapeError(f"kernel extent {(eh, ew)} exceeds input {(h, w)} with valid padding")
        return (h - eh) // self.stride + 1, (w - ew) // self.stride + 1

    def pads(self, h: int, w: int) -> tuple[int, int, int, int]:
        """(top, bottom, left, right) zero padding; extra goes bottom/right."""
        if self.padding == "valid":
            return 0, 0, 0, 0
        eh, ew = self.effective_kernel
        oh, ow = self.out_hw(h, w)
        ph = max(0, (oh - 1) * self.stride + eh - h)
        pw = max(0, (ow - 1) * self.stride + ew - w)
        return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2

    def param_count(self) -> int:
        n = self.out_channels * (self.in_channels // self.groups) * self.kernel[0] * self.kernel[1]
        return n + (self.out_channels if self.bias else 0)

    def macs(self, batch: int, h: int, w: int) -> int:
        """Multiply-accumulates for one forward pass at the given input size."""
        oh, ow = self.out_hw(h, w)
        per_out = (self.in_channels // self.groups) * self.kernel[0] * self.kernel[1]
        return batch * self.out_channels * oh * ow * per_out


@dataclass
class WeightBundle:
    """A named conv layer: spec plus its weight (and optional bias) tensors."""

    name: str
    spec: ConvSpec
    weight: Tensor
    bias: Tensor | None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


def init_weights(spec: ConvSpec, name: str, seed, dtype=None) -> WeightBundle:
    """Kaiming fan-in normal init (std = sqrt(2/fan_in)), zero bias.

    ``seed`` may be anything ``numpy.random.default_rng`` accepts; the same
    seed always yields bit-identical weights.
    """
    dtype = dtype or DEFAULT_DTYPE
    rng = np.random.default_rng(seed)
    fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
    std = math.sqrt(2.0 / fan_in)
    w = rng.normal(0.0, std, size=spec.weight_shape).astype(dtype)
    weight = Tensor(w, requires_grad=True)
    bias = None
    if spec.bias:
        bias = Tensor(np.zeros((1, spec.out_channels, 1, 1), dtype=dtype), requires_grad=True)
    return WeightBundle(name, spec, weight, bias)


# --------------------------------------------------------------------------
# fast convolution


def _pad_input(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _tap_slice(i: int, j: int, spec: ConvSpec, oh: int, ow: int) -> tuple[slice, slice]:
    s, d = spec.stride, spec.dilation
    return (
        slice(i * d, i * d + (oh - 1) * s + 1, s),
        slice(j * d, j * d + (ow - 1) * s + 1, s),
    )


def _im2col(xpad: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Gather taps into (C*kh*kw, N*oh*ow), tap index varying fastest."""
    n, c = xpad.shape[:2]
    kh, kw = spec.kernel
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xpad.dtype)
    for i in range(kh):
        for j in range(kw):
            hs, ws = _tap_slice(i, j, spec, oh, ow)
            cols[:, i, j] = xpad[:, :, hs, ws].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def _col2im(gcols: np.ndarray, spec: ConvSpec, padded_shape, oh: int, ow: int) -> np.ndarray:
    n, c = padded_shape[:2]
    kh, kw = spec.kernel
    gcols = gcols.reshape(c, kh, kw, n, oh, ow)
    gx = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            hs, ws = _tap_slice(i, j, spec, oh, ow)
            gx[:, :, hs, ws] += gcols[:, i, j].transpose(1, 0, 2, 3)
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """2-D cross-correlation with zero 'same' (or 'valid') padding."""
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} does not match spec {spec.weight_shape}")
    if spec.bias:
        if bias is None or bias.shape != (1, spec.out_channels, 1, 1):
            got = None if bias is None else bias.shape
            raise ShapeError(f"bias shape {got} does not match (1, {spec.out_channels}, 1, 1)")
    elif bias is not None:
        raise ShapeError("spec declares no bias but one was passed")

    oh, ow = spec.out_hw(h, w)
    pads = spec.pads(h, w)
    xpad = _pad_input(x.data, pads)
    kh, kw = spec.kernel
    cg_in = spec.in_channels // spec.groups
    cg_out = spec.out_channels // spec.groups
    depthwise = spec.groups == spec.in_channels == spec.out_channels

    wdata = weight.data
    if spec.groups == 1:
        cols = _im2col(xpad, spec, oh, ow)
        out_data = (wdata.reshape(spec.out_channels, -1) @ cols).reshape(
            spec.out_channels, n, oh, ow
        ).transpose(1, 0, 2, 3)
        out_data = np.ascontiguousarray(out_data)
    elif depthwise:
        out_data = np.zeros((n, c, oh, ow), dtype=xpad.dtype)
        for i in range(kh):
            for j in range(kw):
                hs, ws = _tap_slice(i, j, spec, oh, ow)
                out_data += wdata[:, 0, i, j][None, :, None, None] * xpad[:, :, hs, ws]
    else:
        wg = wdata.reshape(spec.groups, cg_out, cg_in, kh, kw)
        out_data = np.zeros((n, spec.groups, cg_out, oh, ow), dtype=xpad.dtype)
        xg = xpad.reshape(n, spec.groups, cg_in, *xpad.shape[2:])
        for i in range(kh):
            for j in range(kw):
                hs, ws = _tap_slice(i, j, spec, oh, ow)
                out_data += np.einsum(
                    "goc,ngcyx->ngoyx", wg[:, :, :, i, j], xg[:, :, :, hs, ws]
                )
        out_data = out_data.reshape(n, spec.out_channels, oh, ow)

    if bias is not None:
        out_data = out_data + bias.data
    out = Tensor(out_data)

    xdata = x.data
    padded_shape = xpad.shape

    def backward(gouts, needs):
        (g,) = gouts
        need_x, need_w = needs[0], needs[1]
        need_b = spec.bias and needs[2]
        gx = gw = gb = None
        xp = _pad_input(xdata, pads)

        if spec.groups == 1:
            gflat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(
                spec.out_channels, n * oh * ow
            )
            if need_w:
                cols = _im2col(xp, spec, oh, ow)
                gw = (gflat @ cols.T).reshape(spec.weight_shape)
            if need_x:
                gcols = wdata.reshape(spec.out_channels, -1).T @ gflat
                gx = _col2im(gcols, spec, padded_shape, oh, ow)
        elif depthwise:
            if need_w:
                gw = np.zeros_like(wdata)
            if need_x:
                gx = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    hs, ws = _tap_slice(i, j, spec, oh, ow)
                    if need_w:
                        gw[:, 0, i, j] = (xp[:, :, hs, ws] * g).sum(axis=(0, 2, 3))
                    if need_x:
                        gx[:, :, hs, ws] += wdata[:, 0, i, j][None, :, None, None] * g
        else:
            wg = wdata.reshape(spec.groups, cg_out, cg_in, kh, kw)
            gg = g.reshape(n, spec.groups, cg_out, oh, ow)
            xg = xp.reshape(n, spec.groups, cg_in, *xp.shape[2:])
            if need_w:
                gw = np.zeros_like(wg)
            if need_x:
                gx = np.zeros(padded_shape, dtype=g.dtype)
                gxg = gx.reshape(n, spec.groups, cg_in, *gx.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    hs, ws = _tap_slice(i, j, spec, oh, ow)
                    if need_w:
                        gw[:, :, :, i, j] += np.einsum(
                            "ngcyx,ngoyx->goc", xg[:, :, :, hs, ws], gg
                        )
                    if need_x:
                        gxg[:, :, :, hs, ws] += np.einsum(
                            "goc,ngoyx->ngcyx", wg[:, :, :, i, j], gg
                        )
            if need_w:
                gw = gw.reshape(spec.weight_shape)

        if gx is not None:
            pt, pb, pl, pr = pads
            gx = gx[:, :, pt : gx.shape[2] - pb, pl : gx.shape[3] - pr]
        if need_b:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, spec.out_channels, 1, 1)
        return (gx, gw, gb) if spec.bias else (gx, gw)

    if bias is not None:
        record("conv2d", (x, weight, bias), (out,), backward)
    else:
        record("conv2d", (x, weight), (out,), backward)
    return out


def conv2d_reference(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> np.ndarray:
    """Nested-loop evaluation of the convolution definition. Test oracle only."""
    n, c, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    pt, _, pl, _ = spec.pads(h, w)
    kh, kw = spec.kernel
    cg_in = spec.in_channels // spec.groups
    cg_out = spec.out_channels // spec.groups
    xd = x.data
    wd = weight.data
    bd = bias.data.reshape(-1) if bias is not None else None
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=np.float64)
    for ni in range(n):
        for co in range(spec.out_channels):
            g = co // cg_out
            acc0 = float(bd[co]) if bd is not None else 0.0
            for oy in range(oh):
                for ox in range(ow):
                    acc = acc0
                    for cl in range(cg_in):
                        ci = g * cg_in + cl
                        for ki in range(kh):
                            iy = oy * spec.stride + ki * spec.dilation - pt
                            if iy < 0 or iy >= h:
                                continue
                            for kj in range(kw):
                                ix = ox * spec.stride + kj * spec.dilation - pl
                                if 0 <= ix < w:
                                    acc += float(xd[ni, ci, iy, ix]) * float(wd[co, cl, ki, kj])
                    out[ni, co, oy, ox] = acc
    return out


# --------------------------------------------------------------------------
# block-level primitives


def downsample_spec(channels: int) -> ConvSpec:
    """3x3 stride-2 conv that doubles channels and halves each spatial dim."""
    return ConvSpec(channels, channels * 2, (3, 3), stride=2)


def downsample_block(x: Tensor, bundle: WeightBundle) -> Tensor:
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even spatial dims, got {h}x{w}")
    return bundle(x)


def upsample_spec(channels: int) -> ConvSpec:
    """1x1 conv doubling channels, to be followed by depth-to-space."""
    return ConvSpec(channels, channels * 2, (1, 1))


def upsample_block(x: Tensor, bundle: WeightBundle) -> Tensor:
    """1x1 channel expansion then depth-to-space 2: (N,C,H,W) -> (N,C/2,2H,2W)."""
    if x.shape[1] % 2:
        raise ShapeError(f"upsample needs an even channel count, got {x.shape[1]}")
    return pixel_shuffle(bundle(x), 2)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, keeping (N, C, 1, 1)."""
    return reduce_mean(x, (2, 3))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")
