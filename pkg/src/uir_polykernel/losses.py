"""Training objective: smooth L1 + SSIM + differentiable UCIQE.

The composite loss is

    total = 1.0 * smooth_l1 + 0.2 * (1 - ssim) + 0.01 * (1 - uciqe_diff)

where ``uciqe_diff`` is an epsilon-guarded twin of the exact UCIQE metric.
The metric keeps hard selections and unguarded square roots for exactness;
the twin here swaps in a soft range squash, guarded roots, and constant
percentile masks taken from the forward values, so every gradient stays
finite. On images comfortably inside [0, 1] the two agree to well below 1e-6.
"""

from __future__ import annotations

import math

import numpy as np

from .metrics import (
    GAMMA_EXPONENT,
    GAMMA_LINEAR_SLOPE,
    GAMMA_OFFSET,
    GAMMA_THRESHOLD,
    LAB_INTERCEPT,
    LAB_SLOPE,
    LAB_THRESHOLD,
    RGB_TO_XYZ,
    UCIQE_CHROMA_WEIGHT,
    UCIQE_CONTRAST_WEIGHT,
    UCIQE_SATURATION_WEIGHT,
    WHITEPOINT,
    ssim_graph,
)
from .tensor import (
    ShapeError,
    Tensor,
    absolute,
    add,
    clamp,
    div,
    mul,
    narrow,
    power,
    reduce_max,
    reduce_mean,
    reduce_min,
    reduce_sum,
    sqrt,
    sub,
    where_mask,
)

PIXEL_WEIGHT = 1.0
SSIM_WEIGHT = 0.2
UCIQE_WEIGHT = 0.01
SMOOTH_L1_BETA = 1.0

GUARD_EPS = 1e-12


def smooth_l1(pred: Tensor, target: Tensor, beta: float = SMOOTH_L1_BETA) -> Tensor:
    """Huber-style pixel loss, quadratic within ``beta`` and linear outside."""
    if pred.shape != target.shape:
        raise ShapeError(f"shapes differ: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    ad = absolute(d)
    quad = mul(mul(d, d), 0.5 / beta)
    lin = sub(ad, 0.5 * beta)
    close = ad.data < beta
    return reduce_mean(where_mask(close, quad, lin))


def ssim_loss(pred: Tensor, target: Tensor) -> Tensor:
    return sub(1.0, ssim_graph(pred, target))


def _soft_unit(x: Tensor) -> Tensor:
    """Smooth squash of the real line into (0, 1).

    Acts as the identity (to ~GUARD_EPS) on values already inside [0, 1] and
    bends out-of-range values back smoothly, so the color conversion behind
    it never sees a non-positive operand. The final hard clip only matters
    for inputs several units outside [0, 1], where rounding in the smooth
    form could otherwise reach 0 exactly (the true gradient there is below
    rounding anyway).
    """
    lo = sqrt(add(mul(x, x), GUARD_EPS))
    xm1 = sub(x, 1.0)
    hi = sqrt(add(mul(xm1, xm1), GUARD_EPS))
    return clamp(mul(add(sub(lo, hi), 1.0), 0.5), 1e-9, 1.0 - 1e-9)


def _lab_graph(rgb: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable sRGB -> Lab for one image strictly inside (0, 1)."""
    gamma_mask = rgb.data > GAMMA_THRESHOLD
    powed = power(div(add(rgb, GAMMA_OFFSET), 1.0 + GAMMA_OFFSET), GAMMA_EXPONENT)
    linear = where_mask(gamma_mask, powed, div(rgb, GAMMA_LINEAR_SLOPE))
    chans = [narrow(linear, 1, c, 1) for c in range(3)]
    f_parts = []
    for i in range(3):
        xyz = add(
            add(mul(chans[0], float(RGB_TO_XYZ[i, 0])), mul(chans[1], float(RGB_TO_XYZ[i, 1]))),
            mul(chans[2], float(RGB_TO_XYZ[i, 2])),
        )
        t = div(xyz, float(WHITEPOINT[i]))
        cube_mask = t.data > LAB_THRESHOLD
        f = where_mask(cube_mask, power(t, 1.0 / 3.0), add(mul(t, LAB_SLOPE), LAB_INTERCEPT))
        f_parts.append(f)
    fx, fy, fz = f_parts
    lum = sub(mul(fy, 116.0), 16.0)
    a = mul(sub(fx, fy), 500.0)
    b = mul(sub(fy, fz), 200.0)
    return lum, a, b


def _percentile_masks(lum: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Constant top/bottom 1% selector masks from detached luminance values."""
    flat_order = np.argsort(lum, axis=None, kind="stable")
    k = max(1, int(math.floor(0.01 * lum.size)))
    bot = np.zeros(lum.size, dtype=bool)
    top = np.zeros(lum.size, dtype=bool)
    bot[flat_order[:k]] = True
    top[flat_order[-k:]] = True
    return top.reshape(lum.shape), bot.reshape(lum.shape), k


def _uciqe_single(img: Tensor) -> Tensor:
    sc = _soft_unit(img)
    lum, a, b = _lab_graph(sc)

    chroma = sqrt(add(add(mul(a, a), mul(b, b)), GUARD_EPS))
    centered = sub(chroma, reduce_mean(chroma))
    var = reduce_mean(mul(centered, centered))
    sigma_chroma = sqrt(add(var, GUARD_EPS))

    top, bot, k = _percentile_masks(lum.data[0, 0])
    shape4 = (1, 1) + top.shape
    top_w = Tensor(top.reshape(shape4).astype(lum.dtype))
    bot_w = Tensor(bot.reshape(shape4).astype(lum.dtype))
    top_mean = div(reduce_sum(mul(lum, top_w)), float(k))
    bot_mean = div(reduce_sum(mul(lum, bot_w)), float(k))
    con_l = div(sub(top_mean, bot_mean), 100.0)

    mx = reduce_max(sc, axis=1)
    mn = reduce_min(sc, axis=1)
    mu_s = reduce_mean(div(sub(mx, mn), add(mx, GUARD_EPS)))

    return add(
        add(mul(sigma_chroma, UCIQE_CHROMA_WEIGHT), mul(con_l, UCIQE_CONTRAST_WEIGHT)),
        mul(mu_s, UCIQE_SATURATION_WEIGHT),
    )


def uciqe_diff(x: Tensor) -> Tensor:
    """Differentiable UCIQE, averaged over the batch.

    Each image's score is clipped to [0, 1] before averaging so one wild
    early-training output cannot dominate the objective.
    """
    n, c, _, _ = x.shape
    if c != 3:
        raise ShapeError(f"need 3 channels, got {c}")
    total = None
    for i in range(n):
        v = clamp(_uciqe_single(narrow(x, 0, i, 1)), 0.0, 1.0)
        total = v if total is None else add(total, v)
    return div(total, float(n))


def uciqe_loss(pred: Tensor) -> Tensor:
    return sub(1.0, uciqe_diff(pred))


def composite_loss_terms(pred: Tensor, target: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(total, pixel, ssim, uciqe) loss scalars for one batch."""
    lp = smooth_l1(pred, target)
    ls = ssim_loss(pred, target)
    lu = uciqe_loss(pred)
    total = add(add(mul(lp, PIXEL_WEIGHT), mul(ls, SSIM_WEIGHT)), mul(lu, UCIQE_WEIGHT))
    return total, lp, ls, lu


def composite_loss(pred: Tensor, target: Tensor) -> Tensor:
    return composite_loss_terms(pred, target)[0]
