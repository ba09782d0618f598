"""Image quality metrics: PSNR, SSIM, UCIQE, and the CSV report around them.

Metrics compute in float64. PSNR of identical images returns the +inf
sentinel (serialized as "inf" in reports). The SSIM here is also the
differentiable core used by the training objective: built from tape ops, it
records gradients when called under an active tape and is plain arithmetic
otherwise. UCIQE's exact (hard-selection) form lives here; its
epsilon-guarded differentiable twin lives in the objective module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import ConvSpec, conv2d
from .tensor import ShapeError, Tensor, add, mul, reduce_mean, sub, div

# sRGB (D65) to XYZ; the whitepoint is the row sums, which maps the neutral
# axis to a = b = 0 exactly, bit for bit.
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ],
    dtype=np.float64,
)
WHITEPOINT = RGB_TO_XYZ.sum(axis=1)

GAMMA_THRESHOLD = 0.04045
GAMMA_LINEAR_SLOPE = 12.92
GAMMA_OFFSET = 0.055
GAMMA_EXPONENT = 2.4

LAB_DELTA = 6.0 / 29.0
LAB_THRESHOLD = LAB_DELTA**3
LAB_SLOPE = 1.0 / (3.0 * LAB_DELTA**2)
LAB_INTERCEPT = 4.0 / 29.0

UCIQE_CHROMA_WEIGHT = 0.4680
UCIQE_CONTRAST_WEIGHT = 0.2745
UCIQE_SATURATION_WEIGHT = 0.2576

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _as_nchw(x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) or (C, H, W), got {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# color


def srgb_to_lab(rgb) -> np.ndarray:
    """sRGB in [0, 1] (N, 3, H, W) -> CIE Lab, D65, L in [0, 100]."""
    arr = _as_nchw(rgb)
    if arr.shape[1] != 3:
        raise ShapeError(f"need 3 channels, got {arr.shape[1]}")
    linear = np.where(
        arr > GAMMA_THRESHOLD,
        ((arr + GAMMA_OFFSET) / (1.0 + GAMMA_OFFSET)) ** GAMMA_EXPONENT,
        arr / GAMMA_LINEAR_SLOPE,
    )
    # Whitepoint-normalized XYZ, anchored on the green channel: each row of
    # the normalized matrix sums to 1, so t = g + m_r*(r-g) + m_b*(b-g) is
    # the same product rearranged. The anchored form makes equal-channel
    # (gray) pixels land on t_x == t_y == t_z bit for bit, which keeps a and
    # b at exactly zero instead of summation-order noise.
    norm = RGB_TO_XYZ / WHITEPOINT[:, None]
    dr = (linear[:, 0] - linear[:, 1])[:, None]
    db = (linear[:, 2] - linear[:, 1])[:, None]
    t = (
        linear[:, 1][:, None]
        + norm[:, 0].reshape(1, 3, 1, 1) * dr
        + norm[:, 2].reshape(1, 3, 1, 1) * db
    )
    f = np.where(t > LAB_THRESHOLD, np.cbrt(t), LAB_SLOPE * t + LAB_INTERCEPT)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    lab = np.empty_like(t)
    lab[:, 0] = 116.0 * fy - 16.0
    lab[:, 1] = 500.0 * (fx - fy)
    lab[:, 2] = 200.0 * (fy - fz)
    return lab


# --------------------------------------------------------------------------
# PSNR


def psnr(x, y) -> float:
    """10*log10(1/MSE) against a peak of 1.0; +inf for identical inputs."""
    a = _as_nchw(x)
    b = _as_nchw(y)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# --------------------------------------------------------------------------
# SSIM


def _gaussian_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    win = np.outer(g, g)
    return win / win.sum()


_WINDOW_2D = _gaussian_window()


def ssim_graph(x: Tensor, y: Tensor) -> Tensor:
    """Mean SSIM as a differentiable scalar tensor.

    11x11 Gaussian window (sigma 1.5), valid-mode local statistics computed
    per channel, then averaged over channels and space. Identical inputs give
    exactly 1.0 because numerator and denominator are the same expressions
    bit for bit.
    """
    if x.shape != y.shape:
        raise ShapeError(f"ssim shapes differ: {x.shape} vs {y.shape}")
    n, c, h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window")
    spec = ConvSpec(c, c, (SSIM_WINDOW, SSIM_WINDOW), groups=c, bias=False, padding="valid")
    win = Tensor(np.broadcast_to(_WINDOW_2D, (c, 1, SSIM_WINDOW, SSIM_WINDOW)).astype(x.dtype).copy())

    mu_x = conv2d(x, win, None, spec)
    mu_y = conv2d(y, win, None, spec)
    e_xx = conv2d(mul(x, x), win, None, spec)
    e_yy = conv2d(mul(y, y), win, None, spec)
    e_xy = conv2d(mul(x, y), win, None, spec)

    mxx = mul(mu_x, mu_x)
    myy = mul(mu_y, mu_y)
    mxy = mul(mu_x, mu_y)
    var_x = sub(e_xx, mxx)
    var_y = sub(e_yy, myy)
    cov = sub(e_xy, mxy)

    lum_num = add(mul(mxy, 2.0), SSIM_C1)
    lum_den = add(add(mxx, myy), SSIM_C1)
    con_num = add(mul(cov, 2.0), SSIM_C2)
    con_den = add(add(var_x, var_y), SSIM_C2)
    ssim_map = div(mul(lum_num, con_num), mul(lum_den, con_den))
    return reduce_mean(ssim_map)


def ssim(x, y) -> float:
    """Scalar SSIM metric in float64 (no gradient tracking expected)."""
    return ssim_graph(Tensor(_as_nchw(x)), Tensor(_as_nchw(y))).item()


# --------------------------------------------------------------------------
# UCIQE


def _percentile_count(n_pixels: int) -> int:
    return max(1, int(math.floor(0.01 * n_pixels)))


def uciqe(x) -> float:
    """0.4680*sigma_chroma + 0.2745*con_l + 0.2576*mu_s for one image.

    sigma_chroma: population std of sqrt(a^2+b^2) over pixels (raw Lab units).
    con_l: (mean of top 1% of L) - (mean of bottom 1%), on L/100.
    mu_s: mean HSV saturation (max-min)/max with 0 where max is 0.
    """
    arr = _as_nchw(x)
    if arr.shape[0] != 1 or arr.shape[1] != 3:
        raise ShapeError(f"uciqe expects one RGB image, got {arr.shape}")
    lab = srgb_to_lab(arr)
    lum = lab[0, 0]
    chroma = np.sqrt(lab[0, 1] ** 2 + lab[0, 2] ** 2)
    # Two-pass (centered) variance: constant-chroma images come out at the
    # rounding floor instead of sqrt(cancellation noise).
    var = float(np.mean((chroma - np.mean(chroma)) ** 2))
    sigma_chroma = math.sqrt(var)

    flat = np.sort(lum.reshape(-1))
    k = _percentile_count(flat.size)
    con_l = (float(np.mean(flat[-k:])) - float(np.mean(flat[:k]))) / 100.0

    mx = arr[0].max(axis=0)
    mn = arr[0].min(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sat = np.where(mx > 0.0, (mx - mn) / mx, 0.0)
    mu_s = float(np.mean(sat))

    return UCIQE_CHROMA_WEIGHT * sigma_chroma + UCIQE_CONTRAST_WEIGHT * con_l + UCIQE_SATURATION_WEIGHT * mu_s


# --------------------------------------------------------------------------
# report


@dataclass
class MetricRow:
    name: str
    psnr: float | None
    ssim: float | None
    uciqe: float

    def _cell(self, v: float | None) -> str:
        if v is None:
            return ""
        if math.isinf(v):
            return "inf"
        return f"{v:.6f}"

    def to_csv(self) -> str:
        return f"{self.name},{self._cell(self.psnr)},{self._cell(self.ssim)},{self._cell(self.uciqe)}"


@dataclass
class MetricReport:
    """Per-image metric rows plus an arithmetic-mean summary row."""

    rows: list[MetricRow] = field(default_factory=list)

    def add(self, name: str, psnr_v: float | None, ssim_v: float | None, uciqe_v: float) -> None:
        self.rows.append(MetricRow(name, psnr_v, ssim_v, uciqe_v))

    def _mean(self, values: list[float | None]) -> float | None:
        if not values or values[0] is None:
            return None
        return float(sum(values) / len(values))

    def mean_row(self) -> MetricRow:
        if not self.rows:
            raise ValueError("empty report has no mean")
        return MetricRow(
            "MEAN",
            self._mean([r.psnr for r in self.rows]),
            self._mean([r.ssim for r in self.rows]),
            self._mean([r.uciqe for r in self.rows]),
        )

    def to_csv(self) -> str:
        lines = ["name,psnr,ssim,uciqe"]
        lines += [r.to_csv() for r in sorted(self.rows, key=lambda r: r.name)]
        lines.append(self.mean_row().to_csv())
        return "\n".join(lines) + "\n"
