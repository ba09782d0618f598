"""2-D discrete Fourier transforms over the spatial axes of rank-4 tensors.

The fast path is an iterative radix-2 Cooley-Tukey transform for power-of-two
lengths and a Bluestein chirp-z transform (three power-of-two FFTs) for
everything else, so any H x W works. Transforms always compute in complex128
and cast back to the input precision; the forward transform is unnormalized
and the inverse carries the full 1/(H*W).

``dft2d_naive`` evaluates the DFT definition directly (definitional transform
matrices, O(n^2) per axis) and exists purely as the test oracle for the fast
path; it shares no code with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, record


@dataclass
class ComplexTensor:
    """A complex-valued rank-4 value stored as separate real/imaginary parts."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"re/im shapes differ: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data.astype(np.complex128) + 1j * self.im.data.astype(np.complex128)

    @classmethod
    def from_real(cls, x: Tensor) -> "ComplexTensor":
        return cls(x, Tensor(np.zeros(x.shape, dtype=x.dtype)))


# --------------------------------------------------------------------------
# 1-D kernels (batched over the leading axis)

_BITREV_CACHE: dict[int, np.ndarray] = {}
_TWIDDLE_CACHE: dict[tuple[int, int], list[np.ndarray]] = {}
_CHIRP_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, int]] = {}


def _bit_reverse(n: int) -> np.ndarray:
    idx = _BITREV_CACHE.get(n)
    if idx is None:
        bits = n.bit_length() - 1
        idx = np.zeros(n, dtype=np.intp)
        for i in range(n):
            r = 0
            v = i
            for _ in range(bits):
                r = (r << 1) | (v & 1)
                v >>= 1
            idx[i] = r
        _BITREV_CACHE[n] = idx
    return idx


def _stage_twiddles(n: int, sign: int) -> list[np.ndarray]:
    key = (n, sign)
    tw = _TWIDDLE_CACHE.get(key)
    if tw is None:
        tw = []
        size = 2
        while size <= n:
            half = size // 2
            tw.append(np.exp(sign * 2j * np.pi * np.arange(half) / size))
            size *= 2
        _TWIDDLE_CACHE[key] = tw
    return tw


def _radix2(a: np.ndarray, sign: int) -> np.ndarray:
    """Iterative decimation-in-time FFT; a is (batch, n) with n a power of 2."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    a = a[:, _bit_reverse(n)]
    for tw in _stage_twiddles(n, sign):
        size = 2 * tw.shape[0]
        half = tw.shape[0]
        a = a.reshape(-1, n // size, size)
        even = a[:, :, :half]
        odd = a[:, :, half:] * tw
        a = np.concatenate((even + odd, even - odd), axis=2).reshape(-1, n)
    return a


def _bluestein_plan(n: int, sign: int):
    key = (n, sign)
    plan = _CHIRP_CACHE.get(key)
    if plan is None:
        k = np.arange(n)
        chirp = np.exp(sign * 1j * np.pi * (k * k % (2 * n)) / n)
        m = 1 << (2 * n - 1).bit_length()
        b = np.zeros(m, dtype=np.complex128)
        b[:n] = np.conj(chirp)
        b[m - n + 1 :] = np.conj(chirp)[1:][::-1]
        bf = _radix2(b[None, :], -1)[0]
        plan = (chirp, bf, m)
        _CHIRP_CACHE[key] = plan
    return plan


def _bluestein(a: np.ndarray, sign: int) -> np.ndarray:
    """Chirp-z FFT of arbitrary length via three power-of-two transforms."""
    n = a.shape[-1]
    chirp, bf, m = _bluestein_plan(n, sign)
    buf = np.zeros((a.shape[0], m), dtype=np.complex128)
    buf[:, :n] = a * chirp
    conv = _radix2(_radix2(buf, -1) * bf, +1) / m
    return conv[:, :n] * chirp


def _fft1d(a: np.ndarray, sign: int) -> np.ndarray:
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    if n & (n - 1) == 0:
        return _radix2(a, sign)
    return _bluestein(a, sign)


def _fft2_raw(z: np.ndarray, sign: int, normalize: bool) -> np.ndarray:
    """Transform the last two axes of an (N, C, H, W) complex array."""
    n, c, h, w = z.shape
    out = _fft1d(z.reshape(-1, w), sign).reshape(n, c, h, w)
    out = out.transpose(0, 1, 3, 2)
    out = _fft1d(out.reshape(-1, h), sign).reshape(n, c, w, h).transpose(0, 1, 3, 2)
    if normalize:
        out = out / (h * w)
    return np.ascontiguousarray(out)


# --------------------------------------------------------------------------
# tensor-level ops


def _transform(x: ComplexTensor, name: str, sign: int, normalize: bool, adj_sign: int, adj_norm: bool) -> ComplexTensor:
    dtype = x.re.dtype
    z = x.numpy()
    val = _fft2_raw(z, sign, normalize)
    out_re = Tensor(val.real.astype(dtype))
    out_im = Tensor(val.imag.astype(dtype))

    def backward(gouts, needs):
        gz = gouts[0].astype(np.complex128) + 1j * gouts[1].astype(np.complex128)
        gx = _fft2_raw(gz, adj_sign, adj_norm)
        g_re = gx.real.astype(dtype) if needs[0] else None
        g_im = gx.imag.astype(dtype) if needs[1] else None
        return g_re, g_im

    record(name, (x.re, x.im), (out_re, out_im), backward)
    return ComplexTensor(out_re, out_im)


def fft2d(x: ComplexTensor) -> ComplexTensor:
    """Unnormalized forward 2-D DFT over (H, W)."""
    return _transform(x, "fft2d", sign=-1, normalize=False, adj_sign=+1, adj_norm=False)


def ifft2d(x: ComplexTensor) -> ComplexTensor:
    """Inverse 2-D DFT with 1/(H*W) normalization."""
    return _transform(x, "ifft2d", sign=+1, normalize=True, adj_sign=-1, adj_norm=True)


# --------------------------------------------------------------------------
# oracle


def dft2d_naive(plane: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Direct evaluation of the 2-D DFT double sum on one (H, W) plane.

    Builds the definitional transform matrices E[k, n] = exp(-2j*pi*k*n/N)
    and multiplies them in; O(n^2) per axis. Test oracle only.
    """
    plane = np.asarray(plane, dtype=np.complex128)
    if plane.ndim != 2:
        raise ShapeError(f"dft2d_naive expects a 2-D plane, got shape {plane.shape}")
    h, w = plane.shape
    sign = 2j if inverse else -2j
    kh = np.arange(h)
    kw = np.arange(w)
    eh = np.exp(sign * np.pi * np.outer(kh, kh) / h)
    ew = np.exp(sign * np.pi * np.outer(kw, kw) / w)
    out = eh @ plane @ ew
    if inverse:
        out = out / (h * w)
    return out
