"""Finite-difference verification of every backward rule.

Each check builds a scalar function from taped ops, takes the analytic
gradient with one tape, and compares against central differences computed
with the tape machinery completely out of the loop. Everything runs in
float64. The step is 1e-4 by default; the color-objective checks tighten
it to 1e-5 because the difference quotient (not the analytic side) carries
a truncation term that grows with the cube of the color transform's large
per-pixel gain. Inputs are drawn with margins that keep them away from the
kinks of non-smooth ops (abs, clamp, branch masks, percentile selections),
where finite differences are not meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arch import (
    CscCore,
    FdpaCore,
    HdaCore,
    LkaCore,
    NetworkConfig,
    ParameterStore,
    PolyKernelNet,
    SdcaCore,
    _Builder,
)
from .losses import composite_loss, smooth_l1, uciqe_diff
from .metrics import ssim_graph
from .nn import ConvSpec, conv2d
from .spectral import ComplexTensor, fft2d, ifft2d
from .tensor import (
    Tape,
    Tensor,
    absolute,
    add,
    clamp,
    div,
    finite_diff_grad,
    gelu,
    grad_rel_err,
    mul,
    narrow,
    neg,
    pixel_shuffle,
    power,
    reduce_max,
    reduce_mean,
    reduce_min,
    reduce_sum,
    sigmoid,
    sqrt,
    sub,
    where_mask,
)

DEFAULT_TOL = 1e-4
FD_EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tol

    def line(self) -> str:
        word = "PASS" if self.passed else "FAIL"
        return f"{word} {self.name} rel_err={self.rel_err:.3e} tol={self.tol:.0e}"


def _check(name: str, fn, x0: np.ndarray, eps: float = FD_EPS) -> CheckResult:
    """Analytic-vs-central-difference gradient of ``fn`` at ``x0``."""
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        tape.backward(fn(x))
    want = finite_diff_grad(fn, Tensor(x0.copy()), eps=eps)
    return CheckResult(name, grad_rel_err(x.grad, want))


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Shift entries of x that sit within ``margin`` of any kink point."""
    out = x.copy()
    for p in points:
        close = np.abs(out - p) < margin
        out[close] = p + margin * np.where(out[close] >= p, 1.0, -1.0)
    return out


def _elementwise_checks(results: list[CheckResult]) -> None:
    rng = np.random.default_rng(101)
    shape = (1, 2, 4, 4)
    x0 = rng.uniform(-1.0, 1.0, shape)
    k = Tensor(rng.uniform(0.5, 1.5, shape))

    results.append(_check("add", lambda x: reduce_mean(mul(add(x, k), k)), x0))
    results.append(_check("sub", lambda x: reduce_mean(mul(sub(k, x), k)), x0))
    results.append(_check("mul", lambda x: reduce_mean(mul(mul(x, k), x)), x0))
    results.append(_check("div", lambda x: reduce_mean(div(k, add(mul(x, x), 0.5))), x0))
    results.append(_check("neg", lambda x: reduce_mean(mul(neg(x), k)), x0))
    results.append(_check("sigmoid", lambda x: reduce_mean(mul(sigmoid(x), k)), x0))
    results.append(_check("gelu", lambda x: reduce_mean(mul(gelu(x), k)), x0))

    off_zero = _away_from(x0, [0.0], 1e-2)
    results.append(_check("abs", lambda x: reduce_mean(mul(absolute(x), k)), off_zero))

    pos = rng.uniform(0.25, 2.0, shape)
    results.append(_check("sqrt", lambda x: reduce_mean(mul(sqrt(x), k)), pos))
    results.append(_check("pow", lambda x: reduce_mean(mul(power(x, 2.4), k)), pos))

    in_unit = _away_from(rng.uniform(0.0, 1.0, shape), [0.2, 0.8], 1e-2)
    results.append(_check("clamp", lambda x: reduce_mean(mul(clamp(x, 0.2, 0.8), k)), in_unit))

    mask = rng.random(shape) < 0.5
    results.append(
        _check("where", lambda x: reduce_mean(where_mask(mask, mul(x, x), mul(x, 3.0))), x0)
    )

    # broadcasting across a size-1 operand
    col = Tensor(rng.uniform(0.5, 1.5, (1, 2, 1, 1)), requires_grad=False)
    results.append(_check("broadcast_mul", lambda x: reduce_mean(mul(x, col)), x0))


def _reduction_checks(results: list[CheckResult]) -> None:
    rng = np.random.default_rng(202)
    shape = (2, 2, 4, 4)
    x0 = rng.uniform(-1.0, 1.0, shape)
    k_full = Tensor(rng.uniform(0.5, 1.5, (2, 2, 1, 1)))

    results.append(_check("sum", lambda x: reduce_mean(mul(reduce_sum(x, (2, 3)), k_full)), x0))
    results.append(_check("mean_axes", lambda x: reduce_mean(mul(reduce_mean(x, (2, 3)), k_full)), x0))

    # spread values so the arg-extremum cannot flip under the fd step
    base = np.linspace(0.0, 1.0, 16)
    spread = np.stack([rng.permutation(base) for _ in range(4)]).reshape(shape)
    spread += rng.uniform(-1e-3, 1e-3, shape)
    k_hw = Tensor(rng.uniform(0.5, 1.5, (2, 2, 4, 1)))
    results.append(_check("max", lambda x: reduce_mean(mul(reduce_max(x, 3), k_hw)), spread))
    results.append(_check("min", lambda x: reduce_mean(mul(reduce_min(x, 3), k_hw)), spread))

    k_slice = Tensor(rng.uniform(0.5, 1.5, (2, 1, 2, 4)))
    results.append(
        _check("narrow", lambda x: reduce_mean(mul(narrow(narrow(x, 1, 1, 1), 2, 1, 2), k_slice)), x0)
    )

    shuf_in = rng.uniform(-1.0, 1.0, (2, 8, 3, 3))
    k_shuf = Tensor(rng.uniform(0.5, 1.5, (2, 2, 6, 6)))
    results.append(_check("pixel_shuffle", lambda x: reduce_mean(mul(pixel_shuffle(x, 2), k_shuf)), shuf_in))


_CONV_CASES = [
    ("conv_dense", ConvSpec(3, 4, (3, 3)), (2, 3, 6, 5)),
    ("conv_depthwise", ConvSpec(4, 4, (3, 3), groups=4), (1, 4, 5, 6)),
    ("conv_grouped", ConvSpec(6, 4, (3, 3), groups=2), (1, 6, 5, 5)),
    ("conv_strided", ConvSpec(3, 3, (3, 3), stride=2), (1, 3, 7, 6)),
    ("conv_dilated", ConvSpec(2, 3, (3, 3), dilation=2), (1, 2, 8, 8)),
    ("conv_valid", ConvSpec(3, 2, (3, 3), padding="valid"), (1, 3, 6, 6)),
    ("conv_1x1", ConvSpec(4, 3, (1, 1)), (2, 4, 4, 4)),
]


def _conv_checks(results: list[CheckResult]) -> None:
    for idx, (name, spec, xshape) in enumerate(_CONV_CASES):
        rng = np.random.default_rng(300 + idx)
        x0 = rng.uniform(-1.0, 1.0, xshape)
        w0 = rng.normal(0.0, 0.4, spec.weight_shape)
        b0 = rng.normal(0.0, 0.2, (1, spec.out_channels, 1, 1))
        oh, ow = spec.out_hw(xshape[2], xshape[3])
        proj = Tensor(rng.uniform(0.5, 1.5, (xshape[0], spec.out_channels, oh, ow)))

        def run(x_t, w_t, b_t):
            return reduce_mean(mul(conv2d(x_t, w_t, b_t, spec), proj))

        x = Tensor(x0.copy(), requires_grad=True)
        w = Tensor(w0.copy(), requires_grad=True)
        b = Tensor(b0.copy(), requires_grad=True)
        with Tape() as tape:
            tape.backward(run(x, w, b))

        fd_x = finite_diff_grad(lambda t: run(t, Tensor(w0), Tensor(b0)), Tensor(x0.copy()), eps=FD_EPS)
        fd_w = finite_diff_grad(lambda t: run(Tensor(x0), t, Tensor(b0)), Tensor(w0.copy()), eps=FD_EPS)
        fd_b = finite_diff_grad(lambda t: run(Tensor(x0), Tensor(w0), t), Tensor(b0.copy()), eps=FD_EPS)
        results.append(CheckResult(f"{name}/x", grad_rel_err(x.grad, fd_x)))
        results.append(CheckResult(f"{name}/w", grad_rel_err(w.grad, fd_w)))
        results.append(CheckResult(f"{name}/b", grad_rel_err(b.grad, fd_b)))


def _spectral_checks(results: list[CheckResult]) -> None:
    for name, (hh, ww), seed in (("fft_pow2", (4, 8), 351), ("fft_bluestein", (6, 5), 352)):
        rng = np.random.default_rng(seed)
        shape = (1, 2, hh, ww)
        x0 = rng.uniform(-1.0, 1.0, shape)
        a = Tensor(rng.uniform(0.5, 1.5, shape))
        b = Tensor(rng.uniform(0.5, 1.5, shape))

        def fwd(x):
            z = fft2d(ComplexTensor.from_real(x))
            return reduce_mean(add(mul(z.re, a), mul(z.im, b)))

        results.append(_check(name, fwd, x0))

        re0 = rng.uniform(-1.0, 1.0, shape)
        im0 = rng.uniform(-1.0, 1.0, shape)

        def inv_re(x, im_const=Tensor(im0)):
            z = ifft2d(ComplexTensor(x, im_const))
            return reduce_mean(add(mul(z.re, a), mul(z.im, b)))

        def inv_im(x, re_const=Tensor(re0)):
            z = ifft2d(ComplexTensor(re_const, x))
            return reduce_mean(add(mul(z.re, a), mul(z.im, b)))

        results.append(_check(name.replace("fft", "ifft") + "/re", inv_re, re0))
        results.append(_check(name.replace("fft", "ifft") + "/im", inv_im, im0))

    # both backward passes chained: forward transform, inverse, project
    rng = np.random.default_rng(353)
    shape = (1, 2, 6, 5)
    x0 = rng.uniform(-1.0, 1.0, shape)
    proj = Tensor(rng.uniform(0.5, 1.5, shape))

    def roundtrip(x):
        z = ifft2d(fft2d(ComplexTensor.from_real(x)))
        return reduce_mean(add(mul(z.re, proj), mul(z.im, proj)))

    results.append(_check("fft_roundtrip", roundtrip, x0))


def _module_checks(results: list[CheckResult]) -> None:
    """Input gradients through each architecture module as a whole.

    The individual conv and fft rules are already checked above; these runs
    confirm the composed forms (branch sums, gated products, spectral
    mixing) chain their backwards correctly. Parameters are jittered off
    their init values so no branch is accidentally muted; the spectral
    module's blend scalars in particular start at the exact-identity point
    where the transform path would contribute nothing to the input grad.
    """
    cases = [
        ("csc", lambda b: CscCore("m", b, 2, "l1"), (1, 2, 6, 6)),
        ("lka", lambda b: LkaCore("m", b, 2, "l1"), (1, 2, 8, 8)),
        ("fdpa", lambda b: FdpaCore("m", b, 2, "l1"), (1, 2, 6, 5)),
        ("sdca", lambda b: SdcaCore("m", b, 3), (1, 3, 5, 5)),
        ("hda", lambda b: HdaCore("m", b, 2, "l1", True, True), (1, 2, 5, 4)),
    ]
    for idx, (name, factory, xshape) in enumerate(cases):
        rng = np.random.default_rng(600 + idx)
        store = ParameterStore()
        core = factory(_Builder(store, seed=700 + idx, dtype=np.float64))
        for pname, p in store.items():
            if pname.endswith(".alpha"):
                p.data = np.full_like(p.data, 0.6)
            elif pname.endswith(".beta"):
                p.data = np.full_like(p.data, 0.8)
            else:
                p.data = p.data + rng.uniform(-0.05, 0.05, p.data.shape)
        x0 = rng.uniform(-1.0, 1.0, xshape)
        proj = Tensor(rng.uniform(0.5, 1.5, xshape))
        results.append(_check(name, lambda x: reduce_mean(mul(core(x), proj)), x0))


def _objective_checks(results: list[CheckResult]) -> None:
    rng = np.random.default_rng(404)

    tgt = rng.uniform(0.1, 0.9, (2, 3, 6, 6))
    near = tgt + rng.uniform(-0.4, 0.4, tgt.shape)
    results.append(_check("smooth_l1_quad", lambda x: smooth_l1(x, Tensor(tgt)), near))
    far = tgt + np.where(rng.random(tgt.shape) < 0.5, -1.0, 1.0) * rng.uniform(1.2, 1.8, tgt.shape)
    results.append(_check("smooth_l1_linear", lambda x: smooth_l1(x, Tensor(tgt)), far))

    img_t = rng.uniform(0.1, 0.9, (1, 2, 12, 12))
    img_x = np.clip(img_t + rng.uniform(-0.08, 0.08, img_t.shape), 0.05, 0.95)
    results.append(_check("ssim", lambda x: ssim_graph(x, Tensor(img_t)), img_x))

    # tighter step: the color path multiplies pixel perturbations by a few
    # hundred before the chroma sqrt and variance, so the quotient's
    # eps^2-scaled truncation term needs the smaller step to sink below the
    # tolerance (the analytic gradient itself involves no step at all)
    results.append(
        _check("uciqe_diff", lambda x: uciqe_diff(x), _uciqe_probe(rng, (1, 3, 8, 8)), eps=1e-5)
    )

    # tighter still: the three weighted terms nearly cancel at some pixels,
    # and the surviving gradient there is small enough that even the 1e-5
    # step's truncation would swamp the relative comparison
    comp_t = rng.uniform(0.2, 0.8, (1, 3, 12, 12))
    comp_x = _uciqe_probe(rng, (1, 3, 12, 12))
    results.append(
        _check("composite", lambda x: composite_loss(x, Tensor(comp_t)), comp_x, eps=1e-6)
    )


def _uciqe_probe(rng: np.random.Generator, shape) -> np.ndarray:
    """Mildly tinted image conditioned for finite-difference probing.

    Several things have to hold at once. The quality score must land inside
    (0, 1) so the objective's output clip is inactive and gradients are
    live; faint tints keep the chroma spread small enough for that. Every
    pixel must keep clearly nonzero chroma, because the chroma sqrt's
    curvature explodes near gray; the tint floor provides that. The tint
    comes in two strengths assigned half-and-half, so no pixel's chroma
    sits near the image mean, where the spread term's first-order signal
    vanishes while its curvature does not. And every data-dependent
    selection needs a margin: channel values stay separated per pixel (the
    saturation max/min cannot change owner under the fd step) and the
    darkest/brightest pixels are pushed clear of the runners-up (the 1%
    luminance selections cannot change membership either).
    """
    from .metrics import srgb_to_lab

    base = rng.uniform(0.55, 0.75, (shape[0], 1) + shape[2:])
    npix = shape[2] * shape[3]
    strong = (rng.permutation(npix) < npix // 2).reshape(1, 1, shape[2], shape[3])
    mag = np.where(strong, 0.019, 0.0095)
    tint = np.array([1.0, 0.0, -1.0]).reshape(1, 3, 1, 1) * mag
    x = np.clip(base + tint + rng.uniform(-0.002, 0.002, shape), 0.05, 0.95)

    # pull the L extremes clear of the field: the darkest pixel becomes a
    # fixed dim triple (separated channels, all below the gamma knee with
    # margin, which also exercises the linear branch), the brightest moves
    # halfway toward white (preserving its channel gaps)
    lum = srgb_to_lab(x)[0, 0]
    rows, cols = np.unravel_index(np.argsort(lum, axis=None)[[0, -1]], lum.shape)
    dark = x[0, :, rows[0], cols[0]]
    x[0, :, rows[0], cols[0]] = np.array([0.020, 0.029, 0.038])[np.argsort(np.argsort(dark))]
    x[0, :, rows[1], cols[1]] = 1.0 - 0.5 * (1.0 - x[0, :, rows[1], cols[1]])
    return x


def _network_check(results: list[CheckResult], n_entries: int = 36) -> None:
    """Spot-check d(loss)/d(param) through the whole network."""
    net = PolyKernelNet(NetworkConfig(), seed=3, dtype=np.float64)
    rng = np.random.default_rng(505)
    x0 = rng.uniform(0.2, 0.8, (1, 3, 16, 16))
    y0 = rng.uniform(0.2, 0.8, (1, 3, 16, 16))

    def loss_value() -> float:
        return composite_loss(net(Tensor(x0)), Tensor(y0)).item()

    net.zero_grad()
    with Tape() as tape:
        tape.backward(composite_loss(net(Tensor(x0)), Tensor(y0)))

    items = list(net.params.items())
    worst = 0.0
    for _ in range(n_entries):
        name, p = items[int(rng.integers(len(items)))]
        idx = int(rng.integers(p.size))
        flat = p.data.reshape(-1)
        keep = flat[idx]
        flat[idx] = keep + FD_EPS
        up = loss_value()
        flat[idx] = keep - FD_EPS
        down = loss_value()
        flat[idx] = keep
        fd = (up - down) / (2.0 * FD_EPS)
        got = float(p.grad.reshape(-1)[idx])
        rel = abs(got - fd) / (abs(got) + abs(fd) + 1e-8)
        if not np.isfinite(rel):
            rel = float("inf")
        worst = max(worst, rel)
    results.append(CheckResult("network_params", worst))


def run_suite(include_network: bool = True) -> list[CheckResult]:
    results: list[CheckResult] = []
    _elementwise_checks(results)
    _reduction_checks(results)
    _conv_checks(results)
    _spectral_checks(results)
    _module_checks(results)
    _objective_checks(results)
    if include_network:
        _network_check(results)
    return results


def suite_passed(results: list[CheckResult]) -> bool:
    return all(r.passed for r in results)
