"""The restoration network: a 3-level residual U-Net with pluggable cores.

Every stage is the same host shape,

    y = x + mix_out(core(gelu(mix_in(x))))

where ``mix_in``/``mix_out`` are dense 3x3 convs and ``core`` is the
stage-specific operator: a hybrid spectral/channel attention pair (HDA) at
full resolution, large-kernel attention (LKA) at the middle scales, and a
cross-shaped multi-branch convolution (CSC) in the bottleneck. Each core can
be toggled off in ``NetworkConfig``; its host block stays, the core
collapses to the identity, and its parameters are simply never allocated.

Downsampling is a strided 3x3 conv doubling channels; upsampling is a 1x1
conv plus depth-to-space halving them. Encoder features join the decoder by
addition. The head's 3x3 output is added to the network input (global
residual); inference additionally clips to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import (
    ConvSpec,
    WeightBundle,
    downsample_block,
    downsample_spec,
    global_avg_pool,
    init_weights,
    upsample_block,
    upsample_spec,
)
from .spectral import ComplexTensor, fft2d, ifft2d
from .tensor import (
    DEFAULT_DTYPE,
    Scalar,
    ShapeError,
    Tensor,
    add,
    clamp,
    gelu,
    mul,
    sigmoid,
)

STRIP_KERNEL = 31
LKA_LOCAL_KERNEL = 5
LKA_SPREAD_KERNEL = 7
LKA_SPREAD_DILATION = 3
RESIDUAL_SCALE = 0.1

_CONFIG_BOOLS = ("hda_enabled", "fdpa_enabled", "sdca_enabled", "lka_enabled", "csc_enabled")


@dataclass
class NetworkConfig:
    """Channel width plus per-core toggles.

    ``fdpa_enabled``/``sdca_enabled`` gate the two halves of the hybrid
    block and only take effect while ``hda_enabled`` is on.
    """

    base_channels: int = 36
    hda_enabled: bool = True
    fdpa_enabled: bool = True
    sdca_enabled: bool = True
    lka_enabled: bool = True
    csc_enabled: bool = True

    def validate(self) -> None:
        if not isinstance(self.base_channels, int) or self.base_channels < 1:
            raise ValueError(f"base_channels must be a positive int, got {self.base_channels!r}")
        for key in _CONFIG_BOOLS:
            if not isinstance(getattr(self, key), bool):
                raise ValueError(f"{key} must be a bool, got {getattr(self, key)!r}")

    @property
    def fdpa_active(self) -> bool:
        return self.hda_enabled and self.fdpa_enabled

    @property
    def sdca_active(self) -> bool:
        return self.hda_enabled and self.sdca_enabled

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            **{key: getattr(self, key) for key in _CONFIG_BOOLS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {"base_channels", *_CONFIG_BOOLS}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


class ParameterStore:
    """Ordered name -> Tensor registry for everything the optimizer sees."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()


class _Builder:
    """Allocates layers in a fixed order and records the analytic plan.

    Each conv gets its own RNG streamed off (master seed, creation index),
    so weight init is reproducible and independent of array shapes. The plan
    (spec + which resolution the layer runs at) is what the parameter/MAC
    counter walks, so it stays in lockstep with the layers actually built.
    """

    def __init__(self, store: ParameterStore, seed: int, dtype):
        self.store = store
        self.seed = int(seed)
        self.dtype = dtype
        self.counter = 0
        self.plan: list[tuple[str, ConvSpec, str]] = []
        self.scalar_names: list[str] = []
        self.fft_sites: list[tuple[str, int]] = []

    def conv(self, name: str, spec: ConvSpec, stage: str) -> WeightBundle:
        bundle = init_weights(spec, name, [self.seed, self.counter], self.dtype)
        self.counter += 1
        self.store.register(f"{name}.weight", bundle.weight)
        if bundle.bias is not None:
            self.store.register(f"{name}.bias", bundle.bias)
        self.plan.append((name, spec, stage))
        return bundle

    def scalar(self, name: str, value: float) -> Scalar:
        t = Scalar(value, requires_grad=True, dtype=self.dtype)
        self.counter += 1
        self.store.register(name, t)
        self.scalar_names.append(name)
        return t


# --------------------------------------------------------------------------
# cores


def csc_forward(x: Tensor, dw_col, dw_row, dw_full, dw_point, pw) -> Tensor:
    """Cross-shaped conv: residual point-wise mix of summed strip branches.

    The four depth-wise branches (31x1, 1x31, 31x31, 1x1) are additive, so
    together they equal one depth-wise conv whose kernel is the sum of the
    branch kernels embedded at the shared center.
    """
    s = add(add(dw_col(x), dw_row(x)), add(dw_full(x), dw_point(x)))
    return add(x, pw(gelu(s)))


def lka_attention(x: Tensor, dw_local, dw_spread, pw) -> Tensor:
    """The attention map: 5x5 depth-wise, then dilated 7x7, then 1x1."""
    return pw(dw_spread(dw_local(x)))


def lka_forward(x: Tensor, dw_local, dw_spread, pw) -> Tensor:
    """Large-kernel attention: gate x by a 23x23-support response to itself."""
    return mul(lka_attention(x, dw_local, dw_spread, pw), x)


def fdpa_forward(x: Tensor, mix_a, mix_b, alpha: Scalar, beta: Scalar) -> Tensor:
    """Spectral gating: scale the Fourier spectrum of one projection of x by
    another (spatial) projection, come back with the real part, then blend
    ``alpha * filtered + beta * x``. With the init alpha=0, beta=1 the op is
    exactly the identity.
    """
    z = fft2d(ComplexTensor.from_real(mix_a(x)))
    gate = mix_b(x)
    y = ifft2d(ComplexTensor(mul(z.re, gate), mul(z.im, gate)))
    return add(mul(y.re, alpha), mul(x, beta))


def sdca_forward(x: Tensor, gate_conv) -> Tensor:
    """Squeeze-style channel gate: sigmoid(1x1(global mean)) scales x."""
    return mul(sigmoid(gate_conv(global_avg_pool(x))), x)


def hda_forward(x: Tensor, fdpa_core=None, sdca_core=None) -> Tensor:
    """Hybrid block: spectral gating then channel gating; either may be off."""
    if fdpa_core is not None:
        x = fdpa_core(x)
    if sdca_core is not None:
        x = sdca_core(x)
    return x


class IdentityCore:
    def __call__(self, x: Tensor) -> Tensor:
        return x


class CscCore:
    def __init__(self, name: str, b: _Builder, channels: int, stage: str):
        k = STRIP_KERNEL
        dw = dict(groups=channels)
        self.dw_col = b.conv(f"{name}.dw_col", ConvSpec(channels, channels, (k, 1), **dw), stage)
        self.dw_row = b.conv(f"{name}.dw_row", ConvSpec(channels, channels, (1, k), **dw), stage)
        self.dw_full = b.conv(f"{name}.dw_full", ConvSpec(channels, channels, (k, k), **dw), stage)
        self.dw_point = b.conv(f"{name}.dw_point", ConvSpec(channels, channels, (1, 1), **dw), stage)
        self.pw = b.conv(f"{name}.pw", ConvSpec(channels, channels, (1, 1)), stage)

    def __call__(self, x: Tensor) -> Tensor:
        return csc_forward(x, self.dw_col, self.dw_row, self.dw_full, self.dw_point, self.pw)


class LkaCore:
    def __init__(self, name: str, b: _Builder, channels: int, stage: str):
        self.dw_local = b.conv(
            f"{name}.dw_local",
            ConvSpec(channels, channels, (LKA_LOCAL_KERNEL, LKA_LOCAL_KERNEL), groups=channels),
            stage,
        )
        self.dw_spread = b.conv(
            f"{name}.dw_spread",
            ConvSpec(
                channels,
                channels,
                (LKA_SPREAD_KERNEL, LKA_SPREAD_KERNEL),
                dilation=LKA_SPREAD_DILATION,
                groups=channels,
            ),
            stage,
        )
        self.pw = b.conv(f"{name}.pw", ConvSpec(channels, channels, (1, 1)), stage)

    def __call__(self, x: Tensor) -> Tensor:
        return lka_forward(x, self.dw_local, self.dw_spread, self.pw)


class FdpaCore:
    def __init__(self, name: str, b: _Builder, channels: int, stage: str):
        self.mix_a = b.conv(f"{name}.mix_a", ConvSpec(channels, channels, (1, 1)), stage)
        self.mix_b = b.conv(f"{name}.mix_b", ConvSpec(channels, channels, (1, 1)), stage)
        self.alpha = b.scalar(f"{name}.alpha", 0.0)
        self.beta = b.scalar(f"{name}.beta", 1.0)
        b.fft_sites.append((stage, channels))

    def __call__(self, x: Tensor) -> Tensor:
        return fdpa_forward(x, self.mix_a, self.mix_b, self.alpha, self.beta)


class SdcaCore:
    def __init__(self, name: str, b: _Builder, channels: int):
        self.gate = b.conv(f"{name}.gate", ConvSpec(channels, channels, (1, 1)), "pool")

    def __call__(self, x: Tensor) -> Tensor:
        return sdca_forward(x, self.gate)


class HdaCore:
    def __init__(self, name: str, b: _Builder, channels: int, stage: str, use_fdpa: bool, use_sdca: bool):
        self.fdpa = FdpaCore(f"{name}.fdpa", b, channels, stage) if use_fdpa else None
        self.sdca = SdcaCore(f"{name}.sdca", b, channels) if use_sdca else None

    def __call__(self, x: Tensor) -> Tensor:
        return hda_forward(x, self.fdpa, self.sdca)


class ResidualBlock:
    """Host stage: y = x + scale * mix_out(core(gelu(mix_in(x)))).

    The fixed branch scale keeps activations near the trunk's magnitude at
    init; without it the dozen stacked branches compound to a gain in the
    hundreds and the first training steps are spent undoing the blowup.
    """

    def __init__(self, name: str, b: _Builder, channels: int, stage: str, core_factory=None):
        self.mix_in = b.conv(f"{name}.mix_in", ConvSpec(channels, channels, (3, 3)), stage)
        self.core = core_factory(f"{name}.core", b) if core_factory else IdentityCore()
        self.mix_out = b.conv(f"{name}.mix_out", ConvSpec(channels, channels, (3, 3)), stage)

    def __call__(self, x: Tensor) -> Tensor:
        return add(x, mul(self.mix_out(self.core(gelu(self.mix_in(x)))), RESIDUAL_SCALE))


# --------------------------------------------------------------------------
# the network


class PolyKernelNet:
    """Encoder, bottleneck, decoder; see the module docstring for the map."""

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0, dtype=DEFAULT_DTYPE):
        config = config or NetworkConfig()
        config.validate()
        self.config = config
        self.params = ParameterStore()
        b = _Builder(self.params, seed, dtype)
        c1 = config.base_channels
        c2, c3 = 2 * c1, 4 * c1

        def hda(name, builder):
            return HdaCore(name, builder, c1, "l1", config.fdpa_active, config.sdca_active)

        def lka(channels, stage):
            return lambda name, builder: LkaCore(name, builder, channels, stage)

        def csc(name, builder):
            return CscCore(name, builder, c3, "l3")

        use = config
        self.stem = b.conv("stem", ConvSpec(3, c1, (3, 3)), "l1")
        self.enc1 = ResidualBlock("enc1", b, c1, "l1", hda if use.hda_enabled else None)
        self.down1 = b.conv("down1", downsample_spec(c1), "l1")
        self.enc2 = ResidualBlock("enc2", b, c2, "l2", lka(c2, "l2") if use.lka_enabled else None)
        self.down2 = b.conv("down2", downsample_spec(c2), "l2")
        self.enc3 = ResidualBlock("enc3", b, c3, "l3", lka(c3, "l3") if use.lka_enabled else None)
        self.mid = ResidualBlock("mid", b, c3, "l3", csc if use.csc_enabled else None)
        self.dec3 = ResidualBlock("dec3", b, c3, "l3", lka(c3, "l3") if use.lka_enabled else None)
        self.up2 = b.conv("up2", upsample_spec(c3), "l3")
        self.dec2 = ResidualBlock("dec2", b, c2, "l2", lka(c2, "l2") if use.lka_enabled else None)
        self.up1 = b.conv("up1", upsample_spec(c2), "l2")
        self.dec1 = ResidualBlock("dec1", b, c1, "l1", hda if use.hda_enabled else None)
        self.head = b.conv("head", ConvSpec(c1, 3, (3, 3)), "l1")

        self.plan = b.plan
        self.scalar_names = b.scalar_names
        self.fft_sites = b.fft_sites

    def forward(self, x: Tensor, inference: bool = False, trace: dict | None = None) -> Tensor:
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"expected 3 input channels, got {c}")
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise ShapeError(f"spatial dims must be multiples of 4, got {h}x{w}")

        def note(name, t):
            if trace is not None:
                trace[name] = t.shape
            return t

        t0 = note("stem", self.stem(x))
        e1 = note("enc1", self.enc1(t0))
        e2 = note("enc2", self.enc2(downsample_block(e1, self.down1)))
        e3 = note("enc3", self.enc3(downsample_block(e2, self.down2)))
        m = note("mid", self.mid(e3))
        d3 = note("dec3", self.dec3(m))
        d2 = note("dec2", self.dec2(add(upsample_block(d3, self.up2), e2)))
        d1 = note("dec1", self.dec1(add(upsample_block(d2, self.up1), e1)))
        out = note("head", add(self.head(d1), x))
        if inference:
            out = clamp(out, 0.0, 1.0)
        return out

    __call__ = forward

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def load_param_data(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place (shapes must match exactly)."""
        names = set(self.params.names())
        missing = names - set(arrays)
        extra = set(arrays) - names
        if missing or extra:
            raise ValueError(f"parameter names mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, tensor in self.params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tensor.shape}")
            tensor.data = arr.astype(tensor.dtype)


def network_forward(net: PolyKernelNet, x: Tensor, inference: bool = False) -> Tensor:
    return net.forward(x, inference=inference)


def count_params_macs(config: NetworkConfig, input_size: int | tuple[int, int] = 256) -> tuple[int, int]:
    """Analytic parameter and multiply-accumulate totals for one image.

    Walks the layer plan (specs plus the resolution each runs at) rather
    than allocated arrays, so tests can cross-check it against the actual
    parameter store. FFT cost is charged as 5*HW*log2(HW) multiplies per
    channel per transform, two transforms per spectral core.
    """
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    h, w = input_size
    if h % 4 or w % 4 or h < 4 or w < 4:
        raise ShapeError(f"spatial dims must be multiples of 4, got {h}x{w}")
    net = PolyKernelNet(config, seed=0)
    sizes = {"l1": (h, w), "l2": (h // 2, w // 2), "l3": (h // 4, w // 4), "pool": (1, 1)}
    params = len(net.scalar_names)
    macs = 0.0
    for _, spec, stage in net.plan:
        params += spec.param_count()
        sh, sw = sizes[stage]
        macs += spec.macs(1, sh, sw)
    for stage, channels in net.fft_sites:
        sh, sw = sizes[stage]
        hw = sh * sw
        macs += 2 * channels * 5.0 * hw * math.log2(hw)
    return params, int(round(macs))
