"""Underwater image restoration with polymorphic large-kernel convolutions.

A self-contained numpy stack: rank-4 tensor autodiff, convolution and FFT
primitives, the restoration network, its composite objective, metrics,
training loop, and a small CLI.
"""

from .arch import NetworkConfig, PolyKernelNet, count_params_macs, network_forward
from .config import ConfigError, resolve_config
from .gradcheck import run_suite, suite_passed
from .images import ImageError, load_image, load_pairs, pad_to_multiple, save_image
from .losses import composite_loss, composite_loss_terms, smooth_l1, ssim_loss, uciqe_loss
from .metrics import MetricReport, MetricRow, psnr, srgb_to_lab, ssim, uciqe
from .nn import ConvSpec, conv2d, conv2d_reference, init_weights
from .spectral import ComplexTensor, dft2d_naive, fft2d, ifft2d
from .tensor import Tape, Tensor, finite_diff_grad, grad_rel_err
from .training import (
    AdamW,
    CheckpointError,
    TrainConfig,
    TrainingError,
    checkpoint_load,
    checkpoint_save,
    cosine_lr,
    load_network,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "CheckpointError",
    "ComplexTensor",
    "ConfigError",
    "ConvSpec",
    "ImageError",
    "MetricReport",
    "MetricRow",
    "NetworkConfig",
    "PolyKernelNet",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "checkpoint_load",
    "checkpoint_save",
    "composite_loss",
    "composite_loss_terms",
    "conv2d",
    "conv2d_reference",
    "cosine_lr",
    "count_params_macs",
    "dft2d_naive",
    "fft2d",
    "finite_diff_grad",
    "grad_rel_err",
    "ifft2d",
    "init_weights",
    "load_image",
    "load_network",
    "load_pairs",
    "network_forward",
    "pad_to_multiple",
    "psnr",
    "resolve_config",
    "run_suite",
    "save_image",
    "smooth_l1",
    "srgb_to_lab",
    "ssim",
    "ssim_loss",
    "suite_passed",
    "train_loop",
    "uciqe",
    "uciqe_loss",
]
