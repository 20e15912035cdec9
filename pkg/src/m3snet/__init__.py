"""Mountain-shaped single-stage image restoration network, desk scale.

A numpy library: minimal autodiff tensor kernel, activation-free gated
blocks, the full fusion-lattice/attention-bridge architecture, PSNR-loss
training, and benchmark-style metrics. See the demos/ scripts for guided
tours of each capability and the `m3snet` CLI for operator commands.
"""

from . import tensor
from .blocks import NAFBlock, SCA, MultiHeadAttention, simple_gate
from .data import DegradationSpec, ImagePair, degrade, load_dataset
from .metrics import (MetricReport, dssim_from_ssim, error_reduction, psnr_loss,
                      psnr_metric, rmse_from_psnr, ssim_metric)
from .model import M3SNet, ModelConfig, count_params, estimate_macs
from .tensor import Tensor, backward, no_grad
from .trainer import TrainState, cosine_lr, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "tensor", "Tensor", "backward", "no_grad",
    "NAFBlock", "SCA", "MultiHeadAttention", "simple_gate",
    "M3SNet", "ModelConfig", "count_params", "estimate_macs",
    "MetricReport", "psnr_loss", "psnr_metric", "ssim_metric",
    "rmse_from_psnr", "dssim_from_ssim", "error_reduction",
    "DegradationSpec", "ImagePair", "degrade", "load_dataset",
    "TrainState", "cosine_lr", "train", "evaluate",
    "save_checkpoint", "load_checkpoint",
]
