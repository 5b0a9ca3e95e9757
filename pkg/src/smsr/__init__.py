"""Sparse-mask super-resolution on a from-scratch numpy engine.

Modules:
    tensor    NCHW convolution via im2col, pixel shuffle, bicubic, luminance
    autodiff  reverse-mode tape and Adam
    masks     Gumbel-softmax spatial/channel masks and their schedules
    sparse    kernel splitting and gathered-im2col sparse convolution
    model     the network, train/inference forwards, binary container format
    train     training loop
    metrics   PSNR/SSIM, FLOP accounting, benchmarks
"""

from .model import SmsrModel, build_model, forward_infer, forward_train, load_model, save_model
from .train import TrainConfig, preset

__version__ = "0.1.0"

__all__ = ["SmsrModel", "build_model", "forward_infer", "forward_train", "load_model",
           "save_model", "TrainConfig", "preset", "__version__"]
