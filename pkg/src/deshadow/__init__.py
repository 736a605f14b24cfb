"""Document shadow removal on a Laplacian pyramid.

The low-frequency residual of the pyramid is corrected by an
attention-aggregation network, every high-frequency band by its own gated
transformer, and the result is folded back into a full-resolution image.
"""

from deshadow.image import check_image, read_image, write_image
from deshadow.pyramid import Pyramid, decompose, pyr_down, pyr_up, reconstruct
from deshadow.model import DocDeshadower, ModelConfig, ParamStore, forward
from deshadow.checkpoint import load_checkpoint, save_checkpoint
from deshadow.metrics import LossConfig, MetricsReport, mse_loss, psnr, rmse, ssim, total_loss

__all__ = [
    "DocDeshadower",
    "LossConfig",
    "MetricsReport",
    "ModelConfig",
    "ParamStore",
    "Pyramid",
    "check_image",
    "decompose",
    "forward",
    "load_checkpoint",
    "mse_loss",
    "psnr",
    "pyr_down",
    "pyr_up",
    "read_image",
    "reconstruct",
    "rmse",
    "save_checkpoint",
    "ssim",
    "total_loss",
    "write_image",
]

__version__ = "0.1.0"
