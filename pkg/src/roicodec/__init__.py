"""ROI-conditioned learned image codec on a small numpy autodiff engine."""
from .bitstream import Bitstream, BitstreamError, ModelMismatchError, decode_image, encode_image, model_hash
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import attention_dump, bpp_measure, psnr, rd_curve_csv, roi_psnr
from .model import PRESETS, ModelConfig, RoiCodec, build_model, decode_latents, encode_latents, lambda_map
from .nn import count_params
from .tensor import Tensor, default_dtype, no_grad
from .training import TrainConfig, parse_train_config, rd_loss, train

__version__ = "0.1.0"

__all__ = [
    "Bitstream",
    "BitstreamError",
    "ModelConfig",
    "ModelMismatchError",
    "PRESETS",
    "RoiCodec",
    "Tensor",
    "TrainConfig",
    "attention_dump",
    "bpp_measure",
    "build_model",
    "count_params",
    "decode_image",
    "decode_latents",
    "default_dtype",
    "encode_image",
    "encode_latents",
    "lambda_map",
    "load_checkpoint",
    "model_hash",
    "no_grad",
    "parse_train_config",
    "psnr",
    "rd_curve_csv",
    "rd_loss",
    "roi_psnr",
    "save_checkpoint",
    "train",
]
