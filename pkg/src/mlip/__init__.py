"""Image-text dual encoder with spectral and spatial token alignment, in numpy."""
from .config import ModelConfig, RunConfig, load_config, parse_config
from .model import ModelState, encode_image, encode_text, forward_losses, init_model
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"
