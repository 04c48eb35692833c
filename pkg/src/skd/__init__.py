"""Stagewise knowledge distillation for compact ResNet and U-Net students."""

__version__ = "0.1.0"

from .models import HEAD, build_resnet, build_unet, count_params_flops, set_trainable_stage  # noqa: E402,F401
from .training import DistillConfig  # noqa: E402,F401
