from .checkpoint import checkpoint_name, load_checkpoint, load_external_weights, save_checkpoint
from .counting import FLOP_CONVENTION, ParamFlopReport, count_params_flops
from .resnet import (
    RESNET_STAGE_BLOCKS,
    STAGE_CHANNELS,
    STAGE_NAMES,
    StagedResNet,
    StageSpec,
    build_resnet,
    stage_specs,
)
from .staged import HEAD, StagedNetwork, parameter_digest
from .unet import StagedUNet, build_unet


def set_trainable_stage(net: StagedNetwork, stage) -> StagedNetwork:
    """Functional spelling of StagedNetwork.set_trainable_stage."""
    return net.set_trainable_stage(stage)


__all__ = [
    "HEAD",
    "FLOP_CONVENTION",
    "ParamFlopReport",
    "RESNET_STAGE_BLOCKS",
    "STAGE_CHANNELS",
    "STAGE_NAMES",
    "StagedNetwork",
    "StagedResNet",
    "StagedUNet",
    "StageSpec",
    "build_resnet",
    "build_unet",
    "checkpoint_name",
    "count_params_flops",
    "load_checkpoint",
    "load_external_weights",
    "parameter_digest",
    "save_checkpoint",
    "set_trainable_stage",
    "stage_specs",
]
