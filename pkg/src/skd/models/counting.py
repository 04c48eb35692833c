"""Parameter and FLOP counting via shape-capturing forward hooks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

FLOP_CONVENTION = "1 multiply-add = 2 FLOPs; conv and linear layers only"


@dataclass(frozen=True)
class ParamFlopReport:
    parameter_count: int
    flop_count: int
    input_shape: tuple[int, int, int]
    flop_convention: str = FLOP_CONVENTION


def count_params_flops(net: nn.Module, input_shape: tuple[int, int, int] = (3, 224, 224)) -> ParamFlopReport:
    """Deterministic counts for one forward pass at the given input shape."""
    flops = 0

    def conv_hook(module, inputs, output):
        nonlocal flops
        macs_per_position = (
            module.in_channels // module.groups
            * module.kernel_size[0]
            * module.kernel_size[1]
        )
        out_positions = output.shape[1] * output.shape[2] * output.shape[3]
        flops += 2 * macs_per_position * out_positions

    def linear_hook(module, inputs, output):
        nonlocal flops
        flops += 2 * module.in_features * module.out_features

    handles = []
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    was_training = net.training
    try:
        net.eval()
        with torch.no_grad():
            net(torch.zeros(1, *input_shape))
    finally:
        for h in handles:
            h.remove()
        net.train(was_training)
    params = sum(p.numel() for p in net.parameters())
    return ParamFlopReport(params, flops, tuple(input_shape))
