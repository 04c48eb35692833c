"""Self-describing checkpoint container for the staged model family."""

from __future__ import annotations

from pathlib import Path

import torch

from ..errors import ConfigError
from .staged import StagedNetwork

FORMAT_VERSION = 1


def checkpoint_name(model: str, dataset: str, method: str, fraction: float, seed: int) -> str:
    pct = int(round(fraction * 100))
    return f"{model}_{dataset}_{method}_{pct}pct_seed{seed}.ckpt"


def save_checkpoint(net: StagedNetwork, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "family": net.family,
        "variant": net.variant,
        "num_classes": net.num_classes,
        "stage_names": list(net.stage_names),
        "state_dict": net.state_dict(),
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> StagedNetwork:
    """Rebuild the architecture recorded in the container and load weights."""
    from .resnet import build_resnet
    from .unet import build_unet

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ConfigError(f"{path} is not a checkpoint container (import raw weights "
                          f"with load_external_weights)")
    version = payload["format_version"]
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {version}")
    family = payload["family"]
    if family == "resnet":
        net = build_resnet(payload["variant"], payload["num_classes"])
    elif family == "unet":
        net = build_unet(payload["variant"], payload["num_classes"])
    else:
        raise ConfigError(f"unknown model family {family!r} in {path}")
    net.load_state_dict(payload["state_dict"])
    return net


def load_external_weights(net: StagedNetwork, path) -> StagedNetwork:
    """Import a raw state dict produced outside this package (keys must match)."""
    state = torch.load(Path(path), map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    net.load_state_dict(state)
    return net
