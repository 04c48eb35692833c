"""Base class for stage-partitioned networks with taps and freeze control."""

from __future__ import annotations

import hashlib

import torch.nn as nn

HEAD = "head"  # sentinel accepted by set_trainable_stage


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over parameter names and raw tensor bytes, in registration order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class StagedNetwork(nn.Module):
    """A network split into N sequential tapped stages plus a head.

    Subclasses implement ``stage_members()`` (one tuple of modules per stage,
    in forward order) and ``head_members()``. Freezing operates on whole
    stages: a frozen stage's parameters receive no gradients and optimizers
    built over ``trainable_parameters()`` never see them.
    """

    family = "staged"

    def stage_members(self) -> tuple[tuple[nn.Module, ...], ...]:
        raise NotImplementedError

    def head_members(self) -> tuple[nn.Module, ...]:
        raise NotImplementedError

    @property
    def num_stages(self) -> int:
        return len(self.stage_members())

    @property
    def stage_names(self) -> tuple[str, ...]:
        return tuple(f"stage{i + 1}" for i in range(self.num_stages)) + (HEAD,)

    def _groups(self):
        return list(self.stage_members()) + [self.head_members()]

    def _group_params(self, group):
        for m in group:
            yield from m.parameters()

    @property
    def frozen_mask(self) -> tuple[bool, ...]:
        """Per-stage flags (head last); True when every parameter is frozen."""
        return tuple(
            all(not p.requires_grad for p in self._group_params(g)) for g in self._groups()
        )

    def set_trainable_stage(self, stage) -> "StagedNetwork":
        """Freeze everything except the named stage (1..N) or HEAD."""
        n = self.num_stages
        if stage == HEAD:
            target = n
        elif isinstance(stage, int) and 1 <= stage <= n:
            target = stage - 1
        else:
            raise ValueError(f"stage must be 1..{n} or HEAD, got {stage!r}")
        for i, group in enumerate(self._groups()):
            for p in self._group_params(group):
                p.requires_grad_(i == target)
        return self

    def freeze_all(self) -> "StagedNetwork":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def unfreeze_all(self) -> "StagedNetwork":
        for p in self.parameters():
            p.requires_grad_(True)
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def stage_digests(self) -> dict[str, str]:
        """Digest per stage plus head, for freeze-soundness checks."""
        digests = {}
        for name, group in zip(self.stage_names, self._groups()):
            h = hashlib.sha256()
            for m in group:
                h.update(parameter_digest(m).encode())
            digests[name] = h.hexdigest()
        return digests

    def set_stage_modes(self, trainable_train_mode: bool = True) -> "StagedNetwork":
        """Put frozen stages in eval mode; trainable ones follow the flag."""
        mask = self.frozen_mask
        for frozen, group in zip(mask, self._groups()):
            for m in group:
                m.train(trainable_train_mode and not frozen)
        return self

    def forward_with_taps(self, x):
        """Run the network returning (head output, list of N stage taps)."""
        raise NotImplementedError
