"""Distillation objectives: stage MSE, cross entropy, joint loss, FSP, attention.

All functions are pure, differentiate w.r.t. the student-side tensors, and
work in whatever floating dtype they are given. Feature taps are dense
(batch, channels, height, width) tensors; logits are (batch, classes).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ShapeError

FSP_STAGE_PAIRS = ((0, 1), (1, 2), (2, 3))


def _check_tap_pair(teacher_tap, student_tap, stage_index=None):
    if teacher_tap.shape != student_tap.shape:
        where = "" if stage_index is None else f" at stage {stage_index}"
        raise ShapeError(
            f"teacher/student tap shape mismatch{where}: "
            f"{tuple(teacher_tap.shape)} vs {tuple(student_tap.shape)}"
        )
    if teacher_tap.shape[0] < 1:
        raise ShapeError("empty batch")


def stage_mse(teacher_tap, student_tap, normalization: str = "batch_only", stage_index=None):
    """Squared-error distance between one stage's teacher and student taps.

    ``batch_only`` sums the squared differences over all elements of each
    example and averages over the batch. ``full_mean`` additionally divides
    by the number of elements per example, so magnitudes are comparable
    across stages with different feature-map sizes.
    """
    _check_tap_pair(teacher_tap, student_tap, stage_index)
    diff = teacher_tap - student_tap
    per_example = diff.reshape(diff.shape[0], -1).pow(2).sum(dim=1)
    loss = per_example.mean()
    if normalization == "batch_only":
        return loss
    if normalization == "full_mean":
        return loss / diff[0].numel()
    raise ValueError(f"unknown normalization {normalization!r}; use 'batch_only' or 'full_mean'")


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the correct class."""
    if logits.ndim != 2:
        raise ShapeError(f"expected (batch, classes) logits, got {tuple(logits.shape)}")
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range for {logits.shape[1]} classes")
    logp = F.log_softmax(logits, dim=1)
    return -logp.gather(1, labels.view(-1, 1)).mean()


def pixel_cross_entropy(logits, labels, ignore_index: int | None = None):
    """Per-pixel cross entropy for segmentation, mean over non-ignored pixels."""
    if logits.ndim != 4:
        raise ShapeError(f"expected (batch, classes, H, W) logits, got {tuple(logits.shape)}")
    if ignore_index is None:
        return F.cross_entropy(logits, labels.long())
    return F.cross_entropy(logits, labels.long(), ignore_index=ignore_index)


def simultaneous_loss(teacher_taps, student_taps, logits, labels, stage_mses=None):
    """Joint objective: stage MSEs averaged over stages plus cross entropy.

    Equals the mean over stages of the batch_only stage losses plus the
    label term, so a single pair reduces to ``stage_mse + cross_entropy``.
    """
    if len(teacher_taps) == 0:
        raise ValueError("empty tap pair list")
    if len(teacher_taps) != len(student_taps):
        raise ShapeError(f"{len(teacher_taps)} teacher taps vs {len(student_taps)} student taps")
    batch = teacher_taps[0].shape[0]
    for i, (t, s) in enumerate(zip(teacher_taps, student_taps)):
        if t.shape[0] != batch or s.shape[0] != batch:
            raise ShapeError(f"inconsistent batch size at stage {i + 1}")
    terms = [stage_mse(t, s, "batch_only", stage_index=i + 1)
             for i, (t, s) in enumerate(zip(teacher_taps, student_taps))]
    mse = torch.stack(terms).mean()
    if stage_mses is not None:
        stage_mses.extend(float(t) for t in terms)
    return mse + cross_entropy(logits, labels)


def _align_spatial(a, b):
    # Reconcile a 2x (or repeated 2x) downsampling difference by max-pooling
    # the larger map; anything not related by a power of two is an error.
    def halve(x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ShapeError(f"irreconcilable spatial shapes {tuple(a.shape)} vs {tuple(b.shape)}")
        return F.max_pool2d(x, kernel_size=2, stride=2)

    while a.shape[-2:] != b.shape[-2:]:
        if a.shape[-2] > b.shape[-2] and a.shape[-1] > b.shape[-1]:
            a = halve(a)
        elif b.shape[-2] > a.shape[-2] and b.shape[-1] > a.shape[-1]:
            b = halve(b)
        else:
            raise ShapeError(f"irreconcilable spatial shapes {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def fsp_matrix(tap_a, tap_b):
    """Channel-by-channel inner product of two taps of the same network.

    Returns one (C_a, C_b) matrix per batch element, normalized by the
    shared spatial size after alignment.
    """
    if tap_a.shape[0] != tap_b.shape[0]:
        raise ShapeError("taps come from different batch sizes")
    tap_a, tap_b = _align_spatial(tap_a, tap_b)
    h, w = tap_a.shape[-2:]
    return torch.einsum("bphw,bqhw->bpq", tap_a, tap_b) / (h * w)


def fsp_loss(student_taps, teacher_taps, stage_pairs=FSP_STAGE_PAIRS):
    """Mean over stage pairs of the batch-averaged squared Frobenius
    distance between student and teacher FSP matrices."""
    if len(student_taps) != len(teacher_taps):
        raise ShapeError(f"{len(student_taps)} student taps vs {len(teacher_taps)} teacher taps")
    if len(student_taps) < max(max(p) for p in stage_pairs) + 1:
        raise ShapeError(f"need taps for stages up to {max(max(p) for p in stage_pairs) + 1}")
    terms = []
    for a, b in stage_pairs:
        gs = fsp_matrix(student_taps[a], student_taps[b])
        gt = fsp_matrix(teacher_taps[a], teacher_taps[b])
        terms.append((gs - gt).pow(2).sum(dim=(1, 2)).mean())
    return torch.stack(terms).mean()


def attention_map(tap, p: float = 2):
    """Channel-aggregated spatial saliency, flattened and l2-normalized.

    Sums |activation|^p over channels per spatial position, flattens each
    example, and scales it to unit norm. All-zero maps are left at zero.
    """
    amap = tap.abs().pow(p).sum(dim=1).reshape(tap.shape[0], -1)
    norm = amap.norm(dim=1, keepdim=True)
    return amap / norm.clamp_min(torch.finfo(amap.dtype).tiny)


def attention_loss(student_taps, teacher_taps, beta: float = 1.0, p: float = 2):
    """Sum over stages of the l2 distance between normalized attention maps,
    averaged over the batch and scaled by beta."""
    if len(student_taps) != len(teacher_taps):
        raise ShapeError(f"{len(student_taps)} student taps vs {len(teacher_taps)} teacher taps")
    if len(student_taps) == 0:
        raise ValueError("empty tap pair list")
    total = 0.0
    for i, (s, t) in enumerate(zip(student_taps, teacher_taps)):
        _check_tap_pair(t, s, stage_index=i + 1)
        diff = attention_map(s, p) - attention_map(t, p)
        # clamp keeps the sqrt differentiable when student == teacher exactly
        dist = diff.pow(2).sum(dim=1).clamp_min(1e-24).sqrt()
        total = total + dist.mean()
    return beta * total
