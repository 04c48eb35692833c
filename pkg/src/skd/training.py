"""Training procedures: stagewise distillation plus the five baselines.

Feature-matching phases (stage MSE, hint MSE, FSP, attention, joint) extract
taps from both networks with batch norm in eval mode, i.e. using running
statistics. This makes distillation target the teacher's deployed behavior
and makes a student initialized as an exact teacher copy a true global
minimum (zero loss, zero gradients). Plain task phases train normally.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import torch

from .data import iterate_batches
from .errors import ConfigError, ShapeError
from .losses import (
    attention_loss,
    cross_entropy,
    fsp_loss,
    pixel_cross_entropy,
    simultaneous_loss,
    stage_mse,
)
from .metrics import ConfusionMatrix, top1_accuracy
from .models import HEAD, save_checkpoint
from .models.checkpoint import load_checkpoint

METHODS = ("stagewise", "simultaneous", "traditional", "fsp", "at", "none")
TASKS = ("classification", "segmentation")
SCHEDULES = ("constant", "one_cycle")
HINT_STAGE = 2  # middle-layer hint used by traditional KD


@dataclass
class DistillConfig:
    method: str = "stagewise"
    task: str = "classification"
    epochs_per_stage: int = 5
    learning_rate: float = 1e-4
    schedule: str = "constant"
    seed: int = 0
    data_fraction: float = 1.0
    mse_normalization: str = "batch_only"
    beta: float = 1.0
    batch_size: int = 32
    finetune_backbone_in_head_phase: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; valid: {', '.join(TASKS)}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; valid: {', '.join(SCHEDULES)}")
        if self.epochs_per_stage < 1:
            raise ConfigError("epochs_per_stage must be >= 1")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mse_normalization not in ("batch_only", "full_mean"):
            raise ConfigError(f"unknown mse_normalization {self.mse_normalization!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float | None


@dataclass
class PhaseLog:
    name: str
    kind: str  # distill | task | head
    entries: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0
    stage_digests: dict[str, str] = field(default_factory=dict)
    resumed: bool = False


@dataclass
class TrainLog:
    method: str
    phases: list[PhaseLog] = field(default_factory=list)

    @property
    def total_epochs(self) -> int:
        return sum(len(p.entries) for p in self.phases)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for p in self.phases:
                for e in p.entries:
                    f.write(json.dumps({
                        "phase": p.name, "kind": p.kind, "epoch": e.epoch,
                        "train_loss": e.train_loss, "val_metric": e.val_metric,
                    }) + "\n")


# ---------------------------------------------------------------------------
# helpers


def _require_frozen_teacher(teacher):
    if any(p.requires_grad for p in teacher.parameters()):
        raise ConfigError("teacher must be fully frozen before distillation "
                          "(call teacher.freeze_all())")


def check_tap_compatibility(teacher, student, dataset):
    """Forward one item through both networks and compare tap shapes."""
    x = dataset[0][0].unsqueeze(0)
    teacher.eval(), student.eval()
    with torch.no_grad():
        _, t_taps = teacher.forward_with_taps(x)
        _, s_taps = student.forward_with_taps(x)
    for i, (t, s) in enumerate(zip(t_taps, s_taps)):
        if t.shape != s.shape:
            raise ShapeError(f"tap shape mismatch at stage {i + 1}: "
                             f"teacher {tuple(t.shape)} vs student {tuple(s.shape)}")


def _set_trainable(student, spec):
    if spec == "all":
        student.unfreeze_all()
    elif spec == "backbone":
        student.unfreeze_all()
        for m in student.head_members():
            for p in m.parameters():
                p.requires_grad_(False)
    else:
        student.set_trainable_stage(spec)
    return student.trainable_parameters()


def _apply_modes(student, teacher, kind):
    if teacher is not None:
        teacher.eval()
    if kind in ("distill", "joint"):
        student.eval()  # running-stats feature extraction, grads still flow
    else:
        student.set_stage_modes(trainable_train_mode=True)


def task_loss(logits, labels, task, ignore_index=None):
    if task == "segmentation":
        return pixel_cross_entropy(logits, labels, ignore_index)
    return cross_entropy(logits, labels)


def evaluate(net, dataset, batch_size: int = 64) -> float:
    """Top-1 accuracy (classification) or mean IoU (segmentation) on a split."""
    was_training = net.training
    net.eval()
    preds, labels = [], []
    cm = None
    if dataset.task == "segmentation":
        cm = ConfusionMatrix(dataset.num_classes, ignore_index=dataset.ignore_index)
    with torch.no_grad():
        for xb, yb in iterate_batches(dataset, batch_size, shuffle=False, seed=0):
            out = net(xb)
            if cm is None:
                preds.append(out.argmax(dim=1))
                labels.append(yb)
            else:
                cm.update(yb.numpy(), out.argmax(dim=1).numpy())
    net.train(was_training)
    if cm is not None:
        return cm.mean_iou()
    return top1_accuracy(torch.cat(preds), torch.cat(labels))


def _mean_loss_on(dataset, loss_fn, batch_size) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for xb, yb in iterate_batches(dataset, batch_size, shuffle=False, seed=0):
            total += float(loss_fn(xb, yb)) * len(xb)
            count += len(xb)
    return total / max(count, 1)


def _run_phase(student, teacher, data, cfg, *, name, kind, trainable, loss_fn,
               log, run_dir=None, phase_index=0):
    """One optimization phase over epochs_per_stage epochs.

    ``loss_fn(xb, yb)`` must close over student/teacher and return a scalar.
    When run_dir holds a checkpoint for this phase the phase is skipped and
    the weights are loaded instead (mid-run resume).
    """
    phase = PhaseLog(name=name, kind=kind)
    ckpt_path = None
    if run_dir is not None:
        ckpt_path = run_dir / "checkpoints" / f"phase{phase_index:02d}_{name}.ckpt"
        if ckpt_path.exists():
            restored = load_checkpoint(ckpt_path)
            student.load_state_dict(restored.state_dict())
            phase.resumed = True
            phase.stage_digests = student.stage_digests()
            log.phases.append(phase)
            return
    params = _set_trainable(student, trainable)
    if not params:
        raise ConfigError(f"phase {name}: nothing to train")
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    steps_per_epoch = max(1, math.ceil(len(data.train) / cfg.batch_size))
    sched = None
    if cfg.schedule == "one_cycle":
        sched = torch.optim.lr_scheduler.OneCycleLR(
            opt, max_lr=cfg.learning_rate, total_steps=steps_per_epoch * cfg.epochs_per_stage)
    start = time.perf_counter()
    for epoch in range(cfg.epochs_per_stage):
        _apply_modes(student, teacher, kind)
        running, seen = 0.0, 0
        for xb, yb in iterate_batches(data.train, cfg.batch_size, shuffle=True,
                                      seed=cfg.seed, epoch=epoch, train_mode=True):
            loss = loss_fn(xb, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            running += float(loss.detach()) * len(xb)
            seen += len(xb)
        if kind == "distill":
            # pure matching phase: report the held-out matching loss
            val = _mean_loss_on(data.val, loss_fn, cfg.batch_size)
        else:
            val = evaluate(student, data.val, cfg.batch_size)
        phase.entries.append(EpochRecord(epoch + 1, running / max(seen, 1), val))
    phase.wall_time = time.perf_counter() - start
    phase.stage_digests = student.stage_digests()
    if ckpt_path is not None:
        save_checkpoint(student, ckpt_path, meta={"phase": name})
    log.phases.append(phase)


# ---------------------------------------------------------------------------
# loss closures


def _student_taps(student, xb):
    _, taps = student.forward_with_taps(xb)
    return taps


def _teacher_taps(teacher, xb):
    with torch.no_grad():
        _, taps = teacher.forward_with_taps(xb)
    return taps


# ---------------------------------------------------------------------------
# the six procedures


def train_stagewise(teacher, student, data, cfg, run_dir=None):
    """Train one stage at a time against the teacher's taps, then the head
    on labels with no teacher involvement."""
    _require_frozen_teacher(teacher)
    check_tap_compatibility(teacher, student, data.train)
    log = TrainLog(method="stagewise")
    ignore = data.train.ignore_index

    for s in range(1, student.num_stages + 1):
        def mse_at_stage(xb, yb, s=s):
            t = _teacher_taps(teacher, xb)[s - 1]
            st = _student_taps(student, xb)[s - 1]
            return stage_mse(t, st, cfg.mse_normalization, stage_index=s)

        _run_phase(student, teacher, data, cfg, name=f"stage{s}", kind="distill",
                   trainable=s, loss_fn=mse_at_stage, log=log, run_dir=run_dir,
                   phase_index=s - 1)

    def head_loss(xb, yb):
        return task_loss(student(xb), yb, cfg.task, ignore)

    trainable = "all" if cfg.finetune_backbone_in_head_phase else HEAD
    _run_phase(student, None, data, cfg, name="head", kind="head",
               trainable=trainable, loss_fn=head_loss, log=log, run_dir=run_dir,
               phase_index=student.num_stages)
    return student, log


def train_simultaneous(teacher, student, data, cfg, run_dir=None):
    """Single joint phase: all stage MSEs (averaged over stages) plus the
    task loss, every parameter trainable."""
    _require_frozen_teacher(teacher)
    check_tap_compatibility(teacher, student, data.train)
    log = TrainLog(method="simultaneous")
    ignore = data.train.ignore_index

    def joint(xb, yb):
        t_taps = _teacher_taps(teacher, xb)
        logits, s_taps = student.forward_with_taps(xb)
        if cfg.task == "segmentation":
            mse = torch.stack([stage_mse(t, s, "batch_only", stage_index=i + 1)
                               for i, (t, s) in enumerate(zip(t_taps, s_taps))]).mean()
            return mse + pixel_cross_entropy(logits, yb, ignore)
        return simultaneous_loss(t_taps, s_taps, logits, yb)

    _run_phase(student, teacher, data, cfg, name="joint", kind="joint",
               trainable="all", loss_fn=joint, log=log, run_dir=run_dir)
    return student, log


def train_traditional(teacher, student, data, cfg, run_dir=None):
    """Hint phase on the middle (stage-2) tap, then plain task training."""
    _require_frozen_teacher(teacher)
    check_tap_compatibility(teacher, student, data.train)
    log = TrainLog(method="traditional")
    ignore = data.train.ignore_index

    def hint(xb, yb):
        t = _teacher_taps(teacher, xb)[HINT_STAGE - 1]
        st = _student_taps(student, xb)[HINT_STAGE - 1]
        return stage_mse(t, st, cfg.mse_normalization, stage_index=HINT_STAGE)

    _run_phase(student, teacher, data, cfg, name="hint", kind="distill",
               trainable="backbone", loss_fn=hint, log=log, run_dir=run_dir, phase_index=0)

    def ce(xb, yb):
        return task_loss(student(xb), yb, cfg.task, ignore)

    _run_phase(student, None, data, cfg, name="task", kind="task",
               trainable="all", loss_fn=ce, log=log, run_dir=run_dir, phase_index=1)
    return student, log


def train_fsp(teacher, student, data, cfg, run_dir=None):
    """Match inner-product (FSP) matrices of consecutive stage pairs, then
    plain task training."""
    _require_frozen_teacher(teacher)
    check_tap_compatibility(teacher, student, data.train)
    log = TrainLog(method="fsp")
    ignore = data.train.ignore_index

    def fsp(xb, yb):
        t_taps = _teacher_taps(teacher, xb)
        s_taps = _student_taps(student, xb)
        return fsp_loss(s_taps, t_taps)

    _run_phase(student, teacher, data, cfg, name="fsp", kind="distill",
               trainable="backbone", loss_fn=fsp, log=log, run_dir=run_dir, phase_index=0)

    def ce(xb, yb):
        return task_loss(student(xb), yb, cfg.task, ignore)

    _run_phase(student, None, data, cfg, name="task", kind="task",
               trainable="all", loss_fn=ce, log=log, run_dir=run_dir, phase_index=1)
    return student, log


def train_at(teacher, student, data, cfg, run_dir=None):
    """Single phase: task loss plus attention-map matching across all taps."""
    _require_frozen_teacher(teacher)
    check_tap_compatibility(teacher, student, data.train)
    log = TrainLog(method="at")
    ignore = data.train.ignore_index

    def joint(xb, yb):
        t_taps = _teacher_taps(teacher, xb)
        logits, s_taps = student.forward_with_taps(xb)
        ce = task_loss(logits, yb, cfg.task, ignore)
        if cfg.beta == 0:
            return ce
        return ce + attention_loss(s_taps, t_taps, beta=cfg.beta)

    _run_phase(student, teacher, data, cfg, name="joint", kind="joint",
               trainable="all", loss_fn=joint, log=log, run_dir=run_dir)
    return student, log


def train_no_teacher(student, data, cfg, run_dir=None):
    """Plain task training, no distillation."""
    log = TrainLog(method="none")
    ignore = data.train.ignore_index

    def ce(xb, yb):
        return task_loss(student(xb), yb, cfg.task, ignore)

    _run_phase(student, None, data, cfg, name="task", kind="task",
               trainable="all", loss_fn=ce, log=log, run_dir=run_dir)
    return student, log


def run_method(method, teacher, student, data, cfg, run_dir=None):
    """Dispatch to the named procedure; teacher may be None for 'none'."""
    if method == "none":
        return train_no_teacher(student, data, cfg, run_dir)
    if teacher is None:
        raise ConfigError(f"method {method!r} needs a teacher")
    fn = {
        "stagewise": train_stagewise,
        "simultaneous": train_simultaneous,
        "traditional": train_traditional,
        "fsp": train_fsp,
        "at": train_at,
    }[method]
    return fn(teacher, student, data, cfg, run_dir)
