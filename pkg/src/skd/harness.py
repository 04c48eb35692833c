"""Config-driven experiment runner, record store, and table rendering.

A run is identified by a digest of its resolved semantic configuration.
Completed digests are skipped on rerun; every run directory is
self-contained (config copy, epoch log, checkpoints, sampled indices,
record) and the store keeps an append-only global index.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .data import (
    Splits,
    apply_fraction,
    dataset_spec,
    load_dataset,
    sample_fraction,
    synthetic_spec,
)
from .errors import ConfigError, IntegrityError
from .metrics import IOU_CONVENTION
from .models import build_resnet, build_unet, checkpoint_name, load_checkpoint, save_checkpoint
from .training import METHODS, DistillConfig, TrainLog, evaluate, run_method

METHOD_LABELS = {
    "none": "No Teacher",
    "traditional": "Traditional KD",
    "simultaneous": "Simultaneous KD",
    "fsp": "FSP KD",
    "at": "AT KD",
    "stagewise": "Stagewise KD",
}
METHOD_ORDER = ("none", "traditional", "simultaneous", "fsp", "at", "stagewise")
VARIANT_ORDER = (10, 14, 18, 20, 26, 34)

CONFIG_DEFAULTS = {
    "method": "stagewise",
    "task": "classification",
    "dataset": "synthetic_cls",
    "data_root": None,
    "teacher": "resnet34",
    "student": "resnet10",
    "num_classes": None,          # synthetic datasets only
    "fraction": 1.0,
    "seed": 0,
    "epochs_per_stage": 5,
    "teacher_epochs": 10,
    "learning_rate": 1e-4,
    "schedule": "constant",
    "batch_size": 32,
    "mse_normalization": "batch_only",
    "beta": 1.0,
    "finetune_backbone_in_head_phase": False,
    "teacher_checkpoint": None,
    "preset": None,
    "synthetic": None,            # dict: n_train, n_val, resolution, seed, noise
}

PRESETS = {
    # tiny runs for laptops and CI
    "desk": {
        "teacher": "resnet14",
        "student": "resnet10",
        "epochs_per_stage": 5,
        "teacher_epochs": 10,
        "learning_rate": 1e-3,
        "batch_size": 16,
    },
    # full-scale settings; not intended for CI
    "paper": {
        "teacher": "resnet34",
        "epochs_per_stage": 100,
        "teacher_epochs": 100,
        "learning_rate": 1e-4,
        "schedule": "constant",
        "batch_size": 64,
    },
}

# fields that identify a run; environment-specific paths are excluded
DIGEST_FIELDS = (
    "method", "task", "dataset", "teacher", "student", "num_classes",
    "fraction", "seed", "epochs_per_stage", "teacher_epochs", "learning_rate",
    "schedule", "batch_size", "mse_normalization", "beta",
    "finetune_backbone_in_head_phase", "synthetic",
)


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    return raw


def resolve_config(raw: dict, overrides: dict | None = None) -> dict:
    """Apply preset and defaults, validate keys and values, normalize types."""
    unknown = sorted(set(raw) - set(CONFIG_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(CONFIG_DEFAULTS)
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; valid: {', '.join(PRESETS)}")
        cfg.update(PRESETS[preset])
    cfg.update({k: v for k, v in raw.items() if k != "preset"})
    cfg["preset"] = preset
    for k, v in (overrides or {}).items():
        if k not in CONFIG_DEFAULTS:
            raise ConfigError(f"unknown config key: {k}")
        if v is not None:
            cfg[k] = v

    if cfg["method"] not in METHODS:
        raise ConfigError(f"unknown method {cfg['method']!r}; valid: {', '.join(METHODS)}")
    cfg["teacher"] = _variant(cfg["teacher"])
    cfg["student"] = _variant(cfg["student"])
    cfg["fraction"] = float(cfg["fraction"])
    cfg["seed"] = int(cfg["seed"])
    cfg["learning_rate"] = float(cfg["learning_rate"])
    if cfg["synthetic"] is not None:
        allowed = {"n_train", "n_val", "resolution", "seed", "noise", "num_classes"}
        bad = sorted(set(cfg["synthetic"]) - allowed)
        if bad:
            raise ConfigError(f"unknown synthetic options: {', '.join(bad)}")
    if cfg["dataset"].startswith("synthetic"):
        cfg["task"] = "segmentation" if cfg["dataset"] == "synthetic_seg" else "classification"
    else:
        spec = dataset_spec(cfg["dataset"])
        cfg["task"] = spec.task
    # DistillConfig validates the numeric training fields
    _distill_config(cfg)
    return cfg


def _variant(value) -> int:
    if isinstance(value, int):
        return value
    s = str(value).lower().removeprefix("resnet")
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"cannot parse model variant {value!r}") from None


def _distill_config(cfg: dict) -> DistillConfig:
    return DistillConfig(
        method=cfg["method"],
        task=cfg["task"],
        epochs_per_stage=int(cfg["epochs_per_stage"]),
        learning_rate=cfg["learning_rate"],
        schedule=cfg["schedule"],
        seed=cfg["seed"],
        data_fraction=cfg["fraction"],
        mse_normalization=cfg["mse_normalization"],
        beta=float(cfg["beta"]),
        batch_size=int(cfg["batch_size"]),
        finetune_backbone_in_head_phase=bool(cfg["finetune_backbone_in_head_phase"]),
    )


def config_digest(resolved: dict) -> str:
    semantic = {k: resolved.get(k) for k in DIGEST_FIELDS}
    canon = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class ExperimentRecord:
    digest: str
    config: dict
    metric_name: str
    final_metric: float
    phases: list[dict]
    checkpoint_paths: list[str]
    wall_time: float
    framework_version: str = __version__
    created_at: str = ""
    conventions: dict = field(default_factory=lambda: {"iou": IOU_CONVENTION})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentRecord":
        return cls(**json.loads(text))


class RunStore:
    """Filesystem layout: runs/{digest}/... plus an append-only index."""

    def __init__(self, runs_dir=None):
        self.root = Path(runs_dir or os.environ.get("SKD_RUNS_DIR", "runs"))

    def run_dir(self, digest: str) -> Path:
        return self.root / digest

    def record_path(self, digest: str) -> Path:
        return self.run_dir(digest) / "record.json"

    def load_record(self, digest: str) -> ExperimentRecord | None:
        p = self.record_path(digest)
        if not p.exists():
            return None
        return ExperimentRecord.from_json(p.read_text())

    def save_record(self, record: ExperimentRecord) -> None:
        d = self.run_dir(record.digest)
        d.mkdir(parents=True, exist_ok=True)
        self.record_path(record.digest).write_text(record.to_json())
        self._append_index(record)

    def _append_index(self, record: ExperimentRecord) -> None:
        """Append-with-rename under an exclusive lock file."""
        self.root.mkdir(parents=True, exist_ok=True)
        index = self.root / "index.jsonl"
        lock = self.root / "index.lock"
        line = json.dumps({"digest": record.digest, "dataset": record.config["dataset"],
                           "method": record.config["method"],
                           "metric": record.final_metric}, sort_keys=True)
        deadline = time.monotonic() + 30
        while True:
            try:
                fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                break
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise IntegrityError(f"stale index lock: {lock}") from None
                time.sleep(0.02)
        try:
            existing = index.read_text() if index.exists() else ""
            tmp = self.root / "index.jsonl.tmp"
            tmp.write_text(existing + line + "\n")
            os.replace(tmp, index)
        finally:
            os.close(fd)
            os.unlink(lock)

    def iter_records(self):
        if not self.root.exists():
            return
        for d in sorted(self.root.iterdir()):
            p = d / "record.json"
            if p.exists():
                yield ExperimentRecord.from_json(p.read_text())


# ---------------------------------------------------------------------------
# running experiments


def _build_splits(cfg: dict) -> Splits:
    name = cfg["dataset"]
    if name.startswith("synthetic"):
        opts = dict(cfg["synthetic"] or {})
        task = "classification" if name == "synthetic_cls" else "segmentation"
        spec = synthetic_spec(
            task=task,
            n_train=opts.get("n_train", 64),
            n_val=opts.get("n_val", 32),
            num_classes=opts.get("num_classes", cfg["num_classes"] or (2 if task == "classification" else 3)),
            resolution=opts.get("resolution", 32 if task == "classification" else 64),
            seed=opts.get("seed", 0),
            noise=opts.get("noise", 0.25),
        )
    else:
        root = cfg["data_root"] or os.environ.get("SKD_DATA_ROOT")
        spec = dataset_spec(name, root=root)
    train = load_dataset(spec, "train")
    val = load_dataset(spec, "val")
    return Splits(train=train, val=val)


def _build_model(cfg: dict, variant: int, num_classes: int, seed: int):
    if cfg["task"] == "segmentation":
        return build_unet(variant, num_classes, seed=seed)
    return build_resnet(variant, num_classes, seed=seed)


def _teacher_for(cfg: dict, data: Splits, store: RunStore):
    """Load the configured teacher checkpoint, or train one from scratch.

    A trained teacher is itself a completed 'none' run, so repeated distill
    runs against the same teacher reuse one checkpoint by digest.
    """
    path = cfg["teacher_checkpoint"]
    if path:
        teacher = load_checkpoint(path)
        return teacher.freeze_all(), [str(path)]
    teacher_cfg = dict(cfg)
    teacher_cfg.update(method="none", student=cfg["teacher"],
                       epochs_per_stage=int(cfg["teacher_epochs"]), fraction=1.0)
    record = run_experiment(teacher_cfg, runs_dir=store.root, _splits=data)
    teacher = load_checkpoint(record.checkpoint_paths[-1])
    return teacher.freeze_all(), record.checkpoint_paths


def run_experiment(config, runs_dir=None, force: bool = False, _splits: Splits | None = None) -> ExperimentRecord:
    """Run one configured experiment end to end and persist its record.

    ``config`` is a path to a YAML file or an already-resolved dict.
    Completed digests are returned as-is unless ``force`` is set; a stored
    record whose config disagrees with the current one is an integrity error.
    """
    raw = load_config_file(config) if not isinstance(config, dict) else config
    cfg = resolve_config(raw)
    digest = config_digest(cfg)
    store = RunStore(runs_dir)
    existing = store.load_record(digest)
    if existing is not None and not force:
        stored = {k: existing.config.get(k) for k in DIGEST_FIELDS}
        current = {k: cfg.get(k) for k in DIGEST_FIELDS}
        if stored != current:
            raise IntegrityError(
                f"digest {digest} exists with a different configuration")
        return existing

    data = _splits if _splits is not None else _build_splits(cfg)
    num_classes = data.train.num_classes
    dcfg = _distill_config(cfg)
    teacher, teacher_ckpts = (None, [])
    if cfg["method"] != "none":
        # teacher training always sees the full train split
        teacher, teacher_ckpts = _teacher_for(cfg, data, store)

    if cfg["fraction"] < 1.0:
        sample = sample_fraction(data.train, cfg["fraction"], cfg["seed"])
        run_dir = store.run_dir(digest)
        run_dir.mkdir(parents=True, exist_ok=True)
        sample.save(run_dir / "fraction_indices.json")
        data = Splits(train=apply_fraction(data.train, sample), val=data.val, test=data.test)

    run_dir = store.run_dir(digest)
    run_dir.mkdir(parents=True, exist_ok=True)
    if force:
        # a forced rerun re-executes instead of resuming from stale phases
        shutil.rmtree(run_dir / "checkpoints", ignore_errors=True)
    with open(run_dir / "config.yaml", "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True)

    student = _build_model(cfg, cfg["student"], num_classes, seed=cfg["seed"])
    start = time.perf_counter()
    student, log = run_method(cfg["method"], teacher, student, data, dcfg, run_dir=run_dir)
    wall = time.perf_counter() - start

    final_metric = evaluate(student, data.val, dcfg.batch_size)
    metric_name = "mean_iou" if cfg["task"] == "segmentation" else "top1_accuracy"
    model_name = f"resnet{cfg['student']}" if cfg["task"] == "classification" \
        else f"unet{cfg['student']}"
    ckpt = run_dir / checkpoint_name(model_name, cfg["dataset"], cfg["method"],
                                     cfg["fraction"], cfg["seed"])
    save_checkpoint(student, ckpt, meta={"digest": digest, "metric": final_metric})
    log.write_jsonl(run_dir / "train_log.jsonl")
    try:
        plot_loss_curves(log, run_dir / "loss_curves.png")
    except Exception:
        pass  # plotting must never fail a run

    record = ExperimentRecord(
        digest=digest,
        config=cfg,
        metric_name=metric_name,
        final_metric=float(final_metric),
        phases=[{"name": p.name, "kind": p.kind, "epochs": len(p.entries),
                 "wall_time": p.wall_time} for p in log.phases],
        checkpoint_paths=teacher_ckpts + [str(ckpt)],
        wall_time=wall,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    store.save_record(record)
    return record


# ---------------------------------------------------------------------------
# reporting


def _fraction_key(f: float):
    return (0, 0.0) if f == 1.0 else (1, f)


def render_report(records, layout: str) -> tuple[str, str]:
    """Rows = method x fraction, columns = student variants.

    Returns (csv_text, aligned_text); both byte-deterministic for a given
    record set. All records must share one dataset.
    """
    if layout not in ("classification_table", "segmentation_table"):
        raise ConfigError(f"unknown layout {layout!r}")
    records = list(records)
    datasets = {r.config["dataset"] for r in records}
    if len(datasets) > 1:
        raise ConfigError(f"mixed datasets in one table: {', '.join(sorted(datasets))}")

    cells: dict[tuple[str, float, int], float] = {}
    fractions, variants = set(), set()
    for r in records:
        key = (r.config["method"], r.config["fraction"], r.config["student"])
        cells[key] = r.final_metric
        fractions.add(r.config["fraction"])
        variants.add(r.config["student"])
    fractions = sorted(fractions, key=_fraction_key)
    variants = [v for v in VARIANT_ORDER if v in variants] + sorted(variants - set(VARIANT_ORDER))

    header = ["method"] + [f"resnet{v}" for v in variants]
    rows = []
    for frac in fractions:
        for method in METHOD_ORDER:
            label = METHOD_LABELS[method]
            if frac != 1.0:
                label += f" - {int(round(frac * 100))}% Data"
            values = [cells.get((method, frac, v)) for v in variants]
            if all(v is None for v in values):
                continue
            rows.append([label] + ["" if v is None else f"{v:.4f}" for v in values])

    csv_lines = [",".join(header)] + [",".join(r) for r in rows]
    csv_text = "\n".join(csv_lines) + "\n"

    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    def fmt(row):
        return "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
    aligned = "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]) + "\n"
    return csv_text, aligned


def plot_loss_curves(log: TrainLog, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    offset = 0
    for p in log.phases:
        xs = [offset + e.epoch for e in p.entries]
        ys = [e.train_loss for e in p.entries]
        if xs:
            ax.plot(xs, ys, marker="o", markersize=3, label=p.name)
            offset = xs[-1]
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax.set_title(f"{log.method} training")
    if ax.lines:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
