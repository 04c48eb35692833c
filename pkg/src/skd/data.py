"""Datasets, split handling, class-balanced fraction sampling, augmentation.

Real datasets are read from standard on-disk layouts under a root directory
(env var SKD_DATA_ROOT by default): class-per-folder image trees, CIFAR10
python batches, and CamVid image+mask pairs. A synthetic generator provides
deterministic desk-scale data for tests and smoke runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import pickle
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, CorruptImageError, CountMismatchError, MissingFilesError

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    task: str  # classification | segmentation
    split_sizes: tuple[int, int, int]  # train, val, test (0 = no such split)
    class_names: tuple[str, ...]
    resolution: int
    ignore_index: int | None = None
    root: str | None = None
    checksums: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


IMAGENETTE_CLASSES = (
    "tench", "english_springer", "cassette_player", "chain_saw", "church",
    "french_horn", "garbage_truck", "gas_pump", "golf_ball", "parachute",
)
IMAGEWOOF_CLASSES = (
    "shih_tzu", "rhodesian_ridgeback", "beagle", "english_foxhound", "border_terrier",
    "australian_terrier", "golden_retriever", "old_english_sheepdog", "samoyed", "dingo",
)
CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
CAMVID_CLASSES = (
    "sky", "building", "pole", "road", "pavement", "tree",
    "sign_symbol", "fence", "car", "pedestrian", "bicyclist",
)

DATASETS = {
    "imagenette": DatasetSpec("imagenette", "classification", (13000, 500, 0),
                              IMAGENETTE_CLASSES, resolution=224),
    "imagewoof": DatasetSpec("imagewoof", "classification", (13000, 500, 0),
                             IMAGEWOOF_CLASSES, resolution=224),
    "cifar10": DatasetSpec("cifar10", "classification", (50000, 10000, 0),
                           CIFAR10_CLASSES, resolution=32),
    "camvid": DatasetSpec("camvid", "segmentation", (367, 101, 233),
                          CAMVID_CLASSES, resolution=224, ignore_index=11),
}


def dataset_spec(name: str, root: str | None = None) -> DatasetSpec:
    try:
        spec = DATASETS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; known: {', '.join(sorted(DATASETS))}") from None
    return replace(spec, root=root) if root else spec


# ---------------------------------------------------------------------------
# dataset containers


class ArrayDataset:
    """In-memory dataset; images (N,3,H,W) float32 in [0,1]."""

    def __init__(self, images, labels, task: str, num_classes: int,
                 ignore_index: int | None = None, name: str = "array"):
        self.images = torch.as_tensor(images, dtype=torch.float32)
        label_dtype = torch.int64
        self.labels = torch.as_tensor(labels, dtype=label_dtype)
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{name}: {len(self.images)} images but {len(self.labels)} labels")
        self.task = task
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.name = name

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], self.labels[i]

    def class_labels(self) -> np.ndarray:
        if self.task != "classification":
            raise ValueError("per-item class labels only exist for classification")
        return self.labels.numpy()


class ImageFolderDataset:
    """Lazy class-per-folder dataset (split/<class>/<image>)."""

    def __init__(self, split_dir: Path, class_names: tuple[str, ...], resolution: int,
                 name: str = "folder"):
        self.split_dir = Path(split_dir)
        self.class_names = class_names
        self.resolution = resolution
        self.task = "classification"
        self.num_classes = len(class_names)
        self.ignore_index = None
        self.name = name
        if not self.split_dir.is_dir():
            raise MissingFilesError(f"{name}: split directory missing: {self.split_dir}")
        self.items: list[tuple[Path, int]] = []
        for label, cls in enumerate(class_names):
            cls_dir = self.split_dir / cls
            if not cls_dir.is_dir():
                raise MissingFilesError(f"{name}: class folder missing: {cls_dir}")
            files = sorted(p for p in cls_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
            self.items.extend((p, label) for p in files)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        path, label = self.items[i]
        return _load_image(path, self.resolution), torch.tensor(label, dtype=torch.int64)

    def class_labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)


class CamVidDataset:
    """Lazy CamVid-style pairs: <split>/ images, <split>annot/ masks."""

    def __init__(self, root: Path, split: str, resolution: int, num_classes: int,
                 ignore_index: int):
        root = Path(root)
        img_dir = root / split
        mask_dir = root / f"{split}annot"
        if not img_dir.is_dir() or not mask_dir.is_dir():
            raise MissingFilesError(f"camvid: expected {img_dir} and {mask_dir}")
        self.images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        self.masks = [mask_dir / p.name for p in self.images]
        missing = [m for m in self.masks if not m.exists()]
        if missing:
            raise MissingFilesError(f"camvid: {len(missing)} masks missing, first: {missing[0]}")
        self.resolution = resolution
        self.task = "segmentation"
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.name = "camvid"

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        img = _load_image(self.images[i], self.resolution)
        mask = _load_mask(self.masks[i], self.resolution)
        # anything outside the content classes is void
        mask[mask >= self.num_classes] = self.ignore_index
        return img, mask


class Subset:
    """Index-selected view of another dataset."""

    def __init__(self, dataset, indices):
        self.dataset = dataset
        self.indices = list(int(i) for i in indices)
        self.task = dataset.task
        self.num_classes = dataset.num_classes
        self.ignore_index = dataset.ignore_index
        self.name = getattr(dataset, "name", "subset")

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.dataset[self.indices[i]]

    def class_labels(self):
        return self.dataset.class_labels()[self.indices]


@dataclass
class Splits:
    train: object
    val: object
    test: object | None = None


def _load_image(path: Path, resolution: int) -> torch.Tensor:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as e:
        raise CorruptImageError(f"cannot decode image {path}: {e}") from e
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def _load_mask(path: Path, resolution: int) -> torch.Tensor:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.NEAREST)
            arr = np.asarray(im, dtype=np.int64)
    except (UnidentifiedImageError, OSError) as e:
        raise CorruptImageError(f"cannot decode mask {path}: {e}") from e
    return torch.from_numpy(arr.copy())


# ---------------------------------------------------------------------------
# loading


def _verify_checksums(root: Path, checksums: dict) -> None:
    for rel, expected in checksums.items():
        p = root / rel
        if not p.exists():
            raise MissingFilesError(f"checksummed file missing: {p}")
        h = hashlib.md5()
        with open(p, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
        if h.hexdigest() != expected:
            raise CorruptImageError(f"checksum mismatch for {p}: {h.hexdigest()} != {expected}")


def _check_count(name: str, split: str, actual: int, expected: int) -> None:
    if expected and actual != expected:
        raise CountMismatchError(
            f"{name}/{split}: found {actual} items, declared split size is {expected}")


def _load_cifar_batches(root: Path, files: list[str], name: str):
    images, labels = [], []
    for fname in files:
        p = root / fname
        if not p.exists():
            raise MissingFilesError(f"{name}: batch file missing: {p}")
        try:
            with open(p, "rb") as f:
                batch = pickle.load(f, encoding="bytes")
            data = batch[b"data"]
            labs = batch[b"labels"]
        except (pickle.UnpicklingError, KeyError, EOFError) as e:
            raise CorruptImageError(f"{name}: cannot parse batch {p}: {e}") from e
        images.append(np.asarray(data, dtype=np.uint8).reshape(-1, 3, 32, 32))
        labels.append(np.asarray(labs, dtype=np.int64))
    x = np.concatenate(images).astype(np.float32) / 255.0
    y = np.concatenate(labels)
    return x, y


def load_dataset(spec: DatasetSpec, split: str = "train"):
    """Materialize one split of a dataset as an indexable object.

    Item order is deterministic (sorted paths or batch-file order). Actual
    item counts are validated against the spec's declared split sizes.
    """
    split_index = {"train": 0, "val": 1, "test": 2}
    if split not in split_index:
        raise ConfigError(f"unknown split {split!r}")
    expected = spec.split_sizes[split_index[split]]
    if spec.name.startswith("synthetic"):
        return _synthetic_split(spec, split)
    if spec.root is None:
        raise ConfigError(f"dataset {spec.name} needs a root directory (set SKD_DATA_ROOT)")
    root = Path(spec.root)
    if not root.exists():
        raise MissingFilesError(f"dataset root missing: {root}")
    if spec.checksums:
        _verify_checksums(root, spec.checksums)

    if spec.name == "cifar10":
        batch_root = root / "cifar-10-batches-py" if (root / "cifar-10-batches-py").is_dir() else root
        files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
        x, y = _load_cifar_batches(batch_root, files, spec.name)
        ds = ArrayDataset(x, y, "classification", spec.num_classes, name=spec.name)
    elif spec.task == "segmentation":
        ds = CamVidDataset(root, split, spec.resolution, spec.num_classes, spec.ignore_index)
    else:
        ds = ImageFolderDataset(root / split, spec.class_names, spec.resolution, name=spec.name)
    _check_count(spec.name, split, len(ds), expected)
    return ds


def folder_spec(name: str, root: str, class_names: tuple[str, ...], resolution: int,
                split_sizes: tuple[int, int, int] = (0, 0, 0)) -> DatasetSpec:
    """Spec for an ad-hoc class-per-folder dataset (counts unchecked unless given)."""
    return DatasetSpec(name, "classification", split_sizes, tuple(class_names), resolution,
                       root=root)


# ---------------------------------------------------------------------------
# fraction sampling


@dataclass
class FractionSample:
    fraction: float
    seed: int
    indices: list[int]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(
            {"fraction": self.fraction, "seed": self.seed, "indices": self.indices}))
        return path

    @classmethod
    def load(cls, path) -> "FractionSample":
        payload = json.loads(Path(path).read_text())
        return cls(payload["fraction"], payload["seed"], [int(i) for i in payload["indices"]])


def sample_fraction(dataset, fraction: float, seed: int) -> FractionSample:
    """Deterministic subset of the train items; class-stratified for
    classification so every class keeps round(fraction * n_class) items."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset)
    if fraction == 1.0:
        return FractionSample(fraction, seed, list(range(n)))
    rng = np.random.default_rng(seed)
    if dataset.task == "classification":
        labels = dataset.class_labels()
        chosen = []
        for cls in sorted(set(labels.tolist())):
            cls_idx = np.flatnonzero(labels == cls)
            k = int(math.floor(fraction * len(cls_idx) + 0.5))
            chosen.extend(rng.permutation(cls_idx)[:k].tolist())
    else:
        k = int(math.floor(fraction * n + 0.5))
        chosen = rng.permutation(n)[:k].tolist()
    return FractionSample(fraction, seed, sorted(int(i) for i in chosen))


def apply_fraction(dataset, sample: FractionSample):
    return Subset(dataset, sample.indices)


# ---------------------------------------------------------------------------
# augmentation


def augment_classification(img: torch.Tensor, rng: np.random.Generator, pad: int = 4) -> torch.Tensor:
    """Horizontal flip + zero-pad-and-crop; keeps values in [0, 1]."""
    if rng.random() < 0.5:
        img = torch.flip(img, dims=[-1])
    if pad:
        h, w = img.shape[-2:]
        padded = torch.zeros(img.shape[0], h + 2 * pad, w + 2 * pad, dtype=img.dtype)
        padded[:, pad:pad + h, pad:pad + w] = img
        top = int(rng.integers(0, 2 * pad + 1))
        left = int(rng.integers(0, 2 * pad + 1))
        img = padded[:, top:top + h, left:left + w]
    return img


def augment_segmentation(img: torch.Tensor, mask: torch.Tensor, rng: np.random.Generator,
                         crop: int | None = None):
    """Identical geometry on image and mask: flip, optional random crop."""
    if rng.random() < 0.5:
        img = torch.flip(img, dims=[-1])
        mask = torch.flip(mask, dims=[-1])
    if crop is not None:
        h, w = img.shape[-2:]
        if crop > h or crop > w:
            raise ConfigError(f"crop {crop} larger than input {h}x{w}")
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        img = img[:, top:top + crop, left:left + crop]
        mask = mask[top:top + crop, left:left + crop]
    return img, mask


def augment(item, task: str, train_mode: bool, rng: np.random.Generator | None = None):
    """Dispatching transform; eval mode is the identity (inputs are already
    resized and scaled at load time)."""
    if not train_mode:
        return item
    if rng is None:
        raise ValueError("train-mode augmentation needs an RNG")
    if task == "classification":
        img, label = item
        return augment_classification(img, rng), label
    img, mask = item
    return augment_segmentation(img, mask, rng)


# ---------------------------------------------------------------------------
# batching


def iterate_batches(dataset, batch_size: int, *, shuffle: bool, seed: int, epoch: int = 0,
                    train_mode: bool = False):
    """Seed-deterministic batch stream; augmentation randomness is derived
    from (seed, epoch, position) so runs replay exactly."""
    n = len(dataset)
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng(seed * 100_003 + epoch).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xs, ys = [], []
        for pos, i in enumerate(idx):
            item = dataset[int(i)]
            if train_mode:
                rng = np.random.default_rng((seed * 100_003 + epoch) * 1_000_003 + start + pos)
                item = augment(item, dataset.task, True, rng)
            xs.append(item[0])
            ys.append(item[1])
        yield torch.stack(xs), torch.stack(ys)


# ---------------------------------------------------------------------------
# synthetic data


def _grating_image(rng: np.random.Generator, size: int, orientation: float,
                   noise: float) -> np.ndarray:
    """Oriented sinusoidal grating with random phase/frequency plus noise."""
    freq = rng.uniform(2.0, 4.0) * 2 * np.pi / size
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    coord = xx * np.cos(orientation) + yy * np.sin(orientation)
    base = 0.5 + 0.35 * np.sin(freq * coord + phase)
    img = np.stack([base] * 3)
    img += rng.normal(0, noise, img.shape).astype(np.float32)
    # random brightness/contrast jitter
    img = (img - 0.5) * rng.uniform(0.7, 1.3) + 0.5 + rng.uniform(-0.1, 0.1)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_classification_data(n_train: int, n_val: int, num_classes: int = 2, size: int = 32,
                             noise: float = 0.25, seed: int = 0) -> Splits:
    """Balanced oriented-texture classification set; learnable by small
    convnets but not trivially separable at high noise."""
    rng = np.random.default_rng(seed)
    orientations = [k * np.pi / num_classes for k in range(num_classes)]

    def split(count, offset):
        local = np.random.default_rng(seed * 7 + offset)
        per_class = count // num_classes
        extra = count - per_class * num_classes
        xs, ys = [], []
        for cls in range(num_classes):
            k = per_class + (1 if cls < extra else 0)
            for _ in range(k):
                jitter = local.normal(0, np.pi / 24)
                xs.append(_grating_image(local, size, orientations[cls] + jitter, noise))
                ys.append(cls)
        order = local.permutation(len(xs))
        x = np.stack(xs)[order]
        y = np.array(ys, dtype=np.int64)[order]
        return ArrayDataset(x, y, "classification", num_classes, name="synthetic_cls")

    del rng
    return Splits(train=split(n_train, 1), val=split(n_val, 2))


def make_segmentation_data(n_train: int, n_val: int, num_classes: int = 3, size: int = 64,
                           seed: int = 0, void_border: int = 2) -> Splits:
    """Toy masks: background plus filled shapes, optional void border."""
    ignore_index = num_classes

    def split(count, offset):
        local = np.random.default_rng(seed * 13 + offset)
        xs, ys = [], []
        for _ in range(count):
            img = local.uniform(0.0, 0.3, (3, size, size)).astype(np.float32)
            mask = np.zeros((size, size), dtype=np.int64)
            for cls in range(1, num_classes):
                cy, cx = local.integers(size // 4, 3 * size // 4, 2)
                r = int(local.integers(size // 8, size // 4))
                yy, xx = np.ogrid[:size, :size]
                blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                mask[blob] = cls
                img[:, blob] = np.clip(0.3 + 0.6 * cls / num_classes
                                       + local.normal(0, 0.05), 0, 1)
            img += local.normal(0, 0.03, img.shape).astype(np.float32)
            if void_border:
                mask[:void_border, :] = ignore_index
                mask[-void_border:, :] = ignore_index
                mask[:, :void_border] = ignore_index
                mask[:, -void_border:] = ignore_index
            xs.append(np.clip(img, 0, 1))
            ys.append(mask)
        return ArrayDataset(np.stack(xs), np.stack(ys), "segmentation", num_classes,
                            ignore_index=ignore_index, name="synthetic_seg")

    return Splits(train=split(n_train, 1), val=split(n_val, 2))


def _synthetic_split(spec: DatasetSpec, split: str):
    opts = dict(spec.options)
    n_train, n_val, _ = spec.split_sizes
    seed = opts.pop("seed", 0)
    if spec.task == "classification":
        splits = make_classification_data(n_train, n_val, num_classes=spec.num_classes,
                                          size=spec.resolution, seed=seed,
                                          noise=opts.pop("noise", 0.25))
    else:
        splits = make_segmentation_data(n_train, n_val, num_classes=spec.num_classes,
                                        size=spec.resolution, seed=seed)
    return getattr(splits, split)


def synthetic_spec(task: str = "classification", n_train: int = 64, n_val: int = 32,
                   num_classes: int = 2, resolution: int = 32, seed: int = 0,
                   noise: float = 0.25) -> DatasetSpec:
    names = tuple(f"class{i}" for i in range(num_classes))
    name = "synthetic_cls" if task == "classification" else "synthetic_seg"
    ignore = None if task == "classification" else num_classes
    return DatasetSpec(name, task, (n_train, n_val, 0), names, resolution,
                       ignore_index=ignore, options={"seed": seed, "noise": noise})
