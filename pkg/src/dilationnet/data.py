"""Dataset plumbing: manifests, splits, resampling, augmentation, batches.

Sources are folder trees (Parasitized/ = label 1, Uninfected/ = label 0),
deterministic synthetic sets, or in-memory arrays.  Native images are float32
(h, w, 3) in [0, 255]; streams resample them to a square resolution and scale
to [0, 1].  Every random choice is derived from explicit seeds, so identical
seeds reproduce identical bytes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

CLASS_DIRS = {"Parasitized": 1, "Uninfected": 0}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# fixed stream tags keep the seed derivations for unrelated purposes disjoint
_SPLIT_STREAM = 101
_FRACTION_STREAM = 202
_SHUFFLE_STREAM = 303
_AUGMENT_STREAM = 404
_HOLDOUT_STREAM = 505


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    label: int
    source: str
    height: int
    width: int


@dataclass
class DatasetManifest:
    """Sample inventory plus partition assignments, serializable as JSON."""

    records: tuple[SampleRecord, ...]
    split: dict[str, str]  # sample_id -> train | test | unused
    origin: dict
    seed: int | None = None
    ratio: float | None = None
    fraction: float = 1.0

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest contains duplicate sample ids")

    def __len__(self) -> int:
        return len(self.records)

    def record(self, sample_id: str) -> SampleRecord:
        try:
            return self._by_id[sample_id]
        except AttributeError:
            object.__setattr__(self, "_by_id", {r.sample_id: r for r in self.records})
            return self._by_id[sample_id]

    def partition_ids(self, partition: str) -> list[str]:
        """ids of one partition, in record order."""
        return [r.sample_id for r in self.records
                if self.split.get(r.sample_id) == partition]

    def labels_for(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.record(i).label for i in ids], dtype=np.int64)

    def class_counts(self, partition: str | None = None) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for r in self.records:
            if partition is None or self.split.get(r.sample_id) == partition:
                counts[r.label] += 1
        return counts

    def to_json(self) -> dict:
        return {
            "origin": self.origin,
            "seed": self.seed,
            "ratio": self.ratio,
            "fraction": self.fraction,
            "class_counts": {str(k): v for k, v in self.class_counts().items()},
            "records": [
                {"id": r.sample_id, "label": r.label, "source": r.source,
                 "height": r.height, "width": r.width,
                 "split": self.split.get(r.sample_id, "unassigned")}
                for r in self.records
            ],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "DatasetManifest":
        records = tuple(SampleRecord(e["id"], int(e["label"]), e["source"],
                                     int(e["height"]), int(e["width"]))
                        for e in payload["records"])
        split = {e["id"]: e["split"] for e in payload["records"]
                 if e["split"] != "unassigned"}
        return cls(records=records, split=split, origin=payload["origin"],
                   seed=payload.get("seed"), ratio=payload.get("ratio"),
                   fraction=payload.get("fraction", 1.0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


class Dataset:
    """A manifest plus a way to read each sample's native pixels."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest

    def load_native(self, record: SampleRecord) -> np.ndarray:
        raise NotImplementedError

    def with_manifest(self, manifest: DatasetManifest) -> "Dataset":
        clone = type(self).__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.manifest = manifest
        return clone


class FolderDataset(Dataset):
    def __init__(self, root, manifest: DatasetManifest):
        super().__init__(manifest)
        self.root = Path(root)

    def load_native(self, record: SampleRecord) -> np.ndarray:
        with Image.open(self.root / record.source) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32)


class SyntheticDataset(Dataset):
    """Seed-determined two-class images: smooth blob fields, with a central
    hue stain and small high-contrast dots added for class 1."""

    def __init__(self, n: int, seed: int = 0, resolution: int = 64,
                 manifest: DatasetManifest | None = None):
        if n < 2 or n % 2:
            raise ValueError(f"synthetic size must be even and >= 2, got {n}")
        self.n = n
        self.seed = seed
        self.resolution = resolution
        self._cache: dict[int, np.ndarray] = {}
        if manifest is None:
            records = tuple(
                SampleRecord(f"synth-{i:05d}", i % 2, f"synthetic:{seed}:{i}",
                             resolution, resolution)
                for i in range(n))
            manifest = DatasetManifest(
                records=records, split={}, seed=seed,
                origin={"kind": "synthetic", "n": n, "seed": seed,
                        "resolution": resolution})
        super().__init__(manifest)

    def load_native(self, record: SampleRecord) -> np.ndarray:
        index = int(record.source.rsplit(":", 1)[1])
        if index not in self._cache:
            self._cache[index] = _render_synthetic(index, record.label,
                                                   self.resolution, self.seed)
        return self._cache[index]


class ArrayDataset(Dataset):
    """In-memory images, float32 (n, h, w, 3) in [0, 255]."""

    def __init__(self, images: np.ndarray, labels: Sequence[int],
                 manifest: DatasetManifest | None = None):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[3] != 3:
            raise ValueError(f"expected (n, h, w, 3) images, got {images.shape}")
        if len(labels) != images.shape[0]:
            raise ValueError("labels do not match image count")
        self.images = images
        if manifest is None:
            records = tuple(
                SampleRecord(f"array-{i:05d}", int(labels[i]), f"array:{i}",
                             images.shape[1], images.shape[2])
                for i in range(images.shape[0]))
            manifest = DatasetManifest(records=records, split={},
                                       origin={"kind": "arrays"})
        super().__init__(manifest)

    def load_native(self, record: SampleRecord) -> np.ndarray:
        return self.images[int(record.source.rsplit(":", 1)[1])]


def synth_dataset(n: int, resolution: int = 64, seed: int = 0) -> SyntheticDataset:
    return SyntheticDataset(n, seed=seed, resolution=resolution)


def _render_synthetic(index: int, label: int, resolution: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    r = resolution
    axis = np.linspace(0.0, 1.0, r)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    field = np.full((r, r), rng.uniform(0.55, 0.70))
    for _ in range(3):
        cy, cx = rng.uniform(0.05, 0.95, size=2)
        sg = rng.uniform(0.25, 0.45)
        amp = rng.uniform(-0.05, 0.05)
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sg * sg))
    tint = np.array([1.0, 0.88, 0.94]) * rng.uniform(0.98, 1.02, size=3)
    img = field[:, :, None] * tint[None, None, :]
    if label == 1:
        # stain weights sum to zero across channels, so the class signal is a
        # hue shift that leaves the scalar pixel mean where the background put
        # it; positives stay non-separable by mean while kNN on raw pixels
        # (and any texture-aware model) can latch onto the stained center
        stain = np.array([0.4, -0.9, 0.5])
        cy, cx = 0.5 + rng.uniform(-0.06, 0.06, size=2)
        halo = rng.uniform(0.14, 0.20) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.30 ** 2))
        img += halo[:, :, None] * stain
        for _ in range(int(rng.integers(1, 4))):
            dy, dx = rng.uniform(-0.18, 0.18, size=2)
            rad = rng.uniform(0.06, 0.10)
            depth = rng.uniform(0.30, 0.42)
            d2 = ((yy - cy - dy) ** 2 + (xx - cx - dx) ** 2) / (rad * rad)
            img += depth * np.exp(-d2 * d2)[:, :, None] * stain
    np.clip(img, 0.02, 0.98, out=img)
    return (img * 255.0).astype(np.float32)


# -- scanning -----------------------------------------------------------------

def scan_dataset(root) -> tuple[DatasetManifest, list[tuple[str, str]]]:
    """Walk the two class directories; unreadable files go to the skip report."""
    root = Path(root)
    records: list[SampleRecord] = []
    skipped: list[tuple[str, str]] = []
    for class_dir in sorted(CLASS_DIRS):
        label = CLASS_DIRS[class_dir]
        base = root / class_dir
        if not base.is_dir():
            continue
        for path in sorted(base.rglob("*")):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            rel = path.relative_to(root).as_posix()
            try:
                with Image.open(path) as img:
                    img.verify()
                with Image.open(path) as img:
                    width, height = img.size
            except (UnidentifiedImageError, OSError, SyntaxError) as exc:
                skipped.append((rel, f"{type(exc).__name__}: {exc}"))
                continue
            records.append(SampleRecord(rel, label, rel, height, width))
    if not records:
        warnings.warn(f"no usable images found under {root}", stacklevel=2)
    manifest = DatasetManifest(records=tuple(records), split={},
                               origin={"kind": "folder", "root": str(root)})
    return manifest, skipped


def dataset_from_manifest(manifest: DatasetManifest, root=None) -> Dataset:
    kind = manifest.origin.get("kind")
    if kind == "folder":
        return FolderDataset(root or manifest.origin["root"], manifest)
    if kind == "synthetic":
        o = manifest.origin
        return SyntheticDataset(o["n"], seed=o["seed"], resolution=o["resolution"],
                                manifest=manifest)
    raise ValueError(f"cannot rebuild a dataset of origin {kind!r} from its manifest")


# -- partitioning -------------------------------------------------------------

def _allocate(total: int, sizes: Sequence[int]) -> list[int]:
    """Largest-remainder split of `total` across groups, proportional to size."""
    n = sum(sizes)
    if not 0 <= total <= n:
        raise ValueError(f"cannot allocate {total} of {n}")
    ideals = [total * s / n for s in sizes]
    base = [min(int(i), s) for i, s in zip(ideals, sizes)]
    order = sorted(range(len(sizes)), key=lambda k: (base[k] - ideals[k], k))
    for k in order:
        if sum(base) == total:
            break
        if base[k] < sizes[k]:
            base[k] += 1
    return base


def split(manifest: DatasetManifest, ratio: float = 0.8,
          seed: int = 0) -> DatasetManifest:
    """Stratified train/test assignment; |train| = round(ratio * N)."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    if not manifest.records:
        raise ValueError("cannot split an empty manifest")
    by_class: dict[int, list[str]] = {}
    for r in manifest.records:
        by_class.setdefault(r.label, []).append(r.sample_id)
    labels = sorted(by_class)
    total = int(np.floor(ratio * len(manifest) + 0.5))
    counts = _allocate(total, [len(by_class[l]) for l in labels])
    assignment: dict[str, str] = {}
    for label, take in zip(labels, counts):
        ids = list(by_class[label])
        np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_STREAM, label])) \
            .shuffle(ids)
        for i, sample_id in enumerate(ids):
            assignment[sample_id] = "train" if i < take else "test"
    return replace(manifest, split=assignment, seed=seed, ratio=ratio)


def fraction(manifest: DatasetManifest, p: float, seed: int = 0) -> DatasetManifest:
    """Keep a stratified fraction of the training partition; test is untouched.

    The per-class orders depend only on the seed, so the kept set at a smaller
    p is a prefix of (a subset of) the kept set at any larger p.
    """
    if not 0 < p <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {p}")
    train_ids = manifest.partition_ids("train")
    if not train_ids:
        raise ValueError("manifest has no training partition to subsample")
    by_class: dict[int, list[str]] = {}
    for sample_id in train_ids:
        by_class.setdefault(manifest.record(sample_id).label, []).append(sample_id)
    labels = sorted(by_class)
    total = int(np.floor(p * len(train_ids) + 0.5))
    counts = _allocate(total, [len(by_class[l]) for l in labels])
    assignment = dict(manifest.split)
    for label, take in zip(labels, counts):
        ids = list(by_class[label])
        np.random.default_rng(np.random.SeedSequence([seed, _FRACTION_STREAM, label])) \
            .shuffle(ids)
        for i, sample_id in enumerate(ids):
            assignment[sample_id] = "train" if i < take else "unused"
    return replace(manifest, split=assignment, fraction=p)


def stratified_holdout(ids: Sequence[str], labels: Sequence[int], fraction: float,
                       seed: int) -> tuple[list[str], list[str]]:
    """Carve a validation subset out of the training ids, per class."""
    if not 0 <= fraction < 1:
        raise ValueError(f"holdout fraction must be in [0, 1), got {fraction}")
    by_class: dict[int, list[str]] = {}
    for sample_id, label in zip(ids, labels):
        by_class.setdefault(int(label), []).append(sample_id)
    hold: set[str] = set()
    for label in sorted(by_class):
        group = list(by_class[label])
        take = int(np.floor(fraction * len(group) + 0.5))
        np.random.default_rng(np.random.SeedSequence([seed, _HOLDOUT_STREAM, label])) \
            .shuffle(group)
        hold.update(group[:take])
    fit = [i for i in ids if i not in hold]
    val = [i for i in ids if i in hold]
    return fit, val


# -- pixel transforms ---------------------------------------------------------

def resample(image: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear resampling to (resolution, resolution, 3), half-pixel centers."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"resample expects an (h, w, 3) image, got shape {img.shape}")
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    h, w = img.shape[:2]

    def axis_coords(n_src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        centers = (np.arange(resolution) + 0.5) * (n_src / resolution) - 0.5
        centers = np.clip(centers, 0.0, n_src - 1.0)
        lo = np.floor(centers).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, (centers - lo).astype(np.float32)

    y0, y1, wy = axis_coords(h)
    x0, x1, wx = axis_coords(w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def normalize(image: np.ndarray) -> np.ndarray:
    """Scale an 8-bit-range image to [0, 1]."""
    return np.asarray(image, dtype=np.float32) / np.float32(255.0)


@dataclass(frozen=True)
class AugmentationConfig:
    horizontal_flip: bool = True
    vertical_flip: bool = True
    rotate: bool = True          # one of 90/180/270 degrees
    brightness: bool = True      # scale by up to +-10%

    def any_enabled(self) -> bool:
        return any((self.horizontal_flip, self.vertical_flip, self.rotate,
                    self.brightness))


def augment(image: np.ndarray, cfg: AugmentationConfig, sample_seed) -> np.ndarray:
    """Apply each enabled transform independently with probability 1/2.

    `sample_seed` is an int or tuple of ints; the same seed reproduces the
    same transform choices exactly.
    """
    rng = np.random.default_rng(np.random.SeedSequence(sample_seed))
    out = np.asarray(image, dtype=np.float32)
    if cfg.horizontal_flip and rng.random() < 0.5:
        out = out[:, ::-1]
    if cfg.vertical_flip and rng.random() < 0.5:
        out = out[::-1]
    if cfg.rotate and rng.random() < 0.5:
        out = np.rot90(out, k=int(rng.integers(1, 4)))
    if cfg.brightness and rng.random() < 0.5:
        out = np.clip(out * (1.0 + rng.uniform(-0.1, 0.1)), 0.0, 255.0)
    return np.ascontiguousarray(out, dtype=np.float32)


# -- streams ------------------------------------------------------------------

@dataclass
class Batch:
    ids: tuple[str, ...]
    images: np.ndarray  # (b, r, r, 3) float32 in [0, 1]
    labels: np.ndarray  # (b,) float32


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic sample permutation for one training epoch."""
    order = np.arange(n)
    np.random.default_rng(np.random.SeedSequence([seed, _SHUFFLE_STREAM, epoch])) \
        .shuffle(order)
    return order


def _native_stream(dataset: Dataset, ids: Sequence[str], batch_size: int,
                   augment_cfg: AugmentationConfig | None, seed: int, epoch: int,
                   shuffle: bool) -> Iterator[tuple[tuple[str, ...], list[np.ndarray],
                                                    np.ndarray]]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    manifest = dataset.manifest
    position = {r.sample_id: i for i, r in enumerate(manifest.records)}
    order = list(ids)
    if shuffle:
        order = [order[i] for i in epoch_order(len(order), seed, epoch)]
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        natives, labels = [], []
        for sample_id in chunk:
            record = manifest.record(sample_id)
            native = dataset.load_native(record)
            if augment_cfg is not None and augment_cfg.any_enabled():
                native = augment(native, augment_cfg,
                                 (seed, _AUGMENT_STREAM, epoch, position[sample_id]))
            natives.append(native)
            labels.append(record.label)
        yield tuple(chunk), natives, np.asarray(labels, dtype=np.float32)


def iter_batches(dataset: Dataset, ids: Sequence[str], resolution: int,
                 batch_size: int, *, augment_cfg: AugmentationConfig | None = None,
                 seed: int = 0, epoch: int = 0, shuffle: bool = False) -> Iterator[Batch]:
    """Single-resolution stream of normalized image batches."""
    for chunk, natives, labels in _native_stream(dataset, ids, batch_size,
                                                 augment_cfg, seed, epoch, shuffle):
        images = np.stack([normalize(resample(n, resolution)) for n in natives])
        yield Batch(chunk, images, labels)


def multi_res_batches(dataset: Dataset, ids: Sequence[str],
                      resolutions: Sequence[int], batch_size: int, *,
                      augment_cfg: AugmentationConfig | None = None, seed: int = 0,
                      epoch: int = 0, shuffle: bool = False) -> Iterator[dict[int, Batch]]:
    """Aligned per-resolution streams: one sample order, one augmentation draw,
    then resampling per resolution so every stream sees the same content."""
    resolutions = tuple(resolutions)
    for chunk, natives, labels in _native_stream(dataset, ids, batch_size,
                                                 augment_cfg, seed, epoch, shuffle):
        yield {
            r: Batch(chunk,
                     np.stack([normalize(resample(n, r)) for n in natives]),
                     labels)
            for r in resolutions
        }


def partition_batches(dataset: Dataset, partition: str, resolutions, batch_size: int,
                      *, augment_cfg: AugmentationConfig | None = None, seed: int = 0,
                      epoch: int = 0, shuffle: bool = False):
    """Stream one partition; augmentation is only ever applied to train data."""
    if partition != "train":
        augment_cfg = None
    ids = dataset.manifest.partition_ids(partition)
    if isinstance(resolutions, int):
        return iter_batches(dataset, ids, resolutions, batch_size,
                            augment_cfg=augment_cfg, seed=seed, epoch=epoch,
                            shuffle=shuffle)
    return multi_res_batches(dataset, ids, resolutions, batch_size,
                             augment_cfg=augment_cfg, seed=seed, epoch=epoch,
                             shuffle=shuffle)
