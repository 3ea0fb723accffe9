"""
Synthetic image datasets, trigger application, poisoning and the UBDS file format.

UBDS layout (all integers little-endian):
    b"UBDS" | u8 version
    version 1 (dataset):  u32 rank | u32 dims[rank] | f32 payload | u32 labels[dims[0]]
                          | u32 class_count | u8 split id
    version 2 (tensors):  u32 count | count x (u16 name length | utf-8 name
                          | u32 rank | u32 dims[rank] | f32 payload)
"""
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from engines.errors import DataFormatError, DatasetError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"UBDS"
DATASET_VERSION = 1
TENSORS_VERSION = 2
SPLITS = ("train", "test", "sample", "poisoned", "subset")


@dataclass(frozen=True)
class DataGenSpec:
    """
    Recipe for a synthetic K-class image dataset.

    Prototypes are drawn on a coarse (H/block x W/block) grid and upsampled, so
    each class is a blocky pattern around mid-grey; samples add Gaussian pixel noise.
    """
    num_classes: int = 16
    channels: int = 3
    height: int = 16
    width: int = 16
    train_per_class: int = 60
    test_per_class: int = 20
    sample_per_class: int = 10
    contrast: float = 0.6
    noise_std: float = 0.05
    block: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DatasetError(f"need at least 2 classes, got {self.num_classes}")
        if min(self.channels, self.height, self.width, self.block) < 1:
            raise DatasetError("image dimensions and block size must be >= 1")
        if self.noise_std < 0:
            raise DatasetError(f"noise std must be >= 0, got {self.noise_std}")
        if not 0 < self.contrast <= 1:
            raise DatasetError(f"contrast must be in (0, 1], got {self.contrast}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise DatasetError("samples per class must be >= 1 for train and test splits")
        if not 0 <= self.sample_per_class <= self.train_per_class:
            raise DatasetError("sample_per_class must lie in [0, train_per_class]")

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def distance_floor(self) -> float:
        """Minimum allowed L2 distance between two prototypes."""
        dim = self.channels * self.height * self.width
        return 0.5 * self.contrast * math.sqrt(dim / 6.0)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labeled images in [0, 1], shape (N, C, H, W)."""
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise ShapeError("dataset", "images must be (N, C, H, W)", images.shape)
        if labels.shape[0] != images.shape[0]:
            raise ShapeError("dataset", "one label per image required", (images.shape[0], labels.shape[0]))
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DatasetError(f"labels must lie in [0, {self.class_count})")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split tag '{self.split}'")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices: Sequence[int], split: str = "subset") -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, split)

    def equals(self, other: "Dataset") -> bool:
        return (self.class_count == other.class_count and self.split == other.split
                and np.array_equal(self.labels, other.labels)
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes())


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    train: Dataset
    test: Dataset
    sample: Dataset
    prototypes: np.ndarray
    spec: DataGenSpec


def _draw_prototypes(spec: DataGenSpec, rng: np.random.Generator) -> np.ndarray:
    c, h, w = spec.image_shape
    gh, gw = math.ceil(h / spec.block), math.ceil(w / spec.block)

    def draw() -> np.ndarray:
        coarse = rng.uniform(0.0, 1.0, size=(c, gh, gw))
        fine = np.repeat(np.repeat(coarse, spec.block, axis=1), spec.block, axis=2)[:, :h, :w]
        return 0.5 + spec.contrast * (fine - 0.5)

    floor = spec.distance_floor()
    prototypes = [draw() for _ in range(spec.num_classes)]
    for k in range(1, spec.num_classes):
        for _ in range(100):
            closest = min(np.linalg.norm(prototypes[k] - prototypes[j]) for j in range(k))
            if closest >= floor:
                break
            prototypes[k] = draw()
        else:
            raise DatasetError(f"could not separate prototype {k} above distance floor {floor:.3f}")
    return np.stack(prototypes).astype(np.float32)


def _draw_split(prototypes: np.ndarray, per_class: int, noise: float,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    k = prototypes.shape[0]
    labels = np.repeat(np.arange(k), per_class)
    images = prototypes[labels]
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape)
    order = rng.permutation(labels.shape[0])
    return np.clip(images[order], 0.0, 1.0).astype(np.float32), labels[order]


def generate_synthetic_dataset(spec: DataGenSpec) -> DatasetBundle:
    """
    Builds train/test splits plus the D_sample subset used for latent coding.

    Same spec (seed included) always yields byte-identical arrays.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    prototypes = _draw_prototypes(spec, rng)
    train_x, train_y = _draw_split(prototypes, spec.train_per_class, spec.noise_std, rng)
    test_x, test_y = _draw_split(prototypes, spec.test_per_class, spec.noise_std, rng)
    train = Dataset(train_x, train_y, spec.num_classes, "train")
    test = Dataset(test_x, test_y, spec.num_classes, "test")

    picks: List[int] = []
    for k in range(spec.num_classes):
        members = np.flatnonzero(train_y == k)
        picks.extend(np.sort(rng.choice(members, size=spec.sample_per_class, replace=False)).tolist())
    sample = Dataset(train_x[picks], train_y[picks], spec.num_classes, "sample")

    logger.info("generated %d-class dataset: %d train / %d test / %d sample images",
                spec.num_classes, len(train), len(test), len(sample))
    return DatasetBundle(train=train, test=test, sample=sample, prototypes=prototypes, spec=spec)


# =============================================================================
# Triggers and poisoning
# =============================================================================

def apply_trigger(images: np.ndarray, trigger: np.ndarray) -> np.ndarray:
    """
    Pixel-wise X + T clamped to [0, 1].

    Args:
        images: One image (C, H, W) or a batch (N, C, H, W)
        trigger: (C, H, W)

    Returns:
        Poisoned image(s), float32, same shape as `images`
    """
    images = np.asarray(images, dtype=np.float32)
    trigger = np.asarray(trigger, dtype=np.float32)
    if images.shape[-3:] != trigger.shape or images.ndim not in (3, 4):
        raise ShapeError("apply_trigger", "image and trigger must share (C, H, W)",
                         images.shape + trigger.shape)
    return np.clip(images + trigger, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class PoisonRecord:
    source_index: int
    target: int
    trigger_id: int


@dataclass(frozen=True, eq=False)
class PoisonedDataset:
    """Training set with `per_class_count` triggered, relabeled images per target class."""
    base: Dataset
    dataset: Dataset
    injected: Tuple[PoisonRecord, ...]
    per_class_count: int

    @property
    def poison_rate(self) -> float:
        return len(self.injected) / len(self.base) if len(self.base) else 0.0

    def injected_indices(self) -> np.ndarray:
        return np.array([r.source_index for r in self.injected], dtype=np.int64)


def poison_dataset(dataset: Dataset, triggers: np.ndarray, per_class: int, seed: int) -> PoisonedDataset:
    """
    Replaces p*K training images (sampled uniformly without replacement across all
    classes) by triggered copies relabeled to their target class.

    Args:
        dataset: Clean training split
        triggers: (K, C, H, W) trigger tensor, one per target class
        per_class: Poisoned images per target class (p)
        seed: RNG seed for source selection
    """
    triggers = np.asarray(triggers, dtype=np.float32)
    k = dataset.class_count
    if triggers.shape != (k,) + dataset.image_shape:
        raise ShapeError("poison_dataset", "need one trigger per class matching image shape",
                         triggers.shape + (k,) + dataset.image_shape)
    if per_class < 0:
        raise DatasetError(f"per-class poison count must be >= 0, got {per_class}")
    needed = per_class * k
    if needed > len(dataset):
        raise DatasetError(f"need {needed} clean images to poison, training split has {len(dataset)}")

    rng = np.random.default_rng(seed)
    sources = rng.choice(len(dataset), size=needed, replace=False) if needed else np.empty(0, dtype=np.int64)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    records = []
    for target in range(k):
        block = sources[target * per_class:(target + 1) * per_class]
        images[block] = apply_trigger(images[block], triggers[target])
        labels[block] = target
        records.extend(PoisonRecord(int(i), target, target) for i in block)

    poisoned = Dataset(images, labels, k, "poisoned")
    result = PoisonedDataset(dataset, poisoned, tuple(records), per_class)
    logger.info("poisoned %d images (%d per class), poison rate %.4f",
                len(records), per_class, result.poison_rate)
    return result


# =============================================================================
# UBDS persistence
# =============================================================================

class _Reader:
    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if count < 0 or end > len(self.buffer):
            raise DataFormatError(f"truncated file while reading {what}", self.offset)
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def text(self, count: int, what: str) -> str:
        start = self.offset
        raw = self.take(count, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError(f"{what} is not valid utf-8", start) from None

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(count * 4, what)
        if count == 0:
            return np.empty(0, dtype=dtype)
        return np.frombuffer(raw, dtype=dtype, count=count).copy()

    def header(self, expected_version: int) -> None:
        if self.take(4, "magic") != MAGIC:
            raise DataFormatError("bad magic bytes", 0)
        version = self.u8("version")
        if version != expected_version:
            raise DataFormatError(f"expected version {expected_version}, found {version}", 4)

    def shaped(self, what: str) -> np.ndarray:
        rank = self.u32(f"{what} rank")
        dims = tuple(self.u32(f"{what} dims") for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        return self.array("<f4", count, f"{what} payload").reshape(dims)

    def finish(self) -> None:
        if self.offset != len(self.buffer):
            raise DataFormatError("trailing bytes after payload", self.offset)


def _shaped_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f4")
    head = struct.pack("<I", array.ndim) + b"".join(struct.pack("<I", d) for d in array.shape)
    return head + array.tobytes(order="C")


def encode_dataset(dataset: Dataset) -> bytes:
    return b"".join([
        MAGIC,
        struct.pack("<B", DATASET_VERSION),
        _shaped_bytes(dataset.images),
        dataset.labels.astype("<u4").tobytes(),
        struct.pack("<I", dataset.class_count),
        struct.pack("<B", SPLITS.index(dataset.split)),
    ])


def decode_dataset(buffer: bytes) -> Dataset:
    reader = _Reader(buffer)
    reader.header(DATASET_VERSION)
    images = reader.shaped("images")
    if images.ndim != 4:
        raise DataFormatError(f"dataset images must have rank 4, found {images.ndim}", 5)
    labels = reader.array("<u4", images.shape[0], "labels").astype(np.int64)
    class_count = reader.u32("class count")
    split_offset = reader.offset
    split_id = reader.u8("split id")
    if split_id >= len(SPLITS):
        raise DataFormatError(f"unknown split id {split_id}", split_offset)
    reader.finish()
    return Dataset(images, labels, class_count, SPLITS[split_id])


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(dataset))
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<B", TENSORS_VERSION), struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(_shaped_bytes(array))
    return b"".join(parts)


def decode_tensors(buffer: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(buffer)
    reader.header(TENSORS_VERSION)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.text(reader.u16("name length"), "tensor name")
        tensors[name] = reader.shaped(name)
    reader.finish()
    return tensors


def save_tensors(tensors: Dict[str, np.ndarray], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    return path


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
