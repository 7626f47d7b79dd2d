"""Dataset ingestion, normalization, run sampling, and exact-duplicate scanning.

Images are stored as float arrays of raw byte values (0..255) until
`normalize` maps them to [-1, 1]; labels are 1-based everywhere. Duplicate
detection operates on the raw decoded bytes, so it is independent of
normalization.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801

CIFAR100_FINE_LABELS = (
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee", "beetle",
    "bicycle", "bottle", "bowl", "boy", "bridge", "bus", "butterfly", "camel",
    "can", "castle", "caterpillar", "cattle", "chair", "chimpanzee", "clock",
    "cloud", "cockroach", "couch", "crab", "crocodile", "cup", "dinosaur",
    "dolphin", "elephant", "flatfish", "forest", "fox", "girl", "hamster",
    "house", "kangaroo", "keyboard", "lamp", "lawn_mower", "leopard", "lion",
    "lizard", "lobster", "man", "maple_tree", "motorcycle", "mountain", "mouse",
    "mushroom", "oak_tree", "orange", "orchid", "otter", "palm_tree", "pear",
    "pickup_truck", "pine_tree", "plain", "plate", "poppy", "porcupine",
    "possum", "rabbit", "raccoon", "ray", "road", "rocket", "rose", "sea",
    "seal", "shark", "shrew", "skunk", "skyscraper", "snail", "snake", "spider",
    "squirrel", "streetcar", "sunflower", "sweet_pepper", "table", "tank",
    "telephone", "television", "tiger", "tractor", "train", "trout", "tulip",
    "turtle", "wardrobe", "whale", "willow_tree", "wolf", "woman", "worm",
)


class DatasetFormatError(ValueError):
    """A dataset file does not match its declared binary format."""


@dataclass(frozen=True)
class Sample:
    image: np.ndarray   # (C, H, W) float32; raw 0..255 until normalized
    label: int          # 1..L
    source_id: int      # index in the originating dataset


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    split: str                     # "train" | "test" | "synthetic"
    num_classes: int
    normalized: bool = False
    label_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.samples:
            raise ValueError("dataset must be non-empty")
        shape = self.samples[0].image.shape
        for s in self.samples:
            if s.image.shape != shape:
                raise ValueError("all images must share one shape")
            if not 1 <= s.label <= self.num_classes:
                raise ValueError(f"label {s.label} outside 1..{self.num_classes}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.samples[0].image.shape

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """(N,C,H,W) float32 images and (N,) int64 labels, in order."""
        xs = np.stack([s.image for s in self.samples]).astype(np.float32)
        ys = np.array([s.label for s in self.samples], dtype=np.int64)
        return xs, ys

    def label_name(self, label: int) -> str:
        if self.label_names is not None:
            return self.label_names[label - 1]
        return str(label)


@dataclass(frozen=True)
class RunDraw:
    member_flag: int        # t: 1 if the target is inside the training set
    training_set: Dataset
    target: Sample

    def __post_init__(self):
        ids = {s.source_id for s in self.training_set.samples}
        inside = self.target.source_id in ids
        if bool(self.member_flag) != inside:
            raise ValueError("member flag disagrees with the drawn sets")


# -- parsers ----------------------------------------------------------------


def _read_exact(data: bytes, offset: int, count: int, what: str) -> bytes:
    if len(data) < offset + count:
        raise DatasetFormatError(
            f"truncated {what}: expected {offset + count} bytes, file has {len(data)}")
    return data[offset:offset + count]


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse the big-endian IDX pair; labels shift from raw 0..9 to 1..10."""
    with open(images_path, "rb") as fh:
        img_data = fh.read()
    with open(labels_path, "rb") as fh:
        lbl_data = fh.read()

    magic, n, rows, cols = struct.unpack(">IIII", _read_exact(img_data, 0, 16, "image header"))
    if magic != MNIST_IMAGE_MAGIC:
        raise DatasetFormatError(f"bad image magic 0x{magic:08x}, "
                                 f"expected 0x{MNIST_IMAGE_MAGIC:08x}")
    lmagic, ln = struct.unpack(">II", _read_exact(lbl_data, 0, 8, "label header"))
    if lmagic != MNIST_LABEL_MAGIC:
        raise DatasetFormatError(f"bad label magic 0x{lmagic:08x}, "
                                 f"expected 0x{MNIST_LABEL_MAGIC:08x}")
    if n != ln:
        raise DatasetFormatError(f"image file holds {n} items, label file {ln}")
    if n == 0:
        raise DatasetFormatError("files declare zero items")

    pixels = _read_exact(img_data, 16, n * rows * cols, "image payload")
    labels = _read_exact(lbl_data, 8, n, "label payload")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, rows, cols)
    samples = tuple(
        Sample(image=images[i].astype(np.float32), label=int(labels[i]) + 1, source_id=i)
        for i in range(n))
    return Dataset(samples=samples, split=split, num_classes=10)


def load_cifar(path, variant: str, split: str = "train") -> Dataset:
    """Parse one CIFAR binary file.

    cifar10 records are 1 label byte + 3072 image bytes; cifar100-fine
    records carry a coarse byte (ignored) then the fine label byte.
    """
    if variant == "cifar10":
        head, num_classes, names = 1, 10, None
    elif variant == "cifar100-fine":
        head, num_classes, names = 2, 100, CIFAR100_FINE_LABELS
    else:
        raise ValueError(f"unknown variant {variant!r}")
    with open(path, "rb") as fh:
        data = fh.read()
    record = head + 3072
    if len(data) == 0 or len(data) % record:
        raise DatasetFormatError(
            f"file length {len(data)} is not a positive multiple of the "
            f"{record}-byte {variant} record")
    n = len(data) // record
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, record)
    images = raw[:, head:].reshape(n, 3, 32, 32)
    labels = raw[:, head - 1]
    samples = tuple(
        Sample(image=images[i].astype(np.float32), label=int(labels[i]) + 1, source_id=i)
        for i in range(n))
    return Dataset(samples=samples, split=split, num_classes=num_classes,
                   label_names=names)


# -- normalization -----------------------------------------------------------


def normalize(dataset: Dataset) -> Dataset:
    """Map raw pixels p -> (p/255 - 0.5)/0.5, range [-1, 1]."""
    if dataset.normalized:
        raise ValueError("dataset is already normalized")
    samples = tuple(
        replace(s, image=((s.image / np.float32(255) - np.float32(0.5)) / np.float32(0.5)))
        for s in dataset.samples)
    return replace(dataset, samples=samples, normalized=True)


def denormalize(dataset: Dataset) -> Dataset:
    if not dataset.normalized:
        raise ValueError("dataset is not normalized")
    samples = tuple(
        replace(s, image=((s.image * np.float32(0.5) + np.float32(0.5)) * np.float32(255)))
        for s in dataset.samples)
    return replace(dataset, samples=samples, normalized=False)


# -- run sampling -------------------------------------------------------------


def sample_run(source: Dataset, num_samples: int, member_flag: int, seed: int) -> RunDraw:
    """Draw a size-N training set and a target inside (t=1) or outside (t=0) it."""
    if num_samples >= len(source):
        raise ValueError(f"need num_samples < |source| ({num_samples} >= {len(source)})")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(source), size=num_samples, replace=False)
    if member_flag:
        target = source.samples[int(rng.choice(chosen))]
    else:
        outside = np.setdiff1d(np.arange(len(source)), chosen, assume_unique=False)
        target = source.samples[int(rng.choice(outside))]
    training = replace(source, samples=tuple(source.samples[int(i)] for i in chosen))
    return RunDraw(member_flag=int(bool(member_flag)), training_set=training,
                   target=target)


# -- duplicate scanning --------------------------------------------------------


@dataclass(frozen=True)
class DuplicateReport:
    within_train: tuple[tuple[int, ...], ...]          # id groups, byte-identical
    cross_split: tuple[tuple[int, int], ...]           # (train_id, test_id)
    mismatched_within: tuple[tuple[int, ...], ...]     # groups with >1 distinct label
    mismatched_cross: tuple[tuple[int, int], ...]      # pairs with differing labels
    cross_images: int                                  # distinct shared contents

    def within_train_pairs(self) -> list[tuple[int, int]]:
        pairs = []
        for group in self.within_train:
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    pairs.append((group[i], group[j]))
        return pairs


def _raw_bytes(sample: Sample) -> bytes:
    img = np.ascontiguousarray(sample.image)
    if img.min() < 0 or img.max() > 255:
        raise ValueError(f"sample {sample.source_id} has pixel values outside "
                         "0..255; duplicate scanning needs raw byte data")
    return img.astype(np.uint8).tobytes()


def _content_groups(dataset: Dataset) -> dict[bytes, list[int]]:
    """Group sample indices by image content: hash first, byte-verify after."""
    by_hash: dict[bytes, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        digest = hashlib.sha256(_raw_bytes(s)).digest()
        by_hash.setdefault(digest, []).append(i)
    groups: dict[bytes, list[int]] = {}
    for members in by_hash.values():
        verified: list[tuple[bytes, list[int]]] = []
        for i in members:
            raw = _raw_bytes(dataset.samples[i])
            for existing_raw, bucket in verified:
                if raw == existing_raw:
                    bucket.append(i)
                    break
            else:
                verified.append((raw, [i]))
        for raw, bucket in verified:
            groups[raw] = bucket
    return groups


def find_exact_duplicates(train: Dataset, test: Dataset) -> DuplicateReport:
    """Byte-identical image groups within train and across the two splits."""
    if train.image_shape != test.image_shape:
        raise ValueError(f"image shapes differ: {train.image_shape} vs {test.image_shape}")
    if train.normalized or test.normalized:
        raise ValueError("duplicate scan operates on raw-valued datasets")

    train_groups = _content_groups(train)
    test_groups = _content_groups(test)

    within, mism_within = [], []
    for raw, members in train_groups.items():
        if len(members) < 2:
            continue
        ids = tuple(train.samples[i].source_id for i in members)
        within.append(ids)
        if len({train.samples[i].label for i in members}) > 1:
            mism_within.append(ids)

    cross, mism_cross = [], []
    shared = set(train_groups) & set(test_groups)
    for raw in shared:
        for i in train_groups[raw]:
            for j in test_groups[raw]:
                pair = (train.samples[i].source_id, test.samples[j].source_id)
                cross.append(pair)
                if train.samples[i].label != test.samples[j].label:
                    mism_cross.append(pair)

    return DuplicateReport(
        within_train=tuple(sorted(within)),
        cross_split=tuple(sorted(cross)),
        mismatched_within=tuple(sorted(mism_within)),
        mismatched_cross=tuple(sorted(mism_cross)),
        cross_images=len(shared),
    )


def duplicate_report_rows(report: DuplicateReport, train: Dataset,
                          test: Dataset) -> list[tuple[str, int, int, str, str]]:
    """CSV rows: kind, train_id, other_id, label_a, label_b."""
    train_by_id = {s.source_id: s for s in train.samples}
    test_by_id = {s.source_id: s for s in test.samples}
    rows = []
    for a, b in report.within_train_pairs():
        rows.append(("within_train", a, b,
                     train.label_name(train_by_id[a].label),
                     train.label_name(train_by_id[b].label)))
    for a, b in report.cross_split:
        rows.append(("cross_split", a, b,
                     train.label_name(train_by_id[a].label),
                     test.label_name(test_by_id[b].label)))
    return rows


# -- synthetic data ------------------------------------------------------------


def synth_dataset(num_samples: int, num_classes: int = 10,
                  image_shape: tuple[int, int, int] = (1, 14, 14),
                  seed: int = 0) -> Dataset:
    """Seeded uniform-random raw images; all samples guaranteed pairwise distinct."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(num_samples, *image_shape), dtype=np.int64)
    labels = rng.integers(1, num_classes + 1, size=num_samples)
    # redraw any colliding images so the distinctness guarantee is unconditional
    while True:
        seen: dict[bytes, int] = {}
        dupes = []
        for i in range(num_samples):
            key = images[i].tobytes()
            if key in seen:
                dupes.append(i)
            else:
                seen[key] = i
        if not dupes:
            break
        for i in dupes:
            images[i] = rng.integers(0, 256, size=image_shape, dtype=np.int64)
    samples = tuple(
        Sample(image=images[i].astype(np.float32), label=int(labels[i]), source_id=i)
        for i in range(num_samples))
    return Dataset(samples=samples, split="synthetic", num_classes=num_classes)


# -- fixture writers (tiny files in the real binary formats) -------------------


def write_mnist_fixture(images_path, labels_path, images: np.ndarray,
                        labels: np.ndarray) -> None:
    """Write a valid IDX pair from uint8 images (N, rows, cols) and raw labels 0..9."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", MNIST_IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", MNIST_LABEL_MAGIC, n))
        fh.write(labels.tobytes())


def write_cifar_fixture(path, images: np.ndarray, fine_labels: np.ndarray,
                        coarse_labels: np.ndarray | None = None) -> None:
    """Write CIFAR records from uint8 images (N, 3, 32, 32).

    With coarse labels the cifar100 layout is produced, otherwise cifar10.
    """
    images = np.asarray(images, dtype=np.uint8)
    fine = np.asarray(fine_labels, dtype=np.uint8)
    n = len(images)
    with open(path, "wb") as fh:
        for i in range(n):
            if coarse_labels is not None:
                fh.write(bytes([int(coarse_labels[i])]))
            fh.write(bytes([int(fine[i])]))
            fh.write(images[i].tobytes())
