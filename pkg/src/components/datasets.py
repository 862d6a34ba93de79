import gzip
import logging
import struct
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.models.data import LabeledDataset, Split
from src.models.specs import DatasetSource
from src.utils.errors import DataFormatError
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3072
CIFAR_RECORD = 1 + CIFAR_PIXELS
CIFAR_FINE_RECORD = 2 + CIFAR_PIXELS

PathLike = Union[str, Path]


def _read_bytes(path: PathLike) -> bytes:
    """Raw file contents; ``.gz`` files are decompressed transparently."""
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as handle:
                return handle.read()
        return path.read_bytes()
    except (OSError, EOFError) as e:
        raise DataFormatError(f"Cannot read {path}: {e}") from e


def _idx_payload(path: PathLike, expected_magic: int) -> Tuple[Tuple[int, ...], bytes]:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")

    rank = magic & 0xFF
    header_size = 4 + 4 * rank
    if len(raw) < header_size:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", raw[4:header_size])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = raw[header_size:]
    if len(payload) != expected:
        raise DataFormatError(f"{path}: header declares {expected} bytes of data, file holds {len(payload)}")
    return dims, payload


def load_idx(images_path: PathLike, labels_path: PathLike, split: Split = "train") -> LabeledDataset:
    """
    Load an IDX image/label pair (MNIST and Fashion-MNIST layout).

    Headers are big-endian; pixels are scaled to [0, 1] by dividing by 255 and
    returned as [n, 1, rows, cols].
    """
    image_dims, image_bytes = _idx_payload(images_path, IDX_IMAGES_MAGIC)
    label_dims, label_bytes = _idx_payload(labels_path, IDX_LABELS_MAGIC)
    if image_dims[0] != label_dims[0]:
        raise DataFormatError(f"{images_path} holds {image_dims[0]} images but {labels_path} holds {label_dims[0]} labels")

    count, rows, cols = image_dims
    pixels = np.frombuffer(image_bytes, dtype=np.uint8).reshape(count, 1, rows, cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    dataset = LabeledDataset(
        inputs=pixels.astype(np.float32) / np.float32(255.0),
        labels=labels,
        class_universe=tuple(np.unique(labels).tolist()),
        split=split,
    )
    logger.info(f"Loaded {count} IDX samples of {rows}x{cols} from {images_path}")
    return dataset


def load_cifar_binary(paths: Sequence[PathLike], split: Split = "train",
                      fine_labels: Optional[bool] = None) -> LabeledDataset:
    """
    Load CIFAR binary record files.

    Records are 3073 bytes (label + 3072 CHW pixels) or, for the coarse+fine
    variant, 3074 bytes of which the fine label is used. ``fine_labels`` picks
    the variant explicitly; by default it is inferred from the file length.
    """
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if fine_labels is None:
            record = CIFAR_RECORD if len(raw) % CIFAR_RECORD == 0 else CIFAR_FINE_RECORD
        else:
            record = CIFAR_FINE_RECORD if fine_labels else CIFAR_RECORD
        if not raw or len(raw) % record:
            raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of the {record}-byte record size")

        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        label_bytes = record - CIFAR_PIXELS
        labels.append(records[:, label_bytes - 1].astype(np.int64))
        images.append(records[:, label_bytes:].reshape(-1, 3, 32, 32))
        logger.info(f"Read {records.shape[0]} CIFAR records from {path}")

    if not images:
        raise DataFormatError("no CIFAR files given")
    all_labels = np.concatenate(labels)
    return LabeledDataset(
        inputs=np.concatenate(images).astype(np.float32) / np.float32(255.0),
        labels=all_labels,
        class_universe=tuple(np.unique(all_labels).tolist()),
        split=split,
    )


def synth_blobs(num_classes: int, per_class_train: int, per_class_test: int, dim: int,
                spread: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    Gaussian blobs around class centers drawn uniformly in [0.2, 0.8]^dim.

    Samples are center + N(0, spread^2) clamped to [0, 1]; fully determined by ``seed``.

    Returns:
        (train, test) datasets, samples grouped by class in ascending order
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be at least 2, got {num_classes}")
    if dim < 2:
        raise ValueError(f"dim must be at least 2, got {dim}")

    rng = make_rng(seed, "synth-blobs")
    centers = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    universe = tuple(range(num_classes))

    def _draw(per_class: int, split: Split) -> LabeledDataset:
        labels = np.repeat(np.arange(num_classes), per_class)
        noise = rng.normal(0.0, 1.0, size=(labels.size, dim)) * spread
        inputs = np.clip(centers[labels] + noise, 0.0, 1.0)
        return LabeledDataset(inputs=inputs, labels=labels, class_universe=universe, split=split)

    train = _draw(per_class_train, "train")
    test = _draw(per_class_test, "test")
    logger.debug(f"Generated synth blobs: {num_classes} classes, dim {dim}, {len(train)} train / {len(test)} test")
    return train, test


def load_source(source: DatasetSource) -> Tuple[LabeledDataset, LabeledDataset]:
    """Train and test splits for a configured dataset source."""
    try:
        if source.kind == "synth":
            return synth_blobs(source.num_classes, source.per_class_train, source.per_class_test,
                               source.dim, source.spread, source.seed)
        if source.kind == "idx":
            return (
                load_idx(source.train_images, source.train_labels, "train"),
                load_idx(source.test_images, source.test_labels, "test"),
            )
        return (
            load_cifar_binary(source.train_files, "train", source.fine_labels),
            load_cifar_binary(source.test_files, "test", source.fine_labels),
        )
    except DataFormatError as e:
        logger.error(f"Error loading {source.kind} dataset: {str(e)}")
        raise
