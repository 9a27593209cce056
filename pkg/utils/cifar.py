"""CIFAR-10 binary batches, patch tokenisation and flip/crop augmentation."""

import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from core.errors import FormatError, ParameterError

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32
CHANNELS = 3
RECORD_BYTES = 1 + IMAGE_SIZE * IMAGE_SIZE * CHANNELS
NUM_CLASSES = 10
CROP_PAD = 4

TRAIN_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_BATCH = "test_batch.bin"
LABEL_NAMES = ["airplane", "automobile", "bird", "cat", "deer",
               "dog", "frog", "horse", "ship", "truck"]


def decode_records(blob: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    if len(blob) % RECORD_BYTES != 0:
        raise FormatError(f"{source}: {len(blob)} bytes is not a whole number of "
                          f"{RECORD_BYTES}-byte records")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise FormatError(f"{source}: record {bad} has label {labels[bad]}, expected 0..9")
    # stored channel-planar (R plane, G plane, B plane); returned channel-last
    planes = records[:, 1:].reshape(-1, CHANNELS, IMAGE_SIZE, IMAGE_SIZE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


def read_cifar10(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """Images as (n, 32, 32, 3) floats in [0, 1] and labels in 0..9."""
    path = Path(path)
    images, labels = decode_records(path.read_bytes(), str(path))
    logger.debug("read %d images from %s", len(labels), path)
    return images, labels


def load_cifar_dir(data_dir: Union[str, Path], subset: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    data_dir = Path(data_dir)
    if subset == "train":
        names = TRAIN_BATCHES
    elif subset == "test":
        names = [TEST_BATCH]
    else:
        raise ParameterError(f"unknown CIFAR subset '{subset}'")
    paths = [data_dir / n for n in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 batch files not found: {', '.join(missing)}")
    parts = [read_cifar10(p) for p in paths]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def extract_patches(image: np.ndarray, patch_size: int = 4) -> np.ndarray:
    """Row-major non-overlapping patches, each flattened channel-last."""
    height, width, channels = image.shape
    if patch_size < 1 or height % patch_size or width % patch_size:
        raise ParameterError(f"image {height}x{width} is not divisible into {patch_size}-pixel patches")
    rows, cols = height // patch_size, width // patch_size
    grid = image.reshape(rows, patch_size, cols, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return grid.reshape(rows * cols, patch_size * patch_size * channels)


def assemble_patches(patches: np.ndarray, height: int, width: int, patch_size: int = 4) -> np.ndarray:
    rows, cols = height // patch_size, width // patch_size
    channels = patches.shape[1] // (patch_size * patch_size)
    grid = patches.reshape(rows, cols, patch_size, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return grid.reshape(height, width, channels)


def patchify_batch(images: np.ndarray, patch_size: int = 4) -> np.ndarray:
    return np.stack([extract_patches(img, patch_size) for img in images])


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :]


def random_crop(image: np.ndarray, rng: np.random.Generator, pad: int = CROP_PAD) -> np.ndarray:
    height, width = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    return padded[top:top + height, left:left + width, :]


def augment(image: np.ndarray, seed: int, index: int = 0) -> np.ndarray:
    """Horizontal flip with p=0.5, then a zero-padded random crop; fixed per (seed, index)."""
    rng = np.random.default_rng([seed, index])
    if rng.random() < 0.5:
        image = hflip(image)
    return np.ascontiguousarray(random_crop(image, rng))


def write_cifar10(path: Union[str, Path], images: np.ndarray, labels: List[int]) -> Path:
    """Encode uint8 images (n, 32, 32, 3) back into the binary batch layout."""
    path = Path(path)
    pixels = np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    path.write_bytes(records.tobytes())
    return path
