"""Image dataset loading: CIFAR-10 binary files and a synthetic stand-in.

CIFAR-10 binary records are 1 label byte followed by 3072 pixel bytes
(channel-major). Pixels are scaled to [0, 1] and normalized per channel with
the dataset-wide constants below; no augmentation is applied. The synthetic
format emits Gaussian class clusters of the same tensor shape so every
image-classify experiment runs without external data.
"""

import os
from dataclasses import dataclass

import numpy as np

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])
RECORD_BYTES = 1 + 3072
IMAGE_SHAPE = (3, 32, 32)


@dataclass
class ImageDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def normalize_pixels(raw):
    """uint8 (n, 3, 32, 32) -> float64, scaled to [0,1] then per-channel
    standardized with the CIFAR-10 training-set constants."""
    x = raw.astype(np.float64) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def _read_cifar_file(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) == 0 or len(buf) % RECORD_BYTES != 0:
        offset = (len(buf) // RECORD_BYTES) * RECORD_BYTES
        raise ValueError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file size {len(buf)} is not a multiple of {RECORD_BYTES})"
        )
    records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.intp)
    if labels.max(initial=0) > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise ValueError(f"{path}: invalid label at byte offset {bad * RECORD_BYTES}")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return images, labels


def load_cifar10_binary(path):
    """Load from a directory holding data_batch_*.bin / test_batch.bin, or a
    single .bin file (last tenth held out as the test split)."""
    if os.path.isdir(path):
        train_files = sorted(
            f for f in os.listdir(path) if f.startswith("data_batch") and f.endswith(".bin")
        )
        if not train_files:
            raise ValueError(f"{path}: no data_batch_*.bin files found")
        xs, ys = zip(*(_read_cifar_file(os.path.join(path, f)) for f in train_files))
        train_x = np.concatenate(xs)
        train_y = np.concatenate(ys)
        test_path = os.path.join(path, "test_batch.bin")
        if os.path.exists(test_path):
            test_x, test_y = _read_cifar_file(test_path)
        else:
            split = int(0.9 * len(train_x))
            train_x, test_x = train_x[:split], train_x[split:]
            train_y, test_y = train_y[:split], train_y[split:]
    elif os.path.exists(path):
        x, y = _read_cifar_file(path)
        split = int(0.9 * len(x))
        train_x, test_x = x[:split], x[split:]
        train_y, test_y = y[:split], y[split:]
    else:
        raise ValueError(f"dataset path does not exist: {path}")
    return ImageDataset(
        train_x=normalize_pixels(train_x),
        train_y=train_y,
        test_x=normalize_pixels(test_x),
        test_y=test_y,
    )


def synthetic_dataset(num_classes, train_size, test_size, cluster_std, rng, shape=IMAGE_SHAPE,
                      modes=1):
    """Gaussian-mixture class clusters in normalized feature space.

    With modes=1 each class is a single Gaussian blob. With modes=2 each
    class is an antipodal pair (+mu_c and -mu_c), which no linear classifier
    on raw pixels can separate, so accuracy depends on learned hidden
    features rather than on the exactly-trained output layer alone.
    """
    if modes not in (1, 2):
        raise ValueError("modes must be 1 or 2")
    means = rng.standard_normal((num_classes,) + shape)

    def draw(count):
        labels = np.arange(count, dtype=np.intp) % num_classes
        rng.shuffle(labels)
        x = means[labels]
        if modes == 2:
            sign = rng.choice([-1.0, 1.0], size=(count,) + (1,) * len(shape))
            x = x * sign
        x = x + cluster_std * rng.standard_normal((count,) + shape)
        return x, labels

    train_x, train_y = draw(train_size)
    test_x, test_y = draw(test_size)
    return ImageDataset(train_x, train_y, test_x, test_y)


def load_image_dataset(path, data_format, num_classes=10, train_size=3200, test_size=800,
                       cluster_std=1.0, rng=None, modes=1):
    if data_format == "cifar10-binary":
        return load_cifar10_binary(path)
    if data_format == "synthetic":
        if rng is None:
            raise ValueError("synthetic data needs an rng")
        return synthetic_dataset(num_classes, train_size, test_size, cluster_std, rng, modes=modes)
    raise ValueError(f"unknown data format {data_format!r}")
