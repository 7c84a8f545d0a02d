"""Synthetic Gaussian-class datasets and IDX (MNIST format) file I/O."""

import struct

import numpy as np

from .flsim import Dataset

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


def gen_synthetic_dataset(n_classes, per_class_count, input_shape, separation, seed):
    """Class ``c`` ~ N(separation * u_c, I) with ``u_c`` a random unit direction."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if per_class_count < 1:
        raise ValueError("per_class_count must be >= 1")
    input_shape = (int(input_shape),) if np.isscalar(input_shape) else tuple(input_shape)
    dim = int(np.prod(input_shape))
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    labels = np.repeat(np.arange(n_classes), per_class_count)
    x = means[labels] + rng.standard_normal((labels.size, dim))
    return Dataset(x.reshape(labels.size, *input_shape), labels, n_classes)


def _read_header(buf, path, magic, ndims):
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated file, missing magic number")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic number 0x{got:08x}, expected 0x{magic:08x}")
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header, expected {ndims} dimension fields")
    return struct.unpack(f">{ndims}I", buf[4:need]), need


def read_idx_images(path):
    with open(path, "rb") as f:
        buf = f.read()
    (count, rows, cols), off = _read_header(buf, path, IMAGE_MAGIC, 3)
    size = count * rows * cols
    if len(buf) - off < size:
        raise FormatError(f"{path}: truncated pixel data, count={count} needs {size} bytes")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=size, offset=off)
    return pixels.reshape(count, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path):
    with open(path, "rb") as f:
        buf = f.read()
    (count,), off = _read_header(buf, path, LABEL_MAGIC, 1)
    if len(buf) - off < count:
        raise FormatError(f"{path}: truncated label data, count={count}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off).astype(np.int64)


def load_idx_dataset(image_path, label_path, n_classes=None, flatten=True):
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch: {image_path} has {images.shape[0]} images, "
            f"{label_path} has {labels.shape[0]} labels"
        )
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    x = images.reshape(images.shape[0], -1) if flatten else images[:, None]
    return Dataset(x, labels, n_classes)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, count, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())
