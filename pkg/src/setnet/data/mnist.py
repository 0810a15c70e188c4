"""MNIST digits as 2-D point sets.

IDX layout (all integers big-endian)::

    images: magic 2051, count, rows, cols, then count*rows*cols unsigned bytes
    labels: magic 2049, count, then count unsigned bytes

Files may be gzip-compressed; the ``.gz`` suffix selects decompression.
"""

import gzip
import struct

import numpy as np

from ..errors import EmptySetError, ParseError
from .cloud import PointCloud

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
SET_SIZE = 256
THRESHOLD = 128


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx_images(path):
    with _open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise ParseError("truncated IDX header", path=path)
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IMAGE_MAGIC:
            raise ParseError(f"image magic {magic} != {IMAGE_MAGIC}", path=path)
        body = fh.read()
    if len(body) != count * rows * cols:
        raise ParseError(f"expected {count * rows * cols} pixel bytes, found {len(body)}", path=path)
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path):
    with _open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise ParseError("truncated IDX header", path=path)
        magic, count = struct.unpack(">II", head)
        if magic != LABEL_MAGIC:
            raise ParseError(f"label magic {magic} != {LABEL_MAGIC}", path=path)
        body = fh.read()
    if len(body) != count:
        raise ParseError(f"expected {count} label bytes, found {len(body)}", path=path)
    return np.frombuffer(body, dtype=np.uint8).copy()


def write_idx_images(images, path):
    images = np.asarray(images, dtype=np.uint8)
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(labels, path):
    labels = np.asarray(labels, dtype=np.uint8)
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.size))
        fh.write(labels.tobytes())


def mnist_to_pointset(image, rng=None, set_size=SET_SIZE, threshold=THRESHOLD, label=None, id=""):
    """Pixels brighter than ``threshold`` as points in ``[-1, 1]^2`` (y up).

    Sets larger than ``set_size`` are subsampled uniformly at random; smaller
    ones are padded by cycling through the lit pixels in index order.
    Repeating a point never changes a max-pooled feature.
    """
    image = np.asarray(image)
    rows, cols = np.nonzero(image > threshold)
    if rows.size == 0:
        raise EmptySetError("no pixel above the threshold")
    h, w = image.shape
    x = cols / (w - 1) * 2.0 - 1.0
    y = 1.0 - rows / (h - 1) * 2.0
    points = np.column_stack([x, y])
    if points.shape[0] > set_size:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(points.shape[0], size=set_size, replace=False))
        points = points[idx]
    elif points.shape[0] < set_size:
        points = points[np.arange(set_size) % points.shape[0]]
    return PointCloud(points, class_label=None if label is None else int(label), id=id)


def load_mnist_pointsets(images_path, labels_path, limit=None, seed=0, prefix="mnist"):
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    count = images.shape[0] if limit is None else min(limit, images.shape[0])
    clouds = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        clouds.append(mnist_to_pointset(images[i], rng, label=labels[i], id=f"{prefix}-{i:05d}"))
    return clouds
