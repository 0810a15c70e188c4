"""Plain-text point clouds and dataset directories.

Cloud files::

    # setnet-cloud v1 dims=3 labels=1
    0.1 -0.25 0.5 3
    ...

The header is optional; without it the column count of the first record
fixes the dimension and no labels are read.  Floats are written with
``repr`` so reading a written file gives back identical values.

A dataset directory holds ``dataset.txt`` listing one cloud per line::

    # setnet-dataset v1
    # classes sphere cube cylinder cone
    sphere-0000 0 train clouds/sphere-0000.txt
"""

import os
import re

import numpy as np

from ..errors import ParseError
from .cloud import PointCloud

_HEADER = re.compile(r"#\s*setnet-cloud\s+v1\s+dims=(\d+)\s+labels=([01])\s*$")


def write_cloud_file(cloud, path):
    labels = cloud.per_point_labels
    lines = [f"# setnet-cloud v1 dims={cloud.dim} labels={int(labels is not None)}"]
    for i, row in enumerate(cloud.points):
        fields = [repr(float(v)) for v in row]
        if labels is not None:
            fields.append(str(int(labels[i])))
        lines.append(" ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_cloud_file(path, id=None):
    dims = None
    has_labels = False
    points, labels = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _HEADER.match(line)
                if m and not points:
                    dims, has_labels = int(m.group(1)), m.group(2) == "1"
                continue
            parts = line.split()
            if dims is None:
                dims = len(parts)
            expected = dims + int(has_labels)
            if len(parts) != expected:
                raise ParseError(f"expected {expected} columns, found {len(parts)}",
                                 line=lineno, path=path)
            try:
                points.append([float(v) for v in parts[:dims]])
                if has_labels:
                    labels.append(int(parts[dims]))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
    if not points:
        raise ParseError("no points in file", path=path)
    cloud_id = id if id is not None else os.path.splitext(os.path.basename(path))[0]
    return PointCloud(np.array(points), np.array(labels) if has_labels else None, id=cloud_id)


def write_dataset(directory, clouds, splits, classes=()):
    """Write ``clouds`` (with ``splits[i]`` in {train, test}) under ``directory``."""
    os.makedirs(os.path.join(directory, "clouds"), exist_ok=True)
    lines = ["# setnet-dataset v1"]
    if classes:
        lines.append("# classes " + " ".join(classes))
    for cloud, split in zip(clouds, splits):
        rel = os.path.join("clouds", f"{cloud.id}.txt")
        write_cloud_file(cloud, os.path.join(directory, rel))
        label = "-" if cloud.class_label is None else str(cloud.class_label)
        lines.append(f"{cloud.id} {label} {split} {rel}")
    with open(os.path.join(directory, "dataset.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(directory):
    """Return ``(clouds, splits, classes)`` from a dataset directory."""
    index = os.path.join(directory, "dataset.txt")
    if not os.path.exists(index):
        raise ParseError("missing dataset.txt", path=directory)
    clouds, splits, classes = [], [], ()
    with open(index) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# classes "):
                    classes = tuple(line[len("# classes "):].split())
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError("expected: id class split file", line=lineno, path=index)
            cloud_id, label, split, rel = parts
            cloud = read_cloud_file(os.path.join(directory, rel), id=cloud_id)
            cloud.class_label = None if label == "-" else int(label)
            clouds.append(cloud)
            splits.append(split)
    return clouds, splits, classes
