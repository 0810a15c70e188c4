"""Datasets and point-cloud preprocessing."""

from .cloud import (
    CORRUPTIONS,
    PointCloud,
    augment,
    corrupt,
    furthest_point_sample,
    normalize_unit_sphere,
    resample,
    rotate_z,
    sample_unit_ball,
)
from .io import read_cloud_file, read_dataset, write_cloud_file, write_dataset
from .mnist import (
    load_mnist_pointsets,
    mnist_to_pointset,
    read_idx_images,
    read_idx_labels,
    write_idx_images,
    write_idx_labels,
)
from .synth import (
    NUM_PARTS,
    PART_SETS,
    SHAPES,
    SynthSpec,
    is_test_id,
    part_sets,
    split_dataset,
    synth_generate,
)

__all__ = [
    "CORRUPTIONS", "NUM_PARTS", "PART_SETS", "SHAPES", "PointCloud", "SynthSpec", "augment",
    "corrupt", "furthest_point_sample", "is_test_id", "load_mnist_pointsets", "mnist_to_pointset",
    "normalize_unit_sphere", "part_sets", "read_cloud_file", "read_dataset", "read_idx_images",
    "read_idx_labels", "resample", "rotate_z", "sample_unit_ball", "split_dataset",
    "synth_generate", "write_cloud_file", "write_dataset", "write_idx_images", "write_idx_labels",
]
