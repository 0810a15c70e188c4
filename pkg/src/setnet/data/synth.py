"""Labelled primitive shapes: a small stand-in for CAD model collections.

Every cloud is sampled uniformly by area from the surface of a randomly
proportioned primitive and carries per-point part labels and exact normals.
Part labels are global across classes so one segmenter can serve all of
them; ``PART_SETS`` lists which labels belong to which class.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .cloud import PointCloud, normalize_unit_sphere

SHAPES = ("sphere", "cube", "cylinder", "cone")

# sphere: whole surface | cube: z faces, side faces
# cylinder: side, caps | cone: base, lateral surface
PART_SETS = {
    "sphere": (0,),
    "cube": (1, 2),
    "cylinder": (3, 4),
    "cone": (5, 6),
}
NUM_PARTS = 7


@dataclass(frozen=True)
class SynthSpec:
    classes: tuple = SHAPES
    points: int = 256
    clouds_per_class: int = 200
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ConfigError(f"unknown shape classes {sorted(unknown)}")
        if self.points < 1 or self.clouds_per_class < 1:
            raise ConfigError("points and clouds_per_class must be positive")


def _sphere(rng, n):
    p = rng.normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return p, np.zeros(n, dtype=np.int64), p.copy()


def _cube(rng, n):
    half = rng.uniform(0.6, 1.0, size=3)
    area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=area / area.sum())
    sign = rng.choice([-1.0, 1.0], size=n)
    p = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    normals = np.zeros((n, 3))
    rows = np.arange(n)
    p[rows, axis] = sign * half[axis]
    normals[rows, axis] = sign
    labels = np.where(axis == 2, 1, 2)
    return p, labels, normals


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return r * np.cos(phi), r * np.sin(phi)


def _cylinder(rng, n):
    radius = rng.uniform(0.4, 0.8)
    half_height = rng.uniform(0.5, 1.0)
    side_area = 2.0 * np.pi * radius * 2.0 * half_height
    cap_area = 2.0 * np.pi * radius ** 2
    on_side = rng.uniform(size=n) < side_area / (side_area + cap_area)
    p = np.empty((n, 3))
    normals = np.zeros((n, 3))
    k = int(on_side.sum())
    phi = rng.uniform(0.0, 2.0 * np.pi, size=k)
    p[on_side] = np.column_stack([radius * np.cos(phi), radius * np.sin(phi),
                                  rng.uniform(-half_height, half_height, size=k)])
    normals[on_side] = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(k)])
    caps = ~on_side
    m = n - k
    x, y = _disk(rng, m, radius)
    sign = rng.choice([-1.0, 1.0], size=m)
    p[caps] = np.column_stack([x, y, sign * half_height])
    normals[caps] = np.column_stack([np.zeros(m), np.zeros(m), sign])
    labels = np.where(on_side, 3, 4)
    return p, labels, normals


def _cone(rng, n):
    radius = rng.uniform(0.5, 0.9)
    height = rng.uniform(1.0, 1.8)
    slant = np.hypot(radius, height)
    lateral_area = np.pi * radius * slant
    base_area = np.pi * radius ** 2
    on_lateral = rng.uniform(size=n) < lateral_area / (lateral_area + base_area)
    p = np.empty((n, 3))
    normals = np.empty((n, 3))
    k = int(on_lateral.sum())
    t = np.sqrt(rng.uniform(size=k))  # area grows linearly with distance from the apex
    phi = rng.uniform(0.0, 2.0 * np.pi, size=k)
    p[on_lateral] = np.column_stack([radius * t * np.cos(phi), radius * t * np.sin(phi),
                                     height * (1.0 - t)])
    nl = np.column_stack([height * np.cos(phi), height * np.sin(phi), np.full(k, radius)])
    normals[on_lateral] = nl / np.linalg.norm(nl, axis=1, keepdims=True)
    base = ~on_lateral
    m = n - k
    x, y = _disk(rng, m, radius)
    p[base] = np.column_stack([x, y, np.zeros(m)])
    normals[base] = np.array([0.0, 0.0, -1.0])
    labels = np.where(on_lateral, 6, 5)
    return p, labels, normals


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "cone": _cone}


def sample_shape(shape, n, rng, noise=0.0):
    """One unit-sphere-normalized cloud of ``shape`` with labels and normals."""
    points, labels, normals = _SAMPLERS[shape](rng, n)
    if noise > 0:
        points = points + rng.normal(0.0, noise, size=points.shape)
    return normalize_unit_sphere(PointCloud(points, labels, normals=normals))


def synth_generate(spec):
    """All clouds of ``spec`` in class-major order; a pure function of ``spec``."""
    clouds = []
    for c, shape in enumerate(spec.classes):
        for i in range(spec.clouds_per_class):
            rng = np.random.default_rng([spec.seed, SHAPES.index(shape), i])
            cloud = sample_shape(shape, spec.points, rng, spec.noise)
            cloud.class_label = c
            cloud.id = f"{shape}-{i:04d}"
            clouds.append(cloud)
    return clouds


def part_sets(classes=SHAPES):
    """Part labels of each class index, for mIoU and restricted prediction."""
    return {c: PART_SETS[shape] for c, shape in enumerate(classes)}


def is_test_id(cloud_id, test_fraction=0.2):
    bucket = zlib.crc32(cloud_id.encode()) % 1000
    return bucket < int(round(test_fraction * 1000))


def split_dataset(clouds, test_fraction=0.2):
    """Deterministic train/test split keyed on a hash of each cloud id."""
    train = [c for c in clouds if not is_test_id(c.id, test_fraction)]
    test = [c for c in clouds if is_test_id(c.id, test_fraction)]
    return train, test
