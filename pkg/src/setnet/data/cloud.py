"""Point clouds and the geometric preprocessing applied to them."""

from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError, DimensionError, EmptySetError


@dataclass
class PointCloud:
    """An unordered set of ``n`` points in ``R^m``.

    ``per_point_labels`` holds part labels, ``class_label`` the object class
    (which doubles as the part-segmentation category), ``normals`` optional
    unit normals for the normal-estimation head.
    """

    points: np.ndarray
    per_point_labels: np.ndarray = None
    class_label: int = None
    id: str = ""
    normals: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise DimensionError(f"points must be (n, m), got {self.points.shape}")
        n = self.points.shape[0]
        if self.per_point_labels is not None:
            self.per_point_labels = np.asarray(self.per_point_labels, dtype=np.int64)
            if self.per_point_labels.shape != (n,):
                raise DimensionError(f"{self.per_point_labels.size} labels for {n} points")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise DimensionError("normals must match the points' shape")

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def subset(self, index):
        """The cloud restricted to ``index`` (labels and normals follow)."""
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            points=self.points[index],
            per_point_labels=None if self.per_point_labels is None else self.per_point_labels[index],
            normals=None if self.normals is None else self.normals[index],
        )


def normalize_unit_sphere(cloud):
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((pts * pts).sum(axis=1)).max()
    pts = pts / radius if radius > 0 else np.zeros_like(pts)
    return replace(cloud, points=pts)


def rotate_z(points, angle):
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot


def augment(cloud, rng, sigma=0.02, angle=None):
    """Random rotation about the up (z) axis, then Gaussian jitter.

    Clouds that are not 3-D (MNIST pixel sets) only get the jitter.
    ``angle`` pins the rotation, mainly for tests.
    """
    pts = cloud.points
    if cloud.dim == 3:
        theta = rng.uniform(0.0, 2.0 * np.pi) if angle is None else angle
        pts = rotate_z(pts, theta)
        normals = None if cloud.normals is None else rotate_z(cloud.normals, theta)
    else:
        normals = cloud.normals
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, size=pts.shape)
    return replace(cloud, points=pts, normals=normals)


def furthest_point_sample(points, k, start_index=0):
    """Greedy max-min selection of ``k`` row indices.

    Each step takes the point farthest from everything chosen so far; ties
    go to the lowest index.
    """
    points = np.asarray(getattr(points, "points", points), dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise DimensionError(f"cannot sample {k} of {n} points")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start_index
    diff = points - points[start_index]
    dist = (diff * diff).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        diff = points - points[nxt]
        dist = np.minimum(dist, (diff * diff).sum(axis=1))
    return chosen


def sample_unit_ball(rng, count, dim=3):
    direction = rng.normal(size=(count, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(size=(count, 1)) ** (1.0 / dim)
    return direction * radius


CORRUPTIONS = ("delete_random", "delete_furthest", "outliers", "perturb")


def corrupt(cloud, protocol, severity, rng):
    """Apply one corruption protocol at ``severity``.

    ``delete_random`` drops ``floor(p n)`` points uniformly, ``delete_furthest``
    keeps a furthest-point sample of the rest, ``outliers`` appends
    ``floor(q n)`` points uniform in the unit ball (labelled -1 when the
    cloud carries part labels) and ``perturb`` adds Gaussian noise of
    standard deviation ``severity``.
    """
    n = cloud.n
    if protocol in ("delete_random", "delete_furthest", "outliers") and not 0.0 <= severity < 1.0:
        raise ConfigError(f"{protocol} ratio must lie in [0, 1), got {severity}")
    if protocol == "delete_random":
        drop = int(np.floor(severity * n))
        if n - drop < 1:
            raise EmptySetError("corruption removed every point")
        keep = np.sort(rng.permutation(n)[: n - drop])
        return cloud.subset(keep)
    if protocol == "delete_furthest":
        keep_count = n - int(np.floor(severity * n))
        if keep_count < 1:
            raise EmptySetError("corruption removed every point")
        return cloud.subset(furthest_point_sample(cloud.points, keep_count))
    if protocol == "outliers":
        extra = int(np.floor(severity * n))
        if extra == 0:
            return cloud
        pts = np.vstack([cloud.points, sample_unit_ball(rng, extra, cloud.dim)])
        labels = cloud.per_point_labels
        if labels is not None:
            labels = np.concatenate([labels, np.full(extra, -1)])
        return replace(cloud, points=pts, per_point_labels=labels, normals=None)
    if protocol == "perturb":
        if severity < 0:
            raise ConfigError("perturbation sigma must be non-negative")
        if severity == 0:
            return cloud
        return replace(cloud, points=cloud.points + rng.normal(0.0, severity, cloud.points.shape))
    raise ConfigError(f"unknown corruption {protocol!r}; expected one of {CORRUPTIONS}")


def resample(cloud, count, rng):
    """Exactly ``count`` points: a random subset, or cycled padding."""
    if cloud.n >= count:
        idx = np.sort(rng.choice(cloud.n, size=count, replace=False))
    else:
        idx = np.arange(count) % cloud.n
    return cloud.subset(idx)
