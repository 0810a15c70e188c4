"""Critical point sets, upper-bound shapes and other max-pooling analyses.

For a cloud ``S`` the pooled vector ``u = max_i h(x_i)`` is fixed by the
rows that attain each column maximum (the critical set), and adding any
point ``p`` with ``h(p) <= u`` leaves it unchanged (the upper-bound shape).

Models with alignment networks have more than one max-pooled stage: the
input T-net, the feature T-net, and the main pooling.  The critical set
is then the union of every stage's argmax rows, and a candidate point
joins the upper-bound shape only if it stays below the pooled vector of
every stage, with the alignment matrices pinned to those predicted for
``S``.  For a model without transforms both reduce to the plain
definitions, and ``|C_S| <= K`` holds with ``K`` the bottleneck width.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParseError, TheoremViolation, UnsupportedAggregatorError
from .pointnet import as_batch, backbone_forward, classify_forward, segment_forward

GRID_CHUNK = 4096


@dataclass
class CriticalSetReport:
    cloud_id: str
    u: np.ndarray
    critical_indices: np.ndarray
    K: int
    bound: int
    n: int
    upper_bound_points: np.ndarray = None
    stage_indices: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)


@dataclass
class ActivationGrid:
    dim: int
    resolution: int
    points: np.ndarray  # (r^3, 3)
    values: np.ndarray  # (r^3,)

    def mask(self, threshold=0.5):
        return self.values > threshold


@dataclass
class Theorem2Report:
    cloud_id: str
    sets_checked: int
    critical_size: int
    upper_sample_size: int
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


def _require_max(state):
    if state.spec.aggregator != "max":
        raise UnsupportedAggregatorError(
            f"critical-set analysis needs max pooling, model uses {state.spec.aggregator!r}")


def _points(cloud):
    return np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)


def _backbone(state, points, transforms=None):
    with T.no_grad():
        return backbone_forward(state, points, state.scope("eval"), transforms)


def _transforms(bb):
    out = {}
    if bb.input_transform is not None:
        out["input"] = bb.input_transform.data
    if bb.feature_transform is not None:
        out["feature"] = bb.feature_transform.data
    return out


def pooled_width(state):
    """Total width of all max-pooled stages: the bound on ``|C_S|``."""
    spec = state.spec
    width = spec.bottleneck
    if spec.use_input_transform:
        width += spec.tnet_mlp_widths[-1]
    if spec.use_feature_transform:
        width += spec.tnet_mlp_widths[-1]
    return width


def critical_set(state, cloud):
    """Rows of ``cloud`` that attain some column maximum of a pooled stage."""
    _require_max(state)
    pts = _points(cloud)
    bb = _backbone(state, pts)
    stage_indices = {s.name: np.unique(s.argmax[0]) for s in bb.stages}
    crit = np.unique(np.concatenate(list(stage_indices.values())))
    report = CriticalSetReport(
        cloud_id=getattr(cloud, "id", ""),
        u=bb.global_feature.data[0].copy(),
        critical_indices=crit,
        K=state.spec.bottleneck,
        bound=pooled_width(state),
        n=pts.shape[0],
        stage_indices=stage_indices,
    )
    report.checks["size_within_bound"] = bool(crit.size <= report.bound)
    report.checks["indices_in_range"] = bool(crit.size == 0 or crit.max() < report.n)
    return report


def cube_grid(resolution):
    """All ``r^3`` points of a regular grid over ``[-1, 1]^3``."""
    if resolution < 2:
        raise ConfigError("grid resolution must be at least 2")
    axis = np.linspace(-1.0, 1.0, resolution)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.column_stack([x.ravel(), y.ravel(), z.ravel()])


def below_pooled(state, cloud, candidates, offset=0.0, bb=None):
    """Mask of candidate points whose features stay ``<= u + offset`` at
    every pooled stage of ``cloud``'s forward pass."""
    _require_max(state)
    if bb is None:
        bb = _backbone(state, _points(cloud))
    transforms = _transforms(bb) or None
    candidates = np.asarray(candidates, dtype=np.float64)
    keep = np.ones(candidates.shape[0], dtype=bool)
    for start in range(0, candidates.shape[0], GRID_CHUNK):
        chunk = candidates[start:start + GRID_CHUNK]
        cb = _backbone(state, chunk[None], transforms)
        ok = np.ones(chunk.shape[0], dtype=bool)
        for ref, got in zip(bb.stages, cb.stages):
            ok &= np.all(got.features[0] <= ref.pooled[0] + offset, axis=1)
        keep[start:start + GRID_CHUNK] = ok
    return keep


def upper_bound_shape(state, cloud, resolution=32, offset=0.0):
    """Grid points of ``[-1, 1]^3`` that could join ``cloud`` without
    changing any pooled feature: a sample of the upper-bound shape."""
    if _points(cloud).shape[1] != 3:
        raise ConfigError("upper-bound shapes are sampled on a 3-D grid")
    grid = cube_grid(resolution)
    return grid[below_pooled(state, cloud, grid, offset)]


def _first_mismatch(a, b):
    bad = np.nonzero(a != b)[0]
    return int(bad[0]) if bad.size else None


def verify_theorem2(state, cloud, trials=10, rng=None, resolution=8, raise_on_violation=False):
    """Check that every tested ``T`` with ``C_S ⊆ T ⊆ N_S`` pools exactly to ``u(S)``.

    The tested sets are ``S``, ``C_S``, ``C_S`` plus the whole sampled
    upper-bound shape, and ``trials`` random sets in between.  Equality is
    bitwise at every pooled stage and for the head output (class logits, or
    per-point scores on the points shared with ``S``).
    """
    _require_max(state)
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = _points(cloud)
    bb = _backbone(state, pts)
    crit = critical_set(state, cloud).critical_indices
    grid = upper_bound_shape(state, cloud, resolution) if pts.shape[1] == 3 else np.empty((0, pts.shape[1]))
    ref_head = _head(state, pts)
    # the sampled upper-bound shape: S itself plus the passing grid points
    others = np.setdiff1d(np.arange(pts.shape[0]), crit)
    pool_size = others.size + grid.shape[0]

    candidates = [("S", np.arange(pts.shape[0]), np.empty(0, dtype=np.int64)),
                  ("C_S", crit, np.empty(0, dtype=np.int64)),
                  ("C_S+N_S", np.concatenate([crit, others]), np.arange(grid.shape[0]))]
    for t in range(trials):
        take = rng.random(pool_size) < rng.random()
        rows = np.concatenate([crit, others[take[:others.size]]])
        extra = np.nonzero(take[others.size:])[0]
        candidates.append((f"random-{t}", rows, extra))

    report = Theorem2Report(getattr(cloud, "id", ""), len(candidates), int(crit.size), pool_size)
    for name, rows, extra in candidates:
        tset = np.vstack([pts[rows], grid[extra]])
        tb = _backbone(state, tset)
        for ref, got in zip(bb.stages, tb.stages):
            dim = _first_mismatch(ref.pooled[0], got.pooled[0])
            if dim is not None:
                report.violations.append((name, ref.name, dim))
        head = _head(state, tset)
        if state.spec.kind == "classifier":
            if not np.array_equal(head[0], ref_head[0]):
                report.violations.append((name, "logits", _first_mismatch(head[0], ref_head[0])))
        elif not np.array_equal(head[0][: rows.size], ref_head[0][rows]):
            report.violations.append((name, "point_scores", None))
    if raise_on_violation and report.violations:
        name, stage, dim = report.violations[0]
        raise TheoremViolation(f"set {name}: stage {stage} differs at dimension {dim}", dim)
    return report


def _head(state, points):
    with T.no_grad():
        if state.spec.kind == "classifier":
            return classify_forward(state, points).logits.data
        return segment_forward(state, points).logits.data


def removable_points(state, cloud):
    """Indices outside the critical set; deleting them keeps every pooled vector."""
    crit = critical_set(state, cloud).critical_indices
    return np.setdiff1d(np.arange(_points(cloud).shape[0]), crit)


def point_function_grid(state, dim, resolution=32, cloud=None):
    """Values of the ``dim``-th pre-pooling feature over the ``[-1, 1]^3`` grid.

    Models with alignment networks need a reference ``cloud`` whose
    predicted transforms are held fixed.
    """
    spec = state.spec
    if not 0 <= dim < spec.bottleneck:
        raise IndexError(f"feature dimension {dim} outside [0, {spec.bottleneck})")
    if spec.input_dim != 3:
        raise ConfigError("point functions are sampled on a 3-D grid")
    transforms = None
    if spec.use_input_transform or spec.use_feature_transform:
        if cloud is None:
            raise ConfigError("a model with transforms needs a reference cloud")
        transforms = _transforms(_backbone(state, _points(cloud)))
    grid = cube_grid(resolution)
    values = np.empty(grid.shape[0])
    for start in range(0, grid.shape[0], GRID_CHUNK):
        chunk = grid[start:start + GRID_CHUNK]
        values[start:start + GRID_CHUNK] = _backbone(state, chunk[None], transforms).point_features.data[0, :, dim]
    return ActivationGrid(dim, resolution, grid, values)


def activation_summary(state, count=15, resolution=16, threshold=0.5, rng=None, cloud=None):
    """``(dim, fraction of grid above threshold)`` for ``count`` random dims."""
    rng = rng if rng is not None else np.random.default_rng(0)
    dims = np.sort(rng.choice(state.spec.bottleneck, size=min(count, state.spec.bottleneck),
                              replace=False))
    return [(int(j), float(point_function_grid(state, int(j), resolution, cloud).mask(threshold).mean()))
            for j in dims]


def penultimate_features(state, clouds):
    """The 256-d activations feeding the class-score layer, one row per cloud."""
    if state.spec.kind != "classifier":
        raise ConfigError("retrieval uses a classifier's penultimate layer")
    rows = []
    with T.no_grad():
        for c in clouds:
            rows.append(classify_forward(state, _points(c)).penultimate.data[0])
    return np.array(rows)


def retrieve(state, query, gallery, k):
    """Ids of the ``k`` gallery clouds nearest to ``query`` in feature space."""
    if not gallery:
        raise ConfigError("empty gallery")
    if not 1 <= k <= len(gallery):
        raise ConfigError(f"k must lie in [1, {len(gallery)}]")
    q = penultimate_features(state, [query])[0]
    feats = penultimate_features(state, gallery)
    dist = np.sqrt(((feats - q) ** 2).sum(axis=1))
    order = sorted(range(len(gallery)), key=lambda i: (dist[i], gallery[i].id))
    return [gallery[i].id for i in order[:k]]


def correspondence(state, cloud_a, cloud_b):
    """Pairs ``(i, j)`` of points that win the same main pooled dimension."""
    _require_max(state)
    arg_a = _backbone(state, _points(cloud_a)).argmax[0]
    arg_b = _backbone(state, _points(cloud_b)).argmax[0]
    seen = set()
    pairs = []
    for a, b in zip(arg_a, arg_b):
        pair = (int(a), int(b))
        if pair not in seen:
            seen.add(pair)
            pairs.append(pair)
    return pairs


def segmentation_consistency(state, cloud, rng=None, trials=5, resolution=8):
    """Per-point scores of ``S`` versus sets between ``C_S`` and ``N_S``.

    Returns the number of compared sets; raises TheoremViolation when the
    scores of a shared point differ in any bit.
    """
    if state.spec.kind != "segmenter":
        raise ConfigError("segmentation consistency needs a segmenter")
    report = verify_theorem2(state, cloud, trials, rng, resolution)
    if not report.ok:
        name, stage, dim = report.violations[0]
        raise TheoremViolation(f"set {name}: {stage} differs", dim)
    return report.sets_checked


# ------------------------------------------------------------------- files


def write_critical_report(report, path):
    lines = ["# setnet-critical v1",
             f"id {report.cloud_id or '-'}",
             f"K {report.K}",
             f"bound {report.bound}",
             f"n {report.n}",
             "u " + " ".join(repr(float(v)) for v in report.u),
             "critical " + " ".join(str(int(i)) for i in report.critical_indices)]
    for name, idx in report.stage_indices.items():
        lines.append(f"stage {name} " + " ".join(str(int(i)) for i in idx))
    for key, value in report.checks.items():
        lines.append(f"check {key} {int(bool(value))}")
    if report.upper_bound_points is not None:
        for p in report.upper_bound_points:
            lines.append("upper " + " ".join(repr(float(v)) for v in p))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_critical_report(path):
    fields_ = {"stage_indices": {}, "checks": {}}
    upper = []
    with open(path) as fh:
        first = fh.readline().strip()
        if first != "# setnet-critical v1":
            raise ParseError("missing '# setnet-critical v1' header", line=1, path=path)
        for lineno, raw in enumerate(fh, start=2):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag, rest = parts[0], parts[1:]
            try:
                if tag == "id":
                    fields_["cloud_id"] = "" if rest == ["-"] else rest[0]
                elif tag in ("K", "bound", "n"):
                    fields_[tag] = int(rest[0])
                elif tag == "u":
                    fields_["u"] = np.array([float(v) for v in rest])
                elif tag == "critical":
                    fields_["critical_indices"] = np.array([int(v) for v in rest], dtype=np.int64)
                elif tag == "stage":
                    fields_["stage_indices"][rest[0]] = np.array([int(v) for v in rest[1:]], dtype=np.int64)
                elif tag == "check":
                    fields_["checks"][rest[0]] = rest[1] == "1"
                elif tag == "upper":
                    upper.append([float(v) for v in rest])
                else:
                    raise ParseError(f"unknown record {tag!r}", line=lineno, path=path)
            except (IndexError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
    report = CriticalSetReport(**fields_)
    if upper:
        report.upper_bound_points = np.array(upper)
    return report


def write_grid(grid, path, threshold=0.5):
    lines = ["# setnet-grid v1",
             f"dim {grid.dim}",
             f"resolution {grid.resolution}",
             f"threshold {float(threshold)!r}",
             "# x y z value above_threshold"]
    mask = grid.mask(threshold)
    for p, v, m in zip(grid.points, grid.values, mask):
        lines.append(" ".join(repr(float(t)) for t in (p[0], p[1], p[2], v)) + f" {int(m)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_grid(path):
    meta, rows = {}, []
    with open(path) as fh:
        first = fh.readline().strip()
        if first != "# setnet-grid v1":
            raise ParseError("missing '# setnet-grid v1' header", line=1, path=path)
        for lineno, raw in enumerate(fh, start=2):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] in ("dim", "resolution", "threshold"):
                meta[parts[0]] = float(parts[1])
                continue
            if len(parts) != 5:
                raise ParseError("expected x y z value mask", line=lineno, path=path)
            rows.append([float(v) for v in parts[:4]])
    rows = np.array(rows)
    return ActivationGrid(int(meta["dim"]), int(meta["resolution"]), rows[:, :3], rows[:, 3])
