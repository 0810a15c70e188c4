"""Training loop, evaluation and run outputs.

A run directory holds ``checkpoint.pnet``, ``metrics.txt``, ``train.log``,
``loss_curve.txt`` and ``loss_curve.png``.  Everything in it is a pure
function of the config; wall-clock time goes to the ``setnet`` logger only.
"""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import model_spec, to_text
from .data import (
    SynthSpec,
    augment,
    corrupt,
    load_mnist_pointsets,
    part_sets as synth_part_sets,
    read_dataset,
    resample,
    split_dataset,
    synth_generate,
)
from .errors import ConfigError, NumericError
from .metrics import classification_metrics, dataset_miou, per_class_accuracy
from .pointnet import (
    ModelState,
    classify_forward,
    count_parameters,
    normal_loss,
    orthogonality_loss,
    save_checkpoint,
    segment_forward,
)

logger = logging.getLogger("setnet")

CURVE_COLUMNS = ("epoch", "batch", "lr", "task_loss", "reg_loss", "total_loss")


@dataclass
class Dataset:
    train: list
    test: list
    classes: tuple
    part_sets: dict
    input_dim: int
    num_parts: int


@dataclass
class MetricsReport:
    task: str
    num_parameters: int
    train_clouds: int
    test_clouds: int
    overall_accuracy: float = None
    avg_class_accuracy: float = None
    class_accuracy: dict = field(default_factory=dict)
    instance_miou: float = None
    class_miou: float = None
    category_miou: dict = field(default_factory=dict)
    normal_loss: float = None
    loss_curve: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)
    wall_clock: float = 0.0

    def to_text(self):
        """Key-value text; leaves out the wall-clock so reruns match bitwise."""
        lines = ["# setnet-metrics v1", f"task = {self.task}",
                 f"num_parameters = {self.num_parameters}",
                 f"train_clouds = {self.train_clouds}", f"test_clouds = {self.test_clouds}"]
        for key in ("overall_accuracy", "avg_class_accuracy", "instance_miou", "class_miou",
                    "normal_loss"):
            value = getattr(self, key)
            if value is not None:
                lines.append(f"{key} = {float(value)!r}")
        for c, v in sorted(self.class_accuracy.items()):
            lines.append(f"class_accuracy.{c} = {float(v)!r}")
        for c, v in sorted(self.category_miou.items()):
            lines.append(f"category_miou.{c} = {float(v)!r}")
        for e, v in enumerate(self.epoch_loss):
            lines.append(f"epoch_loss.{e} = {float(v)!r}")
        return "\n".join(lines) + "\n"


def read_metrics(path):
    with open(path) as fh:
        return read_metrics_text(fh.read())


def read_metrics_text(text):
    out = {}
    for line in text.splitlines():
        if line and not line.startswith("#"):
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


@dataclass
class TrainResult:
    state: ModelState
    report: MetricsReport
    data: Dataset


# -------------------------------------------------------------------- data


def find_idx(directory, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise ConfigError(f"no {stem}[.gz] in {directory!r}")


def load_data(config):
    """Train and test clouds described by ``config.data``."""
    d = config.data
    if d.source == "synth":
        clouds = synth_generate(SynthSpec(d.classes, d.points, d.clouds_per_class, d.noise, d.seed))
        train, test = split_dataset(clouds, d.test_fraction)
        return Dataset(train, test, tuple(d.classes), synth_part_sets(d.classes), 3,
                       1 + max(p for parts in synth_part_sets(d.classes).values() for p in parts))
    if d.source == "mnist":
        if not d.mnist_dir:
            raise ConfigError("data.mnist_dir is not set")
        train = load_mnist_pointsets(find_idx(d.mnist_dir, "train-images-idx3-ubyte"),
                                     find_idx(d.mnist_dir, "train-labels-idx1-ubyte"),
                                     d.mnist_train, d.seed, "train")
        test = load_mnist_pointsets(find_idx(d.mnist_dir, "t10k-images-idx3-ubyte"),
                                    find_idx(d.mnist_dir, "t10k-labels-idx1-ubyte"),
                                    d.mnist_test, d.seed, "t10k")
        return Dataset(train, test, tuple(str(i) for i in range(10)), {}, 2, 0)
    clouds, splits, classes = read_dataset(d.dir)
    train = [c for c, s in zip(clouds, splits) if s == "train"]
    test = [c for c, s in zip(clouds, splits) if s == "test"]
    if not classes:
        classes = tuple(str(i) for i in range(1 + max(c.class_label for c in clouds)))
    parts = {}
    for c in clouds:
        if c.per_point_labels is not None:
            parts.setdefault(c.class_label, set()).update(int(v) for v in c.per_point_labels)
    parts = {k: tuple(sorted(v)) for k, v in parts.items()}
    num_parts = 1 + max((p for v in parts.values() for p in v), default=-1)
    return Dataset(train, test, tuple(classes), parts, clouds[0].dim, num_parts)


def build_state(config, data):
    spec = model_spec(config, len(data.classes), data.input_dim, max(data.num_parts, 1))
    return ModelState(spec, config.seed)


# --------------------------------------------------------------- schedules


def learning_rate(config, epoch):
    rate = config.lr * config.lr_decay_rate ** (epoch // config.lr_decay_every)
    return max(rate, config.lr_floor)


def bn_momentum(config, epoch):
    if config.epochs <= 1:
        return config.bn_momentum_start
    frac = min(epoch / (config.epochs - 1), 1.0)
    return config.bn_momentum_start + (config.bn_momentum_end - config.bn_momentum_start) * frac


# -------------------------------------------------------------------- loss


def _fit_size(clouds, count, rng):
    return [c if c.n == count else resample(c, count, rng) for c in clouds]


def batch_loss(state, clouds, task, mode="train", rng=None):
    """``(task_loss, reg_loss or None)`` tensors for equal-size ``clouds``."""
    pts = np.stack([c.points for c in clouds])
    if task == "classify":
        out = classify_forward(state, pts, mode, rng)
        labels = np.array([c.class_label for c in clouds])
        loss = T.softmax_cross_entropy(out.logits, labels)
        bb = out.backbone
    else:
        cats = [c.class_label for c in clouds]
        out = segment_forward(state, pts, mode, cats if state.spec.category_conditioning else None, rng)
        bb = out.backbone
        if task == "segment":
            b, n, m = out.logits.shape
            labels = np.concatenate([c.per_point_labels for c in clouds])
            loss = T.softmax_cross_entropy(T.reshape(out.logits, (b * n, m)), labels)
        else:
            loss = normal_loss(out.logits, np.stack([c.normals for c in clouds]))
    reg = None
    if bb.feature_transform is not None and state.spec.reg_weight > 0:
        reg = orthogonality_loss(bb.feature_transform)
    return loss, reg


def _check_finite(state, values, epoch, batch):
    grad_norm = float(np.sqrt(np.sum(state.flat_grad ** 2)))
    if not all(np.isfinite(v) for v in values) or not np.isfinite(grad_norm):
        bad = sorted(name for name, p in state.params.items() if not np.all(np.isfinite(p.grad)))
        raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch}: "
                           f"losses {values}, grad norm {grad_norm}, non-finite grads in {bad}")


def refresh_bn_statistics(state, clouds, task, batch_size, points, max_batches, rng):
    """Recompute every running BN statistic with the final weights.

    The running values become the plain average of the batch statistics
    over up to ``max_batches`` training batches, replacing the moving
    average collected while the weights were still changing.  Returns the
    number of batches used.
    """
    if max_batches <= 0 or not state.bn:
        return 0
    order = rng.permutation(len(clouds))
    saved = state.bn_momentum
    used = 0
    with T.no_grad():
        for first in range(0, len(order), batch_size):
            idx = order[first:first + batch_size]
            if idx.size < 2 or used == max_batches:
                break
            batch = _fit_size([clouds[i] for i in idx], points, rng)
            state.bn_momentum = used / (used + 1)  # running mean over batches so far
            batch_loss(state, batch, task, "train", rng)
            used += 1
    state.bn_momentum = saved
    return used


# ------------------------------------------------------------------- train


def train(config, out_dir=None, figures=True, data=None):
    """Train a model from ``config`` and write the run directory."""
    config.validate()
    out_dir = out_dir or config.out
    os.makedirs(out_dir, exist_ok=True)
    start = time.perf_counter()
    data = data or load_data(config)
    if len(data.train) < 2:
        raise ConfigError("training needs at least two clouds")
    if config.task != "classify" and any(c.per_point_labels is None and c.normals is None
                                         for c in data.train):
        raise ConfigError(f"task {config.task} needs per-point targets")
    state = build_state(config, data)
    adam = T.AdamState(state.flat.size)
    rng = np.random.default_rng(config.seed)
    log_lines = ["# setnet-log v1", "# effective config"]
    # the output directory is left out so identical runs log identically wherever they write
    log_lines += ["#   " + line for line in to_text(config).splitlines() if not line.startswith("out =")]
    report = MetricsReport(config.task, count_parameters(state.spec), len(data.train), len(data.test))

    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        state.bn_momentum = bn_momentum(config, epoch)
        order = rng.permutation(len(data.train))
        losses = []
        for b, first in enumerate(range(0, len(order), config.batch_size)):
            idx = order[first:first + config.batch_size]
            if idx.size < 2:
                continue  # batch norm needs two rows; the straggler waits for the next epoch
            clouds = [data.train[i] for i in idx]
            if config.augment:
                clouds = [augment(c, rng, config.jitter) for c in clouds]
            clouds = _fit_size(clouds, config.data.points, rng)
            loss, reg = batch_loss(state, clouds, config.task, "train", rng)
            total = loss if reg is None else T.add(loss, T.mul(reg, state.spec.reg_weight))
            state.zero_grad()
            total.backward()
            values = (loss.item(), 0.0 if reg is None else reg.item(), total.item())
            _check_finite(state, values, epoch, b)
            T.adam_step(state.flat, state.flat_grad, adam, lr)
            report.loss_curve.append((epoch, b, lr) + values)
            losses.append(values[2])
        report.epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        line = (f"epoch {epoch} lr {float(lr)!r} bn_momentum {float(state.bn_momentum)!r} "
                f"loss {float(report.epoch_loss[-1])!r} batches {len(losses)}")
        log_lines.append(line)
        logger.info("%s (%.1fs)", line, time.perf_counter() - start)

    if config.epochs > 0:
        used = refresh_bn_statistics(state, data.train, config.task, config.batch_size,
                                     config.data.points, config.bn_refresh_batches, rng)
        log_lines.append(f"bn_refresh batches {used}")
    evaluate_into(report, state, data, config)
    report.wall_clock = time.perf_counter() - start
    log_lines.append("final " + " ".join(
        f"{k}={v}" for k, v in read_metrics_text(report.to_text()).items() if "." not in k))
    save_checkpoint(state, os.path.join(out_dir, "checkpoint.pnet"))
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out_dir, "train.log"), "w") as fh:
        fh.write("\n".join(log_lines) + "\n")
    write_curve(os.path.join(out_dir, "loss_curve.txt"), "loss", CURVE_COLUMNS, report.loss_curve)
    if figures:
        from .plotting import plot_loss_curve

        plot_loss_curve(report.loss_curve, os.path.join(out_dir, "loss_curve.png"))
    logger.info("finished in %.1fs", report.wall_clock)
    return TrainResult(state, report, data)



# --------------------------------------------------------------- evaluation


def _eval_clouds(clouds, config):
    if config.corrupt.protocol == "none":
        return clouds
    return [corrupt(c, config.corrupt.protocol, config.corrupt.severity,
                    np.random.default_rng([config.seed, 7, i])) for i, c in enumerate(clouds)]


def evaluate_into(report, state, data, config):
    clouds = _eval_clouds(data.test, config)
    if not clouds:
        return report
    if config.task == "classify":
        overall, avg, pred = evaluate_classification(state, clouds, config.eval_batch_size)
        report.overall_accuracy, report.avg_class_accuracy = overall, avg
        report.class_accuracy = per_class_accuracy(pred, [c.class_label for c in clouds])
    elif config.task == "segment":
        per_cat, inst, cls = evaluate_segmentation(state, clouds, data.part_sets,
                                                   config.eval_batch_size)
        report.category_miou, report.instance_miou, report.class_miou = per_cat, inst, cls
    else:
        report.normal_loss = evaluate_normals(state, clouds, config.eval_batch_size)
    return report


def _batches(clouds, batch_size):
    """Index groups of equal-size clouds, at most ``batch_size`` each."""
    by_size = {}
    for i, c in enumerate(clouds):
        by_size.setdefault(c.n, []).append(i)
    for idx in by_size.values():
        for s in range(0, len(idx), batch_size):
            yield idx[s:s + batch_size]


def predict_logits(state, clouds, batch_size=64):
    """Eval-mode logits per cloud (``(C,)`` or ``(n, m)`` arrays)."""
    out = [None] * len(clouds)
    with T.no_grad():
        for idx in _batches(clouds, batch_size):
            pts = np.stack([clouds[i].points for i in idx])
            if state.spec.kind == "classifier":
                logits = classify_forward(state, pts).logits.data
            else:
                cats = [clouds[i].class_label for i in idx] if state.spec.category_conditioning else None
                logits = segment_forward(state, pts, categories=cats).logits.data
            for j, i in enumerate(idx):
                out[i] = logits[j]
    return out


def predict_classes(state, clouds, batch_size=64):
    return np.array([int(np.argmax(z)) for z in predict_logits(state, clouds, batch_size)])


def evaluate_classification(state, clouds, batch_size=64):
    """``(overall, avg_class, predictions)`` on labelled clouds."""
    pred = predict_classes(state, clouds, batch_size)
    overall, avg = classification_metrics(pred, np.array([c.class_label for c in clouds]))
    return overall, avg, pred


def predict_parts(state, clouds, part_sets, batch_size=64):
    """Per-point part labels, restricted to each cloud's category parts."""
    preds = []
    for c, z in zip(clouds, predict_logits(state, clouds, batch_size)):
        parts = np.array(part_sets[c.class_label])
        preds.append(parts[np.argmax(z[:, parts], axis=1)])
    return preds


def evaluate_segmentation(state, clouds, part_sets, batch_size=64):
    """``(per_category, instance_miou, class_miou)``; outlier points (label -1) are skipped."""
    preds = predict_parts(state, clouds, part_sets, batch_size)
    keep = [c.per_point_labels >= 0 for c in clouds]
    return dataset_miou([p[k] for p, k in zip(preds, keep)],
                        [c.per_point_labels[k] for c, k in zip(clouds, keep)],
                        [c.class_label for c in clouds], part_sets)


def evaluate_normals(state, clouds, batch_size=64):
    losses = []
    for c, z in zip(clouds, predict_logits(state, clouds, batch_size)):
        losses.append(normal_loss(T.Tensor(z), c.normals).item())
    return float(np.mean(losses))


# ------------------------------------------------------------------ curves


def write_curve(path, experiment, columns, rows, comments=()):
    """Plot-data file: header, experiment name, column names, then rows."""
    lines = ["# setnet-curve v1", f"# experiment {experiment}", "# columns " + " ".join(columns)]
    lines += [f"# {c}" for c in comments]
    for row in rows:
        lines.append(" ".join(_field(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _field(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_curve(path):
    """``(experiment, columns, rows)`` with numeric fields parsed."""
    experiment, columns, rows = "", [], []
    with open(path) as fh:
        if fh.readline().strip() != "# setnet-curve v1":
            raise ConfigError(f"{path} is not a setnet-curve v1 file")
        for line in fh:
            line = line.strip()
            if line.startswith("# experiment "):
                experiment = line[len("# experiment "):]
            elif line.startswith("# columns "):
                columns = line[len("# columns "):].split()
            elif line and not line.startswith("#"):
                rows.append([_number(v) for v in line.split()])
    return experiment, columns, rows


def _number(text):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text
