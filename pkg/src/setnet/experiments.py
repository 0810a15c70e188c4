"""Robustness, transform-ablation and bottleneck-width experiments.

Each writes a ``# setnet-curve v1`` data file and, unless disabled, a PNG
next to it.  Independent training runs may execute in parallel, capped by
the ``SETNET_THREADS`` environment variable (default 1); results do not
depend on the degree of parallelism.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .analysis import critical_set, pooled_width
from .config import copy_config, from_text, to_text
from .data import corrupt
from .errors import ConfigError
from .pointnet import count_parameters
from .training import evaluate_classification, train, write_curve

# transform variants: label, input transform, feature transform, regularizer on
ABLATION_VARIANTS = (
    ("none", False, False, False),
    ("input (3x3)", True, False, False),
    ("feature (64x64)", False, True, False),
    ("feature (64x64) + reg.", False, True, True),
    ("both", True, True, True),
)


def _slug(label):
    return label.replace(" (3x3)", "").replace(" (64x64)", "").replace(" + reg.", "_reg")


def thread_count():
    try:
        return max(1, int(os.environ.get("SETNET_THREADS", "1")))
    except ValueError:
        raise ConfigError("SETNET_THREADS must be an integer") from None


def _run_all(fn, jobs):
    workers = min(thread_count(), len(jobs))
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# -------------------------------------------------------------- robustness


@dataclass
class RobustnessRow:
    protocol: str
    severity: float
    accuracy: float


def robustness_grid(deletion_ratios, outlier_ratios, perturb_sigmas):
    grid = [("delete_furthest", r) for r in deletion_ratios]
    grid += [("delete_random", r) for r in deletion_ratios]
    grid += [("outliers", r) for r in outlier_ratios]
    grid += [("perturb", s) for s in perturb_sigmas]
    return grid


def robustness_sweep(state, clouds, deletion_ratios=(0.0, 0.25, 0.5, 0.75, 0.875),
                     outlier_ratios=(0.0, 0.05, 0.1, 0.2),
                     perturb_sigmas=(0.0, 0.02, 0.04, 0.06, 0.08, 0.1),
                     seed=0, batch_size=64):
    """Overall accuracy of ``state`` on corrupted copies of ``clouds``.

    Every corruption draws from its own generator seeded by
    ``(seed, grid row, cloud index)``, so a row does not depend on the rest.
    """
    if not clouds:
        raise ConfigError("no clouds to evaluate")
    rows = []
    for g, (protocol, severity) in enumerate(robustness_grid(deletion_ratios, outlier_ratios,
                                                             perturb_sigmas)):
        damaged = [corrupt(c, protocol, severity, np.random.default_rng([seed, g, i]))
                   for i, c in enumerate(clouds)]
        acc, _, _ = evaluate_classification(state, damaged, batch_size)
        rows.append(RobustnessRow(protocol, float(severity), acc))
    return rows


def write_robustness(rows, out_dir, figures=True):
    path = os.path.join(out_dir, "robustness.txt")
    write_curve(path, "robustness", ("protocol", "severity", "accuracy"),
                [(r.protocol, r.severity, r.accuracy) for r in rows])
    if figures:
        from .plotting import plot_robustness

        plot_robustness(rows, os.path.join(out_dir, "robustness.png"))
    return path


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    label: str
    input_transform: bool
    feature_transform: bool
    reg_weight: float
    num_parameters: int
    accuracy: float


def _ablation_job(job):
    text, out_dir = job
    config = from_text(text)
    result = train(config, out_dir, figures=False)
    return result.report.overall_accuracy, count_parameters(result.state.spec)


def ablation_run(base, out_dir, figures=True):
    """Train the five transform variants with one seed and one dataset."""
    if base.task != "classify":
        raise ConfigError("the ablation needs a classification config")
    os.makedirs(out_dir, exist_ok=True)
    jobs, settings = [], []
    for label, use_in, use_feat, reg in ABLATION_VARIANTS:
        cfg = copy_config(base)
        cfg.model.input_transform = use_in
        cfg.model.feature_transform = use_feat
        cfg.model.reg_weight = (base.model.reg_weight or 0.001) if reg else 0.0
        jobs.append((to_text(cfg), os.path.join(out_dir, _slug(label))))
        settings.append((label, use_in, use_feat, cfg.model.reg_weight))
    results = _run_all(_ablation_job, jobs)
    rows = [AblationRow(label, i, f, r, params, acc)
            for (label, i, f, r), (acc, params) in zip(settings, results)]
    write_curve(os.path.join(out_dir, "ablation.txt"), "ablation",
                ("variant", "input_transform", "feature_transform", "reg_weight", "params", "accuracy"),
                [(_slug(r.label), int(r.input_transform), int(r.feature_transform), r.reg_weight,
                  r.num_parameters, r.accuracy) for r in rows],
                comments=[f"variant {_slug(r.label)} = {r.label}" for r in rows])
    if figures:
        from .plotting import plot_ablation

        plot_ablation(rows, os.path.join(out_dir, "ablation.png"))
    return rows


# -------------------------------------------------------------- bottleneck


@dataclass
class BottleneckCell:
    k: int
    n: int
    accuracy: float
    max_critical: int
    bound: int
    bound_ok: bool


def _bottleneck_job(job):
    text, out_dir, check_clouds = job
    config = from_text(text)
    result = train(config, out_dir, figures=False)
    sizes = [critical_set(result.state, c).critical_indices.size
             for c in result.data.test[:check_clouds]]
    bound = pooled_width(result.state)
    worst = max(sizes, default=0)
    return result.report.overall_accuracy, worst, bound


def bottleneck_sweep(base, out_dir, k_list=None, n_list=None, figures=True):
    """Accuracy over bottleneck width K and points per cloud n.

    Run ``i`` of the grid trains with seed ``base.seed + i``; every cell
    also checks ``|C_S| <= bound`` on the first test clouds.
    """
    if base.task != "classify":
        raise ConfigError("the bottleneck sweep needs a classification config")
    if base.model.aggregator != "max":
        raise ConfigError("the bottleneck sweep checks critical sets and needs max pooling")
    k_list = tuple(k_list or base.sweep.k_list)
    n_list = tuple(n_list or base.sweep.n_list)
    if not k_list or not n_list:
        raise ConfigError("empty K or n list")
    os.makedirs(out_dir, exist_ok=True)
    jobs, keys = [], []
    for i, (k, n) in enumerate((k, n) for k in k_list for n in n_list):
        cfg = copy_config(base, seed=base.seed + i)
        cfg.model.k = k
        cfg.data.points = n
        jobs.append((to_text(cfg), os.path.join(out_dir, f"k{k}-n{n}"), base.sweep.check_clouds))
        keys.append((k, n))
    cells = [BottleneckCell(k, n, acc, worst, bound, worst <= bound)
             for (k, n), (acc, worst, bound) in zip(keys, _run_all(_bottleneck_job, jobs))]
    write_curve(os.path.join(out_dir, "bottleneck.txt"), "bottleneck",
                ("k", "n", "accuracy", "max_critical", "bound", "bound_ok"),
                [(c.k, c.n, c.accuracy, c.max_critical, c.bound, int(c.bound_ok)) for c in cells])
    if figures:
        from .plotting import plot_bottleneck

        plot_bottleneck(cells, os.path.join(out_dir, "bottleneck.png"))
    return cells


def trained_robustness(config, out_dir, figures=True):
    """Train on ``config`` and sweep the robustness grid on its test split."""
    result = train(config, os.path.join(out_dir, "model"), figures=figures)
    s = config.sweep
    rows = robustness_sweep(result.state, result.data.test, s.deletion_ratios, s.outlier_ratios,
                            s.perturb_sigmas, config.seed, config.eval_batch_size)
    write_robustness(rows, out_dir, figures)
    return rows
