"""``setnet`` command line.

Every verb prints its fully resolved settings first, between
``---- effective config ----`` and ``---- end config ----`` lines, then its
results in a ``---- result ----`` block.  Files go under ``--out`` only;
progress and timings go to stderr.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import logging
import os
import sys

from . import analysis
from .config import ExperimentConfig, apply_overrides, load_config, to_pairs
from .data import read_cloud_file, read_dataset, split_dataset, synth_generate, SynthSpec, write_dataset
from .data.mnist import load_mnist_pointsets
from .training import find_idx
from .errors import ConfigError, SetNetError
from .experiments import ablation_run, bottleneck_sweep, robustness_sweep, trained_robustness, write_robustness
from .pointnet import load_checkpoint

logger = logging.getLogger("setnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _config_args(p, required=True):
    p.add_argument("--config", required=required, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--out", help="output directory (overrides the config's 'out')")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def build_parser():
    parser = _Parser(prog="setnet", description="Point-set networks: training, analysis, experiments.")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = verbs.add_parser("train", help="train a model from a config")
    _config_args(p)

    p = verbs.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory (dataset.txt)")
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    p.add_argument("--out", required=True)
    p.add_argument("--robustness", action="store_true", help="also run the corruption grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")

    p = verbs.add_parser("analyze", help="critical sets, upper-bound shapes, point functions")
    which = p.add_subparsers(dest="what", required=True, parser_class=_Parser)
    for name in ("critical", "upperbound", "grid", "retrieve", "correspond"):
        q = which.add_parser(name)
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--out", required=True)
        if name in ("critical", "upperbound", "correspond"):
            q.add_argument("--cloud", required=True, help="cloud file")
        if name in ("upperbound", "grid"):
            q.add_argument("--resolution", type=int, default=32)
        if name == "critical":
            q.add_argument("--resolution", type=int, default=0,
                           help="also sample the upper-bound shape on this grid")
        if name == "grid":
            q.add_argument("--dim", type=int, required=True)
            q.add_argument("--cloud", help="reference cloud fixing the transforms")
            q.add_argument("--threshold", type=float, default=0.5)
        if name == "retrieve":
            q.add_argument("--query", required=True, help="cloud file")
            q.add_argument("--gallery", required=True, help="dataset directory")
            q.add_argument("--k", type=int, default=5)
        if name == "correspond":
            q.add_argument("--other", required=True, help="second cloud file")

    p = verbs.add_parser("sweep", help="ablation, robustness and bottleneck experiments")
    p.add_argument("kind", choices=("ablation", "robustness", "bottleneck"))
    _config_args(p)

    p = verbs.add_parser("data", help="write datasets as cloud files")
    p.add_argument("source", choices=("synth", "mnist"))
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="config file supplying data.* keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--mnist-dir", help="directory with the four IDX files")
    p.add_argument("--limit", type=int, default=None)
    return parser


# ---------------------------------------------------------------- helpers


def _block(title, pairs, stream):
    stream.write(f"---- {title} ----\n")
    for key, value in pairs:
        stream.write(f"{key} = {value}\n")
    stream.write("---- end " + title.split()[-1] + " ----\n")
    stream.flush()


def _resolve_config(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    apply_overrides(config, args.set)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "out", None):
        config.out = args.out
    return config.validate()


def _arg_pairs(args):
    return [(k, v) for k, v in sorted(vars(args).items()) if v is not None]


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


# ------------------------------------------------------------------ verbs


def _train(args, out):
    from .training import train

    config = _resolve_config(args)
    _block("effective config", to_pairs(config), out)
    result = train(config, config.out, figures=not args.no_figures)
    _block("result", _metric_pairs(result.report.to_text()), out)


def _metric_pairs(text):
    return [tuple(s.strip() for s in line.split("=", 1)) for line in text.splitlines()
            if line and not line.startswith("#") and "." not in line.split("=")[0]]


def _eval(args, out):
    from .training import MetricsReport, evaluate_classification, evaluate_segmentation, per_class_accuracy

    _block("effective config", _arg_pairs(args), out)
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"setnet: --checkpoint {args.checkpoint!r} does not exist")
    state = load_checkpoint(args.checkpoint)
    clouds, splits, _ = read_dataset(args.data)
    if args.split != "all":
        clouds = [c for c, s in zip(clouds, splits) if s == args.split]
    report = MetricsReport("classify" if state.spec.kind == "classifier" else "segment",
                           int(state.flat.size), 0, len(clouds))
    if state.spec.kind == "classifier":
        overall, avg, pred = evaluate_classification(state, clouds)
        report.overall_accuracy, report.avg_class_accuracy = overall, avg
        report.class_accuracy = per_class_accuracy(pred, [c.class_label for c in clouds])
    else:
        parts = {}
        for c in clouds:
            parts.setdefault(c.class_label, set()).update(int(v) for v in c.per_point_labels if v >= 0)
        parts = {k: tuple(sorted(v)) for k, v in parts.items()}
        report.category_miou, report.instance_miou, report.class_miou = evaluate_segmentation(
            state, clouds, parts)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "metrics.txt"), report.to_text())
    if args.robustness:
        if state.spec.kind != "classifier":
            raise ConfigError("--robustness needs a classifier checkpoint")
        write_robustness(robustness_sweep(state, clouds, seed=args.seed), args.out, not args.no_figures)
    _block("result", _metric_pairs(report.to_text()), out)


def _analyze(args, out):
    _block("effective config", _arg_pairs(args), out)
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"setnet: --checkpoint {args.checkpoint!r} does not exist")
    state = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    what = args.what
    if what in ("critical", "upperbound"):
        cloud = read_cloud_file(args.cloud)
        report = analysis.critical_set(state, cloud)
        if what == "upperbound" or args.resolution:
            report.upper_bound_points = analysis.upper_bound_shape(state, cloud, args.resolution or 32)
        path = os.path.join(args.out, f"{what}.txt")
        analysis.write_critical_report(report, path)
        pairs = [("file", path), ("n", report.n), ("critical_points", report.critical_indices.size),
                 ("bound", report.bound), ("within_bound", report.checks["size_within_bound"])]
        if report.upper_bound_points is not None:
            pairs.append(("upper_bound_points", len(report.upper_bound_points)))
    elif what == "grid":
        if not 0 <= args.dim < state.spec.bottleneck:
            raise UsageError(f"setnet: --dim must lie in [0, {state.spec.bottleneck}), got {args.dim}")
        cloud = read_cloud_file(args.cloud) if args.cloud else None
        grid = analysis.point_function_grid(state, args.dim, args.resolution, cloud)
        path = os.path.join(args.out, f"grid-{args.dim}.txt")
        analysis.write_grid(grid, path, args.threshold)
        pairs = [("file", path), ("fraction_above", float(grid.mask(args.threshold).mean()))]
    elif what == "retrieve":
        gallery, _, _ = read_dataset(args.gallery)
        ids = analysis.retrieve(state, read_cloud_file(args.query), gallery, args.k)
        path = os.path.join(args.out, "retrieve.txt")
        _write(path, "# setnet-retrieve v1\n" + "\n".join(ids) + "\n")
        pairs = [("file", path)] + [(f"rank.{i}", cid) for i, cid in enumerate(ids)]
    else:
        pairs_ = analysis.correspondence(state, read_cloud_file(args.cloud), read_cloud_file(args.other))
        path = os.path.join(args.out, "correspond.txt")
        _write(path, "# setnet-correspond v1\n" + "".join(f"{a} {b}\n" for a, b in pairs_))
        pairs = [("file", path), ("pairs", len(pairs_))]
    _block("result", pairs, out)


def _sweep(args, out):
    config = _resolve_config(args)
    _block("effective config", [("sweep", args.kind)] + to_pairs(config), out)
    figures = not args.no_figures
    if args.kind == "ablation":
        rows = ablation_run(config, config.out, figures)
        pairs = [(r.label, r.accuracy) for r in rows]
    elif args.kind == "robustness":
        rows = trained_robustness(config, config.out, figures)
        pairs = [(f"{r.protocol}@{r.severity}", r.accuracy) for r in rows]
    else:
        cells = bottleneck_sweep(config, config.out, figures=figures)
        pairs = [(f"k={c.k} n={c.n}", f"{c.accuracy} critical<={c.max_critical}/{c.bound}")
                 for c in cells]
    _block("result", pairs, out)


def _data(args, out):
    os.makedirs(args.out, exist_ok=True)
    if args.source == "synth":
        config = load_config(args.config) if args.config else ExperimentConfig()
        apply_overrides(config, args.set)
        config.validate()
        d = config.data
        _block("effective config", [(k, v) for k, v in to_pairs(config) if k.startswith("data.")], out)
        clouds = synth_generate(SynthSpec(d.classes, d.points, d.clouds_per_class, d.noise, d.seed))
        train, test = split_dataset(clouds, d.test_fraction)
        test_ids = {c.id for c in test}
        splits = ["test" if c.id in test_ids else "train" for c in clouds]
        write_dataset(args.out, clouds, splits, d.classes)
        pairs = [("clouds", len(clouds)), ("train", len(train)), ("test", len(test))]
    else:
        _block("effective config", _arg_pairs(args), out)
        if not args.mnist_dir:
            raise UsageError("setnet data mnist: the following arguments are required: --mnist-dir")
        clouds, splits = [], []
        for stem, split in (("train", "train"), ("t10k", "test")):
            part = load_mnist_pointsets(find_idx(args.mnist_dir, f"{stem}-images-idx3-ubyte"),
                                        find_idx(args.mnist_dir, f"{stem}-labels-idx1-ubyte"),
                                        args.limit, 0, stem)
            clouds += part
            splits += [split] * len(part)
        write_dataset(args.out, clouds, splits, tuple(str(i) for i in range(10)))
        pairs = [("clouds", len(clouds)), ("train", splits.count("train")),
                 ("test", splits.count("test"))]
    _block("result", pairs, out)


VERBS = {"train": _train, "eval": _eval, "analyze": _analyze, "sweep": _sweep, "data": _data}


def run(argv=None, out=None, err=None):
    """Run one command; returns the exit code instead of exiting."""
    out = out or sys.stdout
    err = err or sys.stderr
    handler = logging.StreamHandler(err)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help
            return 0 if not exc.code else 1
        VERBS[args.verb](args, out)
        return 0
    except UsageError as exc:
        err.write(f"{exc}\n")
        return 1
    except (SetNetError, OSError) as exc:
        err.write(f"setnet: error: {exc}\n")
        return 2
    finally:
        logger.removeHandler(handler)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
