import os
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from setnet.config import ExperimentConfig, copy_config, from_text, model_spec, to_text
from setnet.errors import ConfigError, LabelError, NumericError
from setnet.experiments import (
    ABLATION_VARIANTS,
    ablation_run,
    bottleneck_sweep,
    robustness_grid,
    robustness_sweep,
)
from setnet.metrics import classification_metrics, dataset_miou, part_miou
from setnet.pointnet import count_parameters, load_checkpoint
from setnet.training import (
    bn_momentum,
    refresh_bn_statistics,
    evaluate_classification,
    learning_rate,
    read_curve,
    read_metrics,
    train,
    write_curve,
)

TINY = """
epochs = 1
batch_size = 4
data.clouds_per_class = 4
data.points = 16
model.k = 16
model.pre_widths = 8,8
model.post_widths = 8
model.fc_widths = 16,8
model.tnet_mlp_widths = 8,16
model.tnet_fc_widths = 8
model.head_widths = 16
"""


def tiny(**overrides):
    return from_text(TINY, [f"{k}={v}" for k, v in overrides.items()])


# ------------------------------------------------------------------ config


def test_config_round_trip_and_overrides():
    cfg = from_text("# comment\nmodel.k = 64\nseed = 3  # trailing\naugment = false\n",
                    ["model.post_widths=8,16", "data.classes=cube,cone"])
    assert cfg.model.k == 64 and cfg.seed == 3 and cfg.augment is False
    assert cfg.model.post_widths == (8, 16) and cfg.data.classes == ("cube", "cone")
    assert from_text(to_text(cfg)) == cfg
    assert ExperimentConfig().seed == 0


@pytest.mark.parametrize("text", ["model.kk = 3", "modle.k = 3", "data = 1", "a.b.c = 1",
                                  "model.k = many", "augment = maybe", "task = dance",
                                  "no equals sign"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        from_text(text)


def test_override_errors_and_order():
    with pytest.raises(ConfigError):
        from_text("", ["nope=1"])
    with pytest.raises(ConfigError):
        from_text("", ["seed"])
    assert from_text("seed = 1", ["seed=2"]).seed == 2


def test_model_spec_follows_the_task():
    cfg = tiny()
    assert model_spec(cfg, 4).kind == "classifier"
    cfg.task = "segment"
    assert model_spec(cfg, 4).num_outputs == 7
    cfg.task = "normals"
    assert model_spec(cfg, 4).num_outputs == 3
    assert copy_config(cfg, seed=9).seed == 9 and cfg.seed == 0


def test_schedules():
    cfg = ExperimentConfig(epochs=200)
    assert learning_rate(cfg, 0) == learning_rate(cfg, 19) == 0.001
    assert learning_rate(cfg, 20) == 0.0005
    assert learning_rate(cfg, 199) == 1e-5  # the floor
    assert bn_momentum(cfg, 0) == 0.5
    assert bn_momentum(cfg, 199) == pytest.approx(0.99)
    assert bn_momentum(cfg, 100) == pytest.approx(0.5 + 0.49 * 100 / 199)


# ----------------------------------------------------------------- metrics


def test_classification_metric_examples():
    assert classification_metrics([0, 1, 2], [0, 1, 2]) == (1.0, 1.0)
    assert classification_metrics([0, 0, 0, 0], [0, 0, 1, 1]) == (0.5, 0.5)
    overall, avg = classification_metrics([0] * 10, [0] * 9 + [1])
    assert overall == pytest.approx(0.9) and avg == 0.5
    with pytest.raises(Exception):
        classification_metrics([], [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30))
def test_overall_accuracy_is_one_minus_hamming_rate(pairs):
    pred, gt = map(np.array, zip(*pairs))
    overall, avg = classification_metrics(pred, gt)
    assert overall == pytest.approx(1.0 - np.count_nonzero(pred != gt) / len(gt), rel=1e-12)
    assert 0.0 <= avg <= 1.0


def test_part_miou_examples():
    assert part_miou([0, 0, 1, 0], [0, 0, 1, 1], {0, 1}) == pytest.approx(7 / 12)
    assert part_miou([1, 0, 1], [1, 0, 1], {0, 1}) == 1.0
    assert part_miou([0, 0], [0, 0], {0, 1}) == 1.0
    with pytest.raises(LabelError):
        part_miou([0, 2], [0, 1], {0, 1})


def test_dataset_miou_reports_both_means():
    per_cat, inst, cls = dataset_miou(
        [[0, 0], [0, 1], [5, 5]], [[0, 0], [1, 1], [5, 5]], [0, 0, 1], {0: (0, 1), 1: (5,)})
    # category 0 shapes: 1.0 and (0 + 1/2) / 2; category 1: 1.0
    assert per_cat == {0: pytest.approx(0.625), 1: 1.0}
    assert inst == pytest.approx((1.0 + 0.25 + 1.0) / 3)
    assert cls == pytest.approx((0.625 + 1.0) / 2)


def oracle_miou(pred, gt, parts):
    total = Fraction(0)
    for p in parts:
        inter = {i for i, v in enumerate(pred) if v == p} & {i for i, v in enumerate(gt) if v == p}
        union = {i for i, v in enumerate(pred) if v == p} | {i for i, v in enumerate(gt) if v == p}
        total += Fraction(1) if not union else Fraction(len(inter), len(union))
    return total / len(parts)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)),
                         min_size=1, max_size=10))))
def test_part_miou_matches_the_exact_oracle(case):
    k, pairs = case
    pred, gt = zip(*pairs)
    assert part_miou(pred, gt, range(k)) == float(oracle_miou(pred, gt, range(k)))


# ---------------------------------------------------------------- training


def test_one_epoch_on_eight_clouds(tmp_path):
    cfg = tiny(**{"data.clouds_per_class": 2})
    result = train(cfg, tmp_path)
    curve = result.report.loss_curve
    assert curve and all(np.isfinite(row[3:]).all() for row in curve)
    assert all(row[4] >= 0 for row in curve)  # regularizer stays non-negative
    for name in ("checkpoint.pnet", "metrics.txt", "train.log", "loss_curve.txt", "loss_curve.png"):
        assert (tmp_path / name).exists()
    metrics = read_metrics(tmp_path / "metrics.txt")
    assert 0.0 <= float(metrics["overall_accuracy"]) <= 1.0
    assert int(metrics["num_parameters"]) == count_parameters(result.state.spec)
    state = load_checkpoint(tmp_path / "checkpoint.pnet")
    assert np.array_equal(state.flat, result.state.flat)
    experiment, columns, rows = read_curve(tmp_path / "loss_curve.txt")
    assert experiment == "loss" and columns[-1] == "total_loss" and len(rows) == len(curve)


def test_training_is_bitwise_repeatable(tmp_path):
    cfg = tiny(epochs=2, seed=4)
    train(cfg, tmp_path / "a", figures=False)
    train(cfg, tmp_path / "b", figures=False)
    for name in ("checkpoint.pnet", "metrics.txt", "train.log", "loss_curve.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    train(tiny(epochs=2, seed=5), tmp_path / "c", figures=False)
    assert (tmp_path / "a/checkpoint.pnet").read_bytes() != (tmp_path / "c/checkpoint.pnet").read_bytes()


def test_bn_refresh_makes_eval_match_the_batch_statistics():
    from conftest import small_segmenter
    from setnet.data import SynthSpec, synth_generate
    from setnet.pointnet import segment_forward

    clouds = synth_generate(SynthSpec(points=12, clouds_per_class=1))
    state = small_segmenter(num_outputs=7)
    pts = np.stack([c.points for c in clouds])
    before = {k: v.mean.copy() for k, v in state.bn.items()}
    rng = np.random.default_rng(0)
    assert refresh_bn_statistics(state, clouds, "segment", 8, 12, 0, rng) == 0
    assert all(np.array_equal(state.bn[k].mean, v) for k, v in before.items())
    # one batch holding every cloud: the running statistics become that batch's
    assert refresh_bn_statistics(state, clouds, "segment", 8, 12, 5, rng) == 1
    state.bn_momentum = 0.5
    train_mode = segment_forward(state.copy(), pts, "train").logits.data
    np.testing.assert_allclose(segment_forward(state, pts).logits.data, train_mode, rtol=1e-9, atol=1e-12)
    with pytest.raises(ConfigError):
        tiny(bn_refresh_batches=-1).validate()


def test_non_finite_loss_aborts_with_diagnostics(tmp_path):
    with pytest.raises(NumericError, match="epoch .* batch"):
        train(tiny(epochs=3, lr=1e300), tmp_path, figures=False)


@pytest.mark.parametrize("task", ["segment", "normals"])
def test_per_point_tasks_train(task, tmp_path):
    result = train(tiny(task=task, **{"model.category_conditioning": "true"}), tmp_path,
                   figures=False)
    metrics = read_metrics(tmp_path / "metrics.txt")
    if task == "segment":
        assert 0.0 <= float(metrics["instance_miou"]) <= 1.0 and "class_miou" in metrics
    else:
        assert 0.0 <= float(metrics["normal_loss"]) <= 1.0
    assert result.state.spec.category_conditioning


def test_training_from_a_dataset_directory(tmp_path):
    from setnet.data import SynthSpec, synth_generate, write_dataset

    clouds = synth_generate(SynthSpec(classes=("cube", "cone"), points=12, clouds_per_class=4))
    write_dataset(tmp_path / "d", clouds, ["train", "train", "train", "test"] * 2, ("cube", "cone"))
    result = train(tiny(**{"data.source": "dir", "data.dir": str(tmp_path / "d"), "data.points": 12}),
                   tmp_path / "run", figures=False)
    assert result.report.train_clouds == 6 and result.report.test_clouds == 2


def test_corrupted_evaluation(tmp_path):
    result = train(tiny(**{"corrupt.protocol": "outliers", "corrupt.severity": 0.25, "task": "segment"}),
                   tmp_path, figures=False)
    assert result.report.instance_miou is not None


def test_mnist_source_needs_a_directory(tmp_path):
    with pytest.raises(ConfigError):
        train(tiny(**{"data.source": "mnist"}), tmp_path)
    with pytest.raises(ConfigError):
        train(tiny(**{"data.source": "mnist", "data.mnist_dir": str(tmp_path)}), tmp_path)


# ------------------------------------------------------------- experiments


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    return train(tiny(epochs=2), tmp_path_factory.mktemp("run"), figures=False)


def test_robustness_sweep_shape_and_clean_rows(trained):
    rows = robustness_sweep(trained.state, trained.data.test)
    assert len(rows) == len(robustness_grid((0, .25, .5, .75, .875), (0, .05, .1, .2),
                                            (0, .02, .04, .06, .08, .1))) == 20
    clean, _, _ = evaluate_classification(trained.state, trained.data.test)
    assert all(r.accuracy == clean for r in rows if r.severity == 0.0)
    again = robustness_sweep(trained.state, trained.data.test)
    assert [r.accuracy for r in again] == [r.accuracy for r in rows]


def test_ablation_report(tmp_path):
    rows = ablation_run(tiny(), tmp_path / "a")
    assert [r.label for r in rows] == [v[0] for v in ABLATION_VARIANTS]
    assert rows[0].num_parameters < rows[-1].num_parameters
    assert rows[2].reg_weight == 0.0 and rows[3].reg_weight == 0.001
    assert (tmp_path / "a/ablation.png").exists()
    again = ablation_run(tiny(), tmp_path / "b", figures=False)
    assert [r.accuracy for r in again] == [r.accuracy for r in rows]
    assert (tmp_path / "a/ablation.txt").read_bytes() == (tmp_path / "b/ablation.txt").read_bytes()


def test_bottleneck_sweep_grid(tmp_path, monkeypatch):
    cells = bottleneck_sweep(tiny(), tmp_path / "one", k_list=(4, 8), n_list=(8, 16), figures=False)
    assert [(c.k, c.n) for c in cells] == [(4, 8), (4, 16), (8, 8), (8, 16)]
    assert all(c.bound_ok and c.max_critical <= c.bound for c in cells)
    _, columns, rows = read_curve(tmp_path / "one/bottleneck.txt")
    assert columns[:3] == ["k", "n", "accuracy"] and len(rows) == 4
    monkeypatch.setenv("SETNET_THREADS", "2")
    bottleneck_sweep(tiny(), tmp_path / "two", k_list=(4, 8), n_list=(8, 16), figures=False)
    assert (tmp_path / "one/bottleneck.txt").read_bytes() == (tmp_path / "two/bottleneck.txt").read_bytes()


def test_sweeps_need_a_classifier(tmp_path):
    with pytest.raises(ConfigError):
        ablation_run(tiny(task="segment"), tmp_path)
    with pytest.raises(ConfigError):
        bottleneck_sweep(tiny(**{"model.aggregator": "average"}), tmp_path)


def test_curve_files(tmp_path):
    path = tmp_path / "c.txt"
    write_curve(path, "demo", ("name", "x", "y"), [("a", 1, 0.5), ("b", np.int64(2), np.float64(0.25))])
    assert path.read_text().splitlines()[0] == "# setnet-curve v1"
    assert read_curve(path) == ("demo", ["name", "x", "y"], [["a", 1, 0.5], ["b", 2, 0.25]])
    assert os.path.getsize(path) > 0
