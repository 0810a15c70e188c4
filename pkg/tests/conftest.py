import numpy as np
import pytest

from setnet.pointnet import ClassifierSpec, ModelState, SegmenterSpec

SMALL = dict(pre_widths=(8, 8), post_widths=(8, 16), bottleneck=32,
             tnet_mlp_widths=(8, 16, 32), tnet_fc_widths=(16, 8))


def small_classifier(transforms=True, seed=0, **kw):
    spec = ClassifierSpec(use_input_transform=transforms, use_feature_transform=transforms,
                          num_classes=kw.pop("num_classes", 4), fc_widths=(16, 8),
                          **{**SMALL, **kw})
    return ModelState(spec, seed)


def small_segmenter(transforms=True, seed=0, **kw):
    spec = SegmenterSpec(use_input_transform=transforms, use_feature_transform=transforms,
                         num_outputs=kw.pop("num_outputs", 5), head_widths=(16, 8),
                         **{**SMALL, **kw})
    return ModelState(spec, seed)


def perturb_params(state, rng, scale=0.1):
    """Random non-trivial weights everywhere, including T-net output layers."""
    state.flat[...] += rng.normal(0.0, scale, size=state.flat.shape)
    for s in state.bn.values():
        s.mean[...] = rng.normal(0.0, 0.1, size=s.mean.shape)
        s.var[...] = rng.uniform(0.5, 2.0, size=s.var.shape)
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------ acceptance reporting

ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """Record and print one ``PASS``/``FAIL`` line for an acceptance criterion."""

    def record(number, name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} {name}: {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
