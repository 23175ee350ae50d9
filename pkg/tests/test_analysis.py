import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsnet import ModelConfig, analyze, build, count_macs, count_params, receptive_field, shape_trace
from fbsnet.analysis import (executed_shape_trace, layer_costs, receptive_field_of, registry_param_count)
from fbsnet.layers import RF, Conv2d, depthwise, pointwise
from fbsnet.nn import Conv2dSpec
from fbsnet.tensor import Tensor

GOLDEN = ([(16, 256, 512)] * 6 + [(64, 128, 256)] * 5 + [(128, 64, 128)] * 22
          + [(64, 128, 256)] * 5 + [(16, 256, 512)] * 6 + [(19, 512, 1024)])
DRM_COLUMN = [(16, 256, 512), (64, 256, 512), (64, 256, 512), (16, 256, 512)]


@pytest.fixture(scope="module")
def default_graph():
    return build(ModelConfig())


def test_golden_table(default_graph):
    assert len(GOLDEN) == 45
    trace = dict(shape_trace(default_graph))
    rows = [d for d in default_graph.layers if d.branch != "sdb"]
    assert [trace[d.name][1:] for d in rows] == GOLDEN
    assert [trace[f"sdb.drm.{k}"][1:] for k in ("input", "conv1", "separable", "output")] == DRM_COLUMN
    assert trace["sdb.sam"][1:] == (16, 256, 512)


def test_single_layer_params():
    assert Conv2d(Conv2dSpec(16, 32, (3, 3))).param_count() == 4608
    assert Conv2d(depthwise(64, (3, 3))).param_count() == 576


def test_pointwise_macs():
    assert Conv2d(pointwise(16, 32)).cost((1, 16, 8, 8)).macs == 32_768


def test_dilation_does_not_change_macs():
    a = Conv2d(Conv2dSpec(8, 8, (3, 3), padding=1))
    b = Conv2d(Conv2dSpec(8, 8, (3, 3), padding=5, dilation=5))
    assert a.cost((1, 8, 16, 16)).macs == b.cost((1, 8, 16, 16)).macs


def test_receptive_field_examples():
    c = Conv2d(Conv2dSpec(1, 1, (3, 3), padding=1))
    assert receptive_field_of([c]).size_h == 3
    assert receptive_field_of([c, c]).size_h == 5
    deep = RF(size_h=1, size_w=1, jump_h=8, jump_w=8)
    d17 = Conv2d(Conv2dSpec(1, 1, (3, 3), padding=17, dilation=17))
    assert d17.receptive(deep).size_h - deep.size_h == 272


def test_dilated_receptive_field_impulse_probe():
    from fbsnet import nn
    from fbsnet.tensor import backward, sum_all, mul
    x = Tensor(np.zeros((1, 1, 320, 320)), requires_grad=True)
    one = Tensor(np.ones((1, 1, 1, 1)))
    h = x
    for _ in range(3):
        h = nn.conv2d(h, one, stride=2)
    y = nn.conv2d(h, Tensor(np.ones((1, 1, 3, 3))), None, 1, 17, 17)
    pick = np.zeros(y.shape)
    pick[0, 0, 20, 20] = 1
    backward(sum_all(mul(y, Tensor(pick))))
    rows, cols = np.nonzero(x.grad[0, 0])
    assert rows.max() - rows.min() + 1 == 1 + 272
    assert cols.max() - cols.min() + 1 == 1 + 272


def test_receptive_field_monotone(default_graph):
    sizes = [r.rf for r in analyze(default_graph).rows if r.branch != "sdb"]
    assert all(b[0] >= a[0] and b[1] >= a[1] for a, b in zip(sizes, sizes[1:]))
    assert receptive_field(default_graph) == sizes[-1]
    assert receptive_field(default_graph, 12) == sizes[11]


def test_macs_additive(default_graph):
    report = analyze(default_graph)
    assert count_macs(default_graph) == sum(c.macs for c in layer_costs(default_graph).values())
    assert report.flops_2x == 2 * report.macs


def test_count_params_matches_registry(default_graph):
    assert count_params(default_graph) == registry_param_count(default_graph) == analyze(default_graph).params


def _small_config(draw_widths, k, h, w, seed, sdb):
    return ModelConfig(num_classes=k, input_size=(8 * h, 8 * w), widths=draw_widths,
                       dilations=([1], [1, 2], [1, 2, 5], [1], [1]), seed=seed, spatial_branch=sdb)


widths = st.tuples(st.integers(2, 6), st.integers(1, 4), st.integers(1, 4)).map(
    lambda t: (2 * t[0], 2 * t[0] + 2 * t[1], 2 * t[0] + 2 * t[1] + 2 * t[2]))


@given(widths, st.integers(1, 6), st.integers(1, 3), st.integers(1, 3), st.integers(0, 99), st.booleans())
def test_randomized_configs_count_exactly(w, k, h, wd, seed, sdb):
    g = build(_small_config(w, k, h, wd, seed, sdb))
    assert count_params(g) == registry_param_count(g)


@given(widths, st.integers(1, 4), st.integers(1, 2), st.integers(1, 2), st.booleans())
def test_trace_matches_execution(w, k, h, wd, sdb):
    g = build(_small_config(w, k, h, wd, 0, sdb))
    x = Tensor(np.random.default_rng(0).random((1, 3, 8 * h, 8 * wd), dtype=np.float32))
    assert shape_trace(g) == executed_shape_trace(g, x)


def test_doubling_width_doubles_w(default_graph):
    base = shape_trace(default_graph)
    wide = shape_trace(default_graph, (1, 3, 512, 2048))
    for (na, sa), (nb, sb) in zip(base, wide):
        assert na == nb and sb[:3] == sa[:3] and sb[3] == 2 * sa[3]


def test_report_formats(default_graph):
    report = analyze(default_graph)
    text, csv_text = report.to_text(), report.to_csv()
    assert "total params" in text and str(report.params) in text
    lines = csv_text.strip().splitlines()
    assert lines[0].startswith("row,name") and len(lines) == len(report.rows) + 2
