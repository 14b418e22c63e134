import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastscnn.blocks import BottleneckSpec
from fastscnn.layers import BatchNorm2d, Conv2d, Sequential
from fastscnn.model import (
    BLOCK_BOUNDARIES,
    ModelConfig,
    build,
    count_flops,
    count_params,
    shape_trace,
    summary_report,
)
from fastscnn.selftest import expected_params
from fastscnn.tensor import Tensor

from conftest import TOY

# Frozen from an independent per-row closed form (out_h*out_w*cout*cin*k*k/groups
# summed over every conv of the inference graph at 1024x2048).
MACS_1024x2048 = 6_709_649_408
# Frozen from the hand count: conv weights (no biases) plus 2*channels per BN.
PARAMS_WITHOUT_AUX = 1_137_776
PARAMS_AUX = (64 + 128) * 19


@pytest.fixture(scope="module")
def model():
    return build(train=True)


def test_block_trace_matches_golden_boundaries(model):
    trace = dict(shape_trace(model))
    for name, (h, w, c) in BLOCK_BOUNDARIES:
        assert trace[name] == (1, c, h, w), name
    assert trace["classifier.conv"] == (1, 19, 128, 256)
    assert trace["classifier.up"] == (1, 19, 1024, 2048)


@pytest.mark.parametrize("h,w,k", [(512, 1024, 2), (256, 512, 4)])
def test_block_trace_scales_with_resolution(model, h, w, k):
    trace = dict(shape_trace(model, h, w))
    for name, (bh, bw, c) in BLOCK_BOUNDARIES:
        assert trace[name] == (1, c, bh // k, bw // k), name


def test_quarter_resolution_named_outputs(model):
    trace = dict(shape_trace(model, 256, 512))
    assert trace["lds.dsconv2"][2:] == (32, 64)
    assert trace["gfe.ppm"][2:] == (8, 16)
    assert trace["ffm"][2:] == (32, 64)


def test_layer_trace_matches_runtime_shapes():
    m = build(**TOY)
    observed = []
    m.eval()
    m._run(Tensor(np.zeros((1, 3, 128, 256), np.float32)), "logits", observed)
    assert observed == shape_trace(m, 128, 256)


@settings(max_examples=8, deadline=None)
@given(h=st.sampled_from([64, 96, 128]), w=st.sampled_from([64, 128, 160]), k=st.integers(1, 5),
       bins=st.sampled_from([(1,), (1, 2), (1, 2)]), n=st.integers(1, 2))
def test_trace_equals_runtime_for_random_configs(h, w, k, bins, n):
    cfg = ModelConfig(num_classes=k, input_h=h, input_w=w, ppm_bins=bins,
                      bottlenecks=(BottleneckSpec(2, 16, n, 2), BottleneckSpec(2, 24, 1, 2), BottleneckSpec(2, 32, n, 1)),
                      lds_widths=(8, 12, 16), ppm_out=32, ffm_out=16)
    m = build(cfg)
    observed = []
    m._run(Tensor(np.zeros((1, 3, h, w), np.float32)), "logits", observed)
    assert observed == shape_trace(m, h, w)


def test_trace_error_names_the_layer():
    m = build()
    m.gfe.bottleneck2.block[0].dw.stride = 3
    with pytest.raises(ValueError, match="shape propagation failed at (gfe|ffm)"):
        shape_trace(m)


def test_forward_at_three_resolutions_without_rebuilding():
    m = build(seed=3)
    for h, w in [(256, 512), (512, 1024), (1024, 2048)]:
        assert m.infer(np.zeros((1, 3, h, w), np.float32), "cls").shape == (1, h, w)
    assert m(Tensor(np.zeros((1, 3, 256, 512), np.float32))).shape == (1, 19, 256, 512)


def test_training_forward_returns_aux_logits():
    m = build(train=True, **TOY)
    main, aux_lds, aux_gfe = m(Tensor(np.zeros((2, 3, 128, 256), np.float32)))
    assert main.shape == aux_lds.shape == aux_gfe.shape == (2, 3, 128, 256)


def test_indivisible_input_lists_divisor():
    with pytest.raises(ValueError, match="divisible by 32"):
        build(input_h=1000)
    with pytest.raises(ValueError, match="divisible by 32"):
        build().infer(np.zeros((1, 3, 100, 64), np.float32))


def test_wrong_channel_count_rejected():
    with pytest.raises(ValueError, match=r"\(n, 3, H, W\)"):
        build().infer(np.zeros((1, 4, 64, 64), np.float32))


def test_oversized_pooling_bins_rejected_early():
    with pytest.raises(ValueError, match="ppm_bins"):
        build(input_h=128, input_w=256)


def test_same_seed_builds_are_bit_identical():
    a, b = build(seed=7).state(), build(seed=7).state()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(build(seed=8).state()["lds.conv.conv.weight"], a["lds.conv.conv.weight"])


def test_class_count_changes_only_final_conv():
    a, b = build().state(), build(num_classes=2).state()
    assert a.keys() == b.keys()
    diff = [k for k in a if a[k].shape != b[k].shape]
    assert diff == ["classifier.conv.weight"]
    assert b["classifier.conv.weight"].shape == (2, 128, 1, 1)


def test_inference_is_deterministic(rng):
    m = build(**TOY)
    x = rng.standard_normal((1, 3, 128, 256)).astype(np.float32)
    np.testing.assert_array_equal(m.infer(x, "prob"), m.infer(x, "prob"))


def test_zero_skip_changes_outputs(rng):
    x = rng.standard_normal((1, 3, 128, 256)).astype(np.float32)
    a = build(seed=1, **TOY)
    b = build(seed=1, zero_skip=True, **TOY)
    assert not np.array_equal(a.infer(x, "prob"), b.infer(x, "prob"))


def test_single_skip_topology(model):
    edges = model.topology()
    cross = [(a, b) for a, b in edges if not b.startswith("aux") and (a, b) not in
             {("input", "lds"), ("lds", "gfe"), ("gfe", "ffm.low"), ("ffm", "classifier")}]
    assert cross == [("lds", "ffm.high")]


# -- parameter accounting ---------------------------------------------------------------

def test_params_default(model):
    p = count_params(model)
    assert p.without_aux == PARAMS_WITHOUT_AUX
    assert p.aux == PARAMS_AUX
    assert abs(p.without_aux / 1.11e6 - 1) <= 0.05
    assert expected_params(model.config) == (PARAMS_WITHOUT_AUX, PARAMS_AUX)


def test_params_learning_to_downsample(model):
    lds = sum(v for k, v in count_params(model).per_layer.items() if k.startswith("lds."))
    assert lds == 6640


def test_params_single_pointwise_with_bn():
    from fastscnn.layers import Module

    class Tiny(Module):
        def __init__(self):
            super().__init__()
            self.conv = Conv2d(1, 1, 1)
            self.bn = BatchNorm2d(1)

    assert count_params(Tiny()).total == 3


def test_params_do_not_depend_on_resolution():
    assert count_params(build(input_h=512, input_w=1024)).total == count_params(build()).total


def test_params_independent_of_inference_flag():
    assert count_params(build()).total == PARAMS_WITHOUT_AUX


# -- MAC accounting -----------------------------------------------------------------------

def test_macs_closed_form_total(model):
    assert count_flops(model).total_macs == MACS_1024x2048


def test_macs_trivial_layers():
    _, recs = Conv2d(1, 1, 1).trace((1, 1, 1, 1))
    assert recs[0].macs == 1
    _, recs = Conv2d(5, 5, 3, depthwise=True).trace((1, 5, 7, 9))
    assert recs[0].macs == 7 * 9 * 5 * 9


def test_macs_quarter_at_half_resolution(model):
    full = {r.name: r.macs for r in count_flops(model).per_layer}
    half = {r.name: r.macs for r in count_flops(model, 512, 1024).per_layer}
    for name, macs in full.items():
        if ".branch" in name:  # pooled branches run at the fixed bin size
            assert half[name] == macs
        else:
            assert half[name] * 4 == macs, name


def test_aux_heads_cost_nothing_at_inference(model):
    infer = count_flops(model)
    train = count_flops(model, training=True)
    aux = [r for r in train.per_layer if r.name.startswith("aux_")]
    assert aux and not any(r.name.startswith("aux_") for r in infer.per_layer)
    assert train.total_macs - infer.total_macs == sum(r.macs for r in aux)


def test_summary_report(model):
    text = summary_report(model)
    assert "params_millions=1.14" in text
    assert f"params_total={PARAMS_WITHOUT_AUX + PARAMS_AUX}" in text
    assert f"params_without_aux={PARAMS_WITHOUT_AUX}" in text
    assert f"macs_inference={MACS_1024x2048}" in text
    for name, (h, w, c) in BLOCK_BOUNDARIES:
        assert f"{name}" in text and f"{h}x{w}x{c}" in text


def test_model_is_a_module_tree(model):
    assert isinstance(model.lds, Sequential)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
