"""Second oracle route: primitives and their gradients against PyTorch (CPU, float64)."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastscnn import functional as F
from fastscnn.tensor import Tape, Tensor

torch = pytest.importorskip("torch")
tf = torch.nn.functional


def same_pad(size, k, s, d):
    total = max((math.ceil(size / s) - 1) * s + (k - 1) * d + 1 - size, 0)
    return total // 2, total - total // 2


def torch_conv(x, w, s, d, groups=1):
    k = w.shape[-1]
    top, bottom = same_pad(x.shape[2], k, s, d)
    left, right = same_pad(x.shape[3], k, s, d)
    return tf.conv2d(tf.pad(x, (left, right, top, bottom)), w, stride=s, dilation=d, groups=groups)


def leaves(arrays):
    """The same float64 inputs as gradient-tracking leaves on both routes."""
    ours = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    theirs = [torch.tensor(a, requires_grad=True) for a in arrays]
    return ours, theirs


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), s=st.sampled_from([1, 2]), d=st.sampled_from([1, 2, 4]),
       k=st.sampled_from([1, 3]), depthwise=st.booleans(), h=st.integers(3, 11), w=st.integers(3, 11))
def test_conv_forward_and_backward(seed, s, d, k, depthwise, h, w):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    cout = c if depthwise else int(rng.integers(1, 4))
    k = 3 if depthwise else k
    x = rng.standard_normal((2, c, h, w))
    wt = rng.standard_normal((cout, 1 if depthwise else c, k, k))
    op = F.depthwise_conv2d if depthwise else F.conv2d
    (xo, wo), (xt, wt_t) = leaves([x, wt])

    with Tape() as tape:
        out = op(xo, wo, s, d)
        r = rng.standard_normal(out.shape)
        loss = F.sum(F.mul(out, Tensor(r)))
    tape.backward(loss)
    ref = torch_conv(xt, wt_t, s, d, groups=c if depthwise else 1)
    (ref * torch.tensor(r)).sum().backward()

    np.testing.assert_allclose(out.data, ref.detach().numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(xo.grad, xt.grad.numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(wo.grad, wt_t.grad.numpy(), rtol=1e-10, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), ih=st.integers(1, 9), iw=st.integers(1, 9),
       oh=st.integers(1, 20), ow=st.integers(1, 20))
def test_bilinear_half_pixel_forward_and_backward(seed, ih, iw, oh, ow):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, ih, iw))
    (xo,), (xt,) = leaves([x])
    with Tape() as tape:
        out = F.bilinear_resize(xo, oh, ow)
        r = rng.standard_normal(out.shape)
        loss = F.sum(F.mul(out, Tensor(r)))
    tape.backward(loss)
    ref = tf.interpolate(xt, size=(oh, ow), mode="bilinear", align_corners=False)
    (ref * torch.tensor(r)).sum().backward()
    np.testing.assert_allclose(out.data, ref.detach().numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(xo.grad, xt.grad.numpy(), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("size,bins", [((6, 6), 3), ((7, 5), (3, 2)), ((4, 8), 4), ((5, 7), 3), ((2, 2), 1)])
def test_adaptive_pool(size, bins):
    x = np.random.default_rng(0).standard_normal((1, 3, *size))
    (xo,), (xt,) = leaves([x])
    with Tape() as tape:
        out = F.adaptive_avg_pool(xo, bins)
        loss = F.sum(F.mul(out, out))
    tape.backward(loss)
    ref = tf.adaptive_avg_pool2d(xt, bins)
    (ref * ref).sum().backward()
    np.testing.assert_allclose(out.data, ref.detach().numpy(), rtol=1e-12)
    np.testing.assert_allclose(xo.grad, xt.grad.numpy(), rtol=1e-12)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm(training):
    rng = np.random.default_rng(3)
    x, g, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.random(3) + 0.5
    (xo, go, bo), (xt, gt, bt) = leaves([x, g, b])
    ours_rm, ours_rv = rm.copy(), rv.copy()
    r = rng.standard_normal(x.shape)
    with Tape() as tape:
        out = F.batch_norm(xo, go, bo, ours_rm, ours_rv, training)
        loss = F.sum(F.mul(out, Tensor(r)))
    tape.backward(loss)
    torch_rm, torch_rv = torch.tensor(rm.copy()), torch.tensor(rv.copy())
    ref = tf.batch_norm(xt, torch_rm, torch_rv, gt, bt, training=training, momentum=0.01, eps=1e-3)
    (ref * torch.tensor(r)).sum().backward()
    np.testing.assert_allclose(out.data, ref.detach().numpy(), rtol=1e-10, atol=1e-12)
    for ours, theirs in [(xo, xt), (go, gt), (bo, bt)]:
        np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(ours_rm, torch_rm.numpy(), rtol=1e-12)
    if not training:
        np.testing.assert_array_equal(ours_rv, rv)


def test_cross_entropy_with_ignore():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((2, 5, 3, 4))
    labels = rng.integers(0, 5, (2, 3, 4))
    labels[0, :2] = 255
    (lo,), (lt,) = leaves([logits])
    with Tape() as tape:
        loss = F.cross_entropy(lo, labels)
    tape.backward(loss)
    ref = tf.cross_entropy(lt, torch.tensor(labels), ignore_index=255)
    ref.backward()
    assert abs(loss.item() - ref.item()) <= 1e-12
    np.testing.assert_allclose(lo.grad, lt.grad.numpy(), rtol=1e-10, atol=1e-14)


def test_softmax():
    x = np.random.default_rng(5).standard_normal((2, 4, 3, 3))
    np.testing.assert_allclose(F.channel_softmax(Tensor(x)).data, torch.softmax(torch.tensor(x), 1).numpy(),
                               rtol=1e-12)
