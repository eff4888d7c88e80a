import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fsddi.errors import (ConfigurationError, DegenerateGradientError, InvalidLabelError,
                          NotInClassError, NumericOverflowError)
from fsddi.nn import (ClassifierConfig, GradVector, SegNetConfig, backward, backward_from_tape,
                      class_masked_gradient, cross_entropy, forward, init_params,
                      load_checkpoint, network_for, pixel_loss, predict, prune_view,
                      save_checkpoint, sgd_step)
from fsddi.nn.layers import NORM_EPS, BatchNorm, InstanceNorm
from fsddi.nn.network import CHECKPOINT_MAGIC

TOY_ARCHS = [
    dict(kind="segnet", height=4, width=6, channels=[2, 3, 2], num_classes=3, norm="instance"),
    dict(kind="segnet", height=4, width=6, channels=[3, 4, 2], num_classes=3, norm="batch"),
    dict(kind="segnet", height=8, width=8, channels=[2, 3, 2], num_classes=3, norm="instance",
         depth=2, skip=True),
    dict(kind="classifier", height=8, width=8, channels=[2, 3], num_outputs=2),
]


def _toy_problem(arch, seed=0):
    net = network_for(arch)
    rng = np.random.default_rng(seed)
    p = net.init(rng)
    p.values += rng.normal(0, 0.1, p.size) * net.trainable
    x = rng.random((2,) + net.input_shape)
    if arch["kind"] == "segnet":
        y = rng.integers(0, arch["num_classes"], x.shape)
        w = rng.random(y.shape)
    else:
        y = rng.integers(0, arch["num_outputs"], 2)
        w = np.full(2, 0.5)
    return net, p, x, y, w


def finite_difference_error(arch, seed=0, h=1e-5):
    net, p, x, y, w = _toy_problem(arch, seed)

    def loss(v):
        return cross_entropy(net.forward(v, x, "train").output, y, w)[0]

    tape = net.forward(p.values, x, "train")
    g = tape.backward(cross_entropy(tape.output, y, w)[1])
    idx = np.flatnonzero(net.trainable)
    fd = np.empty(idx.size)
    for n, i in enumerate(idx):
        e = np.zeros(p.size)
        e[i] = h
        fd[n] = (loss(p.values + e) - loss(p.values - e)) / (2 * h)
    return np.linalg.norm(g[idx] - fd) / np.linalg.norm(fd), g


@pytest.mark.parametrize("arch", TOY_ARCHS, ids=["instance", "batch", "skip", "classifier"])
def test_gradient_matches_finite_differences(arch):
    err, _ = finite_difference_error(arch)
    assert err < 1e-4


def test_buffers_get_no_gradient():
    arch = TOY_ARCHS[1]
    _, g = finite_difference_error(arch)
    assert np.all(g[~network_for(arch).trainable] == 0)


def test_zero_params_give_flat_logits():
    p = init_params(SegNetConfig(8, 12, (2, 4, 2)), 0)
    p.values[:] = 0.0
    out = forward(p, np.random.default_rng(1).random((8, 12)))
    assert out.shape == (5, 8, 12)
    assert np.ptp(out, axis=0).max() == 0.0


def test_forward_deterministic_and_snapshot():
    p = init_params(SegNetConfig(8, 12, (2, 4, 2)), 3)
    img = np.linspace(0, 1, 96).reshape(8, 12)
    a = forward(p, img)
    b = forward(p, img)
    assert np.array_equal(a, b)
    # frozen once from this implementation
    assert a.sum() == pytest.approx(SNAPSHOT_SUM, rel=1e-12)
    assert a[2, 3, 4] == pytest.approx(SNAPSHOT_PIXEL, rel=1e-12)


SNAPSHOT_SUM = 125.1231870177583
SNAPSHOT_PIXEL = 0.5275797075908236


def test_shape_mismatch_is_configuration_error():
    p = init_params(SegNetConfig(8, 12, (2, 4, 2)), 0)
    with pytest.raises(ConfigurationError):
        forward(p, np.zeros((8, 10)))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SegNetConfig(num_classes=1)
    with pytest.raises(ConfigurationError):
        SegNetConfig(height=63)
    with pytest.raises(ConfigurationError):
        SegNetConfig(norm="group")
    with pytest.raises(ConfigurationError):
        SegNetConfig(height=6, width=12, depth=2)


def test_default_architecture_size():
    assert init_params(SegNetConfig(), 0).size == 9637


# ------------------------------------------------------------------ loss

def test_perfect_logits_loss_vanishes():
    mask = np.array([[0, 1], [2, 1]])
    logits = np.full((3, 2, 2), -30.0)
    for c in range(3):
        logits[c][mask == c] = 30.0
    assert pixel_loss(logits, mask, np.full(mask.shape, 0.25)) < 1e-10


def test_uniform_logits_give_log_c():
    mask = np.zeros((3, 4), dtype=int)
    assert pixel_loss(np.zeros((5, 3, 4)), mask, np.full(mask.shape, 1 / 12)) == \
        pytest.approx(math.log(5), abs=1e-12)


def test_hand_computed_cross_entropy():
    # 2x2 image, 2 classes
    logits = np.array([[[1.0, 0.0], [2.0, -1.0]], [[0.0, 0.0], [0.0, 1.0]]])
    mask = np.array([[0, 1], [0, 1]])
    w = np.full((2, 2), 0.25)
    ce = [math.log(1 + math.exp(-1)), math.log(2), math.log(1 + math.exp(-2)),
          math.log(1 + math.exp(-2))]
    assert pixel_loss(logits, mask, w) == pytest.approx(sum(ce) / 4, abs=1e-14)


def test_mean_loss_matches_naive_loop():
    rng = np.random.default_rng(5)
    logits = rng.normal(0, 3, (4, 5, 6))
    mask = rng.integers(0, 4, (5, 6))
    naive = 0.0
    for i in range(5):
        for j in range(6):
            z = logits[:, i, j]
            naive += -(z[mask[i, j]] - math.log(sum(math.exp(v) for v in z)))
    assert pixel_loss(logits, mask, np.full(mask.shape, 1 / 30)) == pytest.approx(naive / 30,
                                                                                 abs=1e-12)


def test_large_logits_stay_finite():
    logits = np.array([[[1000.0]], [[-1000.0]]])
    assert pixel_loss(logits, np.array([[1]]), np.ones((1, 1))) == pytest.approx(2000.0)


def test_invalid_label_and_weights():
    with pytest.raises(InvalidLabelError):
        pixel_loss(np.zeros((3, 2, 2)), np.full((2, 2), 3), np.ones((2, 2)))
    with pytest.raises(ConfigurationError):
        pixel_loss(np.zeros((3, 2, 2)), np.zeros((2, 2), int), -np.ones((2, 2)))


# ------------------------------------------------------------------ backward

@pytest.fixture(scope="module")
def small_model():
    p = init_params(SegNetConfig(8, 12, (2, 4, 2)), 1)
    rng = np.random.default_rng(2)
    img = rng.random((8, 12))
    mask = rng.integers(0, 5, (8, 12))
    mask[0, 0] = 0
    return p, img, mask


def test_zero_weights_zero_gradient(small_model):
    p, img, mask = small_model
    assert not backward(p, img, mask, np.zeros(mask.shape)).values.any()


def test_gradient_linear_in_weights(small_model):
    p, img, mask = small_model
    w = np.random.default_rng(0).random(mask.shape)
    g1 = backward(p, img, mask, w).values
    g2 = backward(p, img, mask, 2 * w).values
    assert np.array_equal(g2, 2 * g1)


def test_class_masked_gradient_unit_norm_and_matches_backward(small_model):
    p, img, mask = small_model

    class S:
        id, image = 7, img
    S.mask = mask
    for c in np.unique(mask):
        g = class_masked_gradient(p, S, int(c))
        assert g.norm == pytest.approx(1.0, abs=1e-9)
        w = (mask == c) / (mask == c).sum()
        raw = backward(p, img, mask, w, mode="eval").values
        assert np.allclose(g.raw, raw, rtol=0, atol=1e-15)


def test_class_masked_gradient_ignores_other_labels(small_model):
    p, img, mask = small_model

    class A:
        id, image = 0, img
    A.mask = mask
    B = type("B", (), {"id": 0, "image": img})
    relabelled = mask.copy()
    relabelled[(mask != 0) & (mask != 2)] = 3
    B.mask = relabelled
    a = class_masked_gradient(p, A, 0)
    b = class_masked_gradient(p, B, 0)
    # the loss on other pixels is excluded, so their labels are irrelevant
    assert np.array_equal(a.values, b.values)


def test_not_in_class(small_model):
    p, img, mask = small_model
    S = type("S", (), {"id": 1, "image": img, "mask": np.zeros_like(mask)})
    with pytest.raises(NotInClassError):
        class_masked_gradient(p, S, 3)


def test_degenerate_gradient(small_model):
    p, img, mask = small_model
    q = p.copy()
    q.values[:] = 0.0
    head = q.network.layout["head.bias"][0]
    q.values[head:head + 5] = [800.0, 0, 0, 0, 0]  # softmax saturates: exact zero gradient
    S = type("S", (), {"id": 2, "image": img, "mask": np.zeros_like(mask)})
    with pytest.raises(DegenerateGradientError):
        class_masked_gradient(q, S, 0)


def test_tape_reuse(small_model):
    p, img, mask = small_model
    tape = p.network.forward(p.values, img[None], mode="eval")
    for c in (0, 1):
        w = ((mask == c) / max((mask == c).sum(), 1))[None]
        assert np.array_equal(backward_from_tape(tape, mask[None], w),
                              backward(p, img, mask, w[0], mode="eval").values)


def test_numeric_overflow_names_layer():
    p = init_params(SegNetConfig(8, 12, (2, 4, 2)), 1)
    off = p.network.layout["conv2.weight"][0]
    p.values[off] = np.inf
    with pytest.raises(NumericOverflowError, match="conv2"):
        forward(p, np.ones((8, 12)))


# ------------------------------------------------------------------ sgd and pruning

def test_sgd_step_arithmetic():
    p = init_params(SegNetConfig(8, 12, (2, 4, 2)), 0)
    mask = p.network.trainable
    p.values[:] = 1.0
    sgd_step(p, np.full(p.size, 2.0), 0.1)
    assert np.allclose(p.values[mask], 0.8, atol=1e-15)
    before = p.values.copy()
    sgd_step(p, np.full(p.size, 2.0), 0.0)
    assert np.array_equal(p.values, before)


def test_sgd_weight_decay_componentwise():
    rng = np.random.default_rng(0)
    p = init_params(ClassifierConfig(8, 8, (2, 3), 2), 0)
    w = p.values.copy()
    g = rng.normal(size=p.size)
    sgd_step(p, g, 0.05, 0.001)
    assert np.allclose(p.values, w - 0.05 * g - 0.05 * 0.001 * w, rtol=0, atol=1e-15)


def test_sgd_leaves_buffers_alone():
    p = init_params(SegNetConfig(8, 12, (2, 4, 2), norm="batch"), 0)
    before = p.values.copy()
    sgd_step(p, np.ones(p.size), 0.1, 0.01)
    frozen = ~p.network.trainable
    assert frozen.any() and np.array_equal(p.values[frozen], before[frozen])


def test_prune_view():
    raw = np.arange(1.0, 11.0)
    g = GradVector(raw / np.linalg.norm(raw), 0, 1, True, raw)
    assert np.array_equal(prune_view(g, np.arange(10)).values, g.values)
    assert prune_view(g, [3]).values.tolist() == [1.0]
    idx = np.array([0, 2, 4, 6, 8])
    assert np.allclose(prune_view(g, idx).values, raw[idx] / np.linalg.norm(raw[idx]))
    with pytest.raises(ConfigurationError):
        prune_view(g, [1, 1])
    with pytest.raises(ConfigurationError):
        prune_view(g, [10])


# ------------------------------------------------------------------ norm layers

@settings(max_examples=25, deadline=None)
@given(a=st.floats(0.1, 10), b=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_instance_norm_affine_invariance(a, b, seed):
    x = np.random.default_rng(seed).normal(size=(2, 4, 5, 3))
    layer = InstanceNorm("n", 3)
    h1 = layer.normalize(x)[0]
    h2 = layer.normalize(a * x + b)[0]
    # the shift vanishes exactly; the scale only interacts with epsilon
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    assert np.allclose(h2, (x - mu) / np.sqrt(var + NORM_EPS / a ** 2), rtol=0, atol=1e-9)
    assert np.allclose(h1, h2, atol=1e-4 * max(1.0, 1 / a ** 2))


def test_batchnorm_running_stats_update():
    layer = BatchNorm("bn", 2)
    P = {"weight": np.ones(2), "bias": np.zeros(2), "running_mean": np.zeros(2),
         "running_var": np.ones(2)}
    x = np.random.default_rng(0).normal(3.0, 2.0, (4, 3, 3, 2))
    buffers = {}
    layer.forward(P, x, "train", buffers)
    flat = x.reshape(-1, 2)
    assert np.allclose(buffers["bn.running_mean"], 0.1 * flat.mean(0))
    assert np.allclose(buffers["bn.running_var"], 0.9 + 0.1 * flat.var(0, ddof=1))


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_roundtrip(tmp_path):
    p = init_params(SegNetConfig(8, 12, (2, 4, 2), norm="batch"), 4)
    path = tmp_path / "w.ckpt"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.arch == p.arch
    assert q.values.tobytes() == p.values.tobytes()
    data = path.read_bytes()
    assert data[:8] == CHECKPOINT_MAGIC
    assert data[-8 * p.size:] == p.values.astype("<f8").tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(ConfigurationError, match="magic"):
        load_checkpoint(path)


def test_predict_shapes():
    p = init_params(SegNetConfig(8, 12, (2, 4, 2)), 0)
    assert predict(p, np.zeros((3, 8, 12))).shape == (3, 8, 12)
    c = init_params(ClassifierConfig(8, 12, (2, 3), 2), 0)
    assert predict(c, np.zeros((3, 8, 12))).shape == (3,)
