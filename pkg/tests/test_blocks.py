import numpy as np
import pytest

from helpers import gradcheck, ms_block_loops, sop_loops
from msop import tensor as T
from msop.blocks import (
    ClassifierConfig,
    ConfigError,
    MSBlockParams,
    MsopClassifier,
    MsopLayerParams,
    SoPBlockParams,
    channel_covariance,
    classifier_forward,
    ms_block_forward,
    msop_layer_forward,
    sop_attention_weights,
    sop_block_forward,
)
from msop.tensor import SGD, Tensor, softmax_cross_entropy, zero_grad


# ---------------------------------------------------------------------------
# multi-scale block
# ---------------------------------------------------------------------------

def test_ms_block_slice1_passthrough():
    rng = np.random.default_rng(0)
    for d in (4, 8, 16):
        p = MSBlockParams.create(d, rng)
        for t, _ in zip(p.tensors(), range(6)):
            t[1].data[...] = rng.standard_normal(t[1].shape)
        x = Tensor(rng.standard_normal((5, 6, d)))
        y = ms_block_forward(x, p)
        assert np.array_equal(y.data[:, :, :d // 4], x.data[:, :, :d // 4])


def test_ms_block_zero_kernels():
    rng = np.random.default_rng(1)
    p = MSBlockParams.create(8, rng)
    for _, t in p.tensors():
        t.data[...] = 0.0
    x = Tensor(rng.standard_normal((4, 4, 8)))
    y = ms_block_forward(x, p)
    np.testing.assert_array_equal(y.data[:, :, :2], x.data[:, :, :2])
    np.testing.assert_array_equal(y.data[:, :, 2:], np.zeros((4, 4, 6)))


def test_ms_block_half_kernels_on_ones():
    # 2x2x4 ones, every kernel weight 0.5, no bias: each 3x3 window sees the
    # full 2x2 input, so y2 = 0.5*4 = 2, y3 = 0.5*4*(1+2) = 6, y4 = 0.5*4*7 = 14
    p = MSBlockParams(
        c1=Tensor(np.full((3, 3, 1, 1), 0.5)),
        c2=Tensor(np.full((3, 3, 1, 1), 0.5)),
        c3=Tensor(np.full((3, 3, 1, 1), 0.5)),
    )
    x = np.ones((2, 2, 4))
    y = ms_block_forward(Tensor(x), p).data
    np.testing.assert_allclose(y[:, :, 0], 1.0, atol=1e-15)
    np.testing.assert_allclose(y[:, :, 1], 2.0, atol=1e-15)
    np.testing.assert_allclose(y[:, :, 2], 6.0, atol=1e-15)
    np.testing.assert_allclose(y[:, :, 3], 14.0, atol=1e-15)
    expected = ms_block_loops(x, *(np.full((3, 3, 1, 1), 0.5) for _ in range(3)))
    np.testing.assert_allclose(y, expected, atol=1e-12)


def test_ms_block_matches_loop_oracle_random():
    rng = np.random.default_rng(2)
    p = MSBlockParams.create(8, rng)
    for _, t in p.tensors():
        t.data[...] = rng.standard_normal(t.shape)
    x = rng.standard_normal((5, 4, 8))
    got = ms_block_forward(Tensor(x), p).data
    expected = ms_block_loops(x, p.c1.data, p.c2.data, p.c3.data,
                              p.b1.data, p.b2.data, p.b3.data)
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_ms_block_rejects_indivisible_channels():
    rng = np.random.default_rng(3)
    p = MSBlockParams.create(4, rng)
    with pytest.raises(T.ShapeError):
        ms_block_forward(Tensor(np.zeros((3, 3, 6))), p)


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def test_covariance_constant_input_is_zero():
    x = Tensor(np.full((3, 5, 4), 2.5))
    np.testing.assert_array_equal(channel_covariance(x).data, np.zeros((4, 4)))


def test_covariance_single_pixel_is_zero():
    x = Tensor(np.random.default_rng(4).random((1, 1, 6)))
    np.testing.assert_allclose(channel_covariance(x).data, np.zeros((6, 6)), atol=1e-15)


def test_covariance_hand_case():
    # two channels over three pixels: (1,2,3) centers to (-1,0,1), (1,1,1) to 0
    x = np.zeros((1, 3, 2))
    x[0, :, 0] = [1.0, 2.0, 3.0]
    x[0, :, 1] = [1.0, 1.0, 1.0]
    np.testing.assert_allclose(channel_covariance(Tensor(x)).data,
                               [[2.0, 0.0], [0.0, 0.0]], atol=1e-12)


def test_covariance_symmetric_and_psd():
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = Tensor(rng.standard_normal((4, 5, 6)))
        c = channel_covariance(x).data
        assert np.max(np.abs(c - c.T)) == 0.0
        eigs = np.linalg.eigvalsh(c)
        assert eigs.min() >= -1e-8 * np.trace(c)


def test_covariance_normalized_flag():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((2, 3, 4)))
    raw = channel_covariance(x, normalize=False).data
    np.testing.assert_allclose(channel_covariance(x, normalize=True).data,
                               raw / 6.0, atol=1e-12)


# ---------------------------------------------------------------------------
# second-order pooling block
# ---------------------------------------------------------------------------

def _random_sop(rng, h, w, d):
    p = SoPBlockParams.create(h, w, d, rng)
    for _, t in p.tensors():
        t.data[...] = rng.standard_normal(t.shape) * 0.3
    return p


def test_sop_weights_in_unit_interval():
    rng = np.random.default_rng(7)
    p = _random_sop(rng, 4, 5, 8)
    wd, wh, ww = sop_attention_weights(Tensor(rng.standard_normal((4, 5, 8))), p)
    for vec, n in ((wd, 8), (wh, 4), (ww, 5)):
        assert vec.shape == (n,)
        assert np.all(vec.data > 0) and np.all(vec.data < 1)


def test_sop_channel_weights_invariant_to_pixel_shuffle():
    rng = np.random.default_rng(8)
    p = _random_sop(rng, 4, 4, 8)
    x = rng.standard_normal((4, 4, 8))
    flat = x.reshape(16, 8)
    shuffled = flat[rng.permutation(16)].reshape(4, 4, 8)
    wd_a, _, _ = sop_attention_weights(Tensor(x), p)
    wd_b, _, _ = sop_attention_weights(Tensor(shuffled), p)
    np.testing.assert_allclose(wd_a.data, wd_b.data, atol=1e-10)


def test_sop_channel_weights_invariant_to_translation():
    # circular translation is a pixel permutation, so w_d must not move
    rng = np.random.default_rng(9)
    p = _random_sop(rng, 6, 6, 4)
    x = rng.standard_normal((6, 6, 4))
    rolled = np.roll(x, shift=(2, 3), axis=(0, 1))
    wd_a, _, _ = sop_attention_weights(Tensor(x), p)
    wd_b, _, _ = sop_attention_weights(Tensor(rolled), p)
    np.testing.assert_allclose(wd_a.data, wd_b.data, atol=1e-10)


def test_sop_zero_input_gives_uniform_half_weights():
    # fresh params have zero biases, so a zero input propagates zeros into the
    # gate and every weight lands exactly at sigmoid(0) = 0.5
    rng = np.random.default_rng(10)
    p = SoPBlockParams.create(3, 4, 8, rng)
    wd, wh, ww = sop_attention_weights(Tensor(np.zeros((3, 4, 8))), p)
    for vec in (wd, wh, ww):
        np.testing.assert_array_equal(vec.data, np.full(vec.shape, 0.5))


def test_sop_unit_weights_is_exactly_3x():
    rng = np.random.default_rng(11)
    p = _random_sop(rng, 4, 4, 8)
    x = rng.standard_normal((4, 4, 8))
    z = sop_block_forward(Tensor(x), p, unit_weights=True)
    assert np.array_equal(z.data, 3.0 * x)


def test_sop_zero_input_zero_output():
    rng = np.random.default_rng(12)
    p = _random_sop(rng, 3, 3, 4)
    z = sop_block_forward(Tensor(np.zeros((3, 3, 4))), p)
    np.testing.assert_array_equal(z.data, np.zeros((3, 3, 4)))


def test_sop_matches_triple_loop_oracle():
    rng = np.random.default_rng(13)
    p = _random_sop(rng, 4, 4, 8)
    x = rng.standard_normal((4, 4, 8))
    xt = Tensor(x)
    wd, wh, ww = sop_attention_weights(xt, p)
    got = sop_block_forward(xt, p).data
    expected = sop_loops(x, wd.data, wh.data, ww.data)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_sop_rejects_wrong_shape():
    rng = np.random.default_rng(14)
    p = SoPBlockParams.create(4, 4, 8, rng)
    with pytest.raises(ConfigError):
        sop_block_forward(Tensor(np.zeros((5, 4, 8))), p)


# ---------------------------------------------------------------------------
# full layer
# ---------------------------------------------------------------------------

def test_layer_shape_preserved_without_downsample():
    rng = np.random.default_rng(15)
    lp = MsopLayerParams.create(5, 7, 8, rng)
    y = msop_layer_forward(Tensor(rng.standard_normal((5, 7, 8))), lp.ms, lp.sop)
    assert y.shape == (5, 7, 8)


def test_layer_downsample_ceil_halves():
    rng = np.random.default_rng(16)
    for h, w in [(6, 6), (5, 7), (3, 4)]:
        lp = MsopLayerParams.create(h, w, 4, rng)
        y = msop_layer_forward(Tensor(rng.standard_normal((h, w, 4))), lp.ms, lp.sop,
                               downsample=True)
        assert y.shape == (-(-h // 2), -(-w // 2), 4)


def test_full_layer_gradient_check():
    rng = np.random.default_rng(17)
    lp = MsopLayerParams.create(6, 6, 8, rng)
    x = Tensor(rng.uniform(0.2, 1.0, size=(6, 6, 8)), requires_grad=True)
    proj = rng.standard_normal((6, 6, 8))
    params = [x] + [t for _, t in lp.tensors()]

    def loss():
        out = msop_layer_forward(x, lp.ms, lp.sop)
        return T.tsum(T.mul(out, Tensor(proj)))

    err = gradcheck(loss, params)
    assert err < 1e-4, f"max relative gradient error {err:.3e}"


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def small_config(**kw):
    defaults = dict(input_height=12, input_width=12, stage_widths=(4, 8),
                    layers_per_stage=1)
    defaults.update(kw)
    return ClassifierConfig(**defaults)


def test_classifier_probabilities_normalized():
    m = MsopClassifier(small_config(), seed=3)
    rng = np.random.default_rng(18)
    for _ in range(5):
        probs = classifier_forward(rng.random((12, 12, 3)), m)
        assert probs.shape == (3,)
        assert np.all(probs >= 0)
        assert abs(probs.sum() - 1.0) < 1e-6


def test_classifier_zero_head_is_uniform():
    m = MsopClassifier(small_config(), seed=4)
    m.fc_w.data[...] = 0.0
    m.fc_b.data[...] = 0.0
    probs = classifier_forward(np.random.default_rng(19).random((12, 12, 3)), m)
    np.testing.assert_allclose(probs, np.full(3, 1 / 3), atol=1e-12)


def test_classifier_deterministic_given_seed():
    a = MsopClassifier(small_config(), seed=5)
    b = MsopClassifier(small_config(), seed=5)
    img = np.random.default_rng(20).random((12, 12, 3))
    np.testing.assert_array_equal(classifier_forward(img, a), classifier_forward(img, b))


def test_classifier_rejects_wrong_channels():
    m = MsopClassifier(small_config(), seed=6)
    with pytest.raises(T.ShapeError):
        m.forward_logits(Tensor(np.zeros((12, 12, 4))))


def test_classifier_overfits_four_images():
    m = MsopClassifier(small_config(input_height=8, input_width=8, stage_widths=(8,)),
                       seed=7)
    n = 8
    images = [
        np.full((n, n, 3), 0.1),
        np.full((n, n, 3), 0.9),
        np.tile(np.linspace(0, 1, n)[:, None, None], (1, n, 3)),
        np.tile((np.arange(n) % 2)[None, :, None].astype(float), (n, 1, 3)),
    ]
    labels = [0, 1, 2, 0]
    opt = SGD(m.param_tensors(), lr=0.2, momentum=0.9)
    losses = []
    for _ in range(20):
        opt.zero_grad()
        total = 0.0
        for img, lab in zip(images, labels):
            loss = T.scale(softmax_cross_entropy(m.forward_logits(Tensor(img)), lab), 0.25)
            loss.backward()
            total += 4 * float(loss.data)
        opt.step()
        losses.append(total / 4)
    assert losses[-1] < 0.1, f"loss stuck at {losses[-1]:.3f}"


def test_reference_config_is_sixteen_layers():
    cfg = ClassifierConfig()
    assert cfg.num_layers == 16
    assert cfg.stage_widths == (16, 32, 64, 128)
    assert (cfg.input_height, cfg.input_width, cfg.input_channels) == (224, 224, 3)


def test_config_rejects_width_not_divisible_by_4():
    with pytest.raises(ConfigError):
        ClassifierConfig(stage_widths=(6, 12))
