import numpy as np
import pytest

from hictc import encoder as enc
from hictc import numeric as nm


def _cfg(**kw):
    base = dict(input_dim=3, num_layers=2, hidden_per_direction=2, dropout_rate=0.0)
    base.update(kw)
    return enc.EncoderConfig(**base)


def test_pair_frames_examples():
    rows = np.arange(8, dtype=np.float64).reshape(4, 2)
    paired = enc.pair_frames(rows)
    assert paired.shape == (2, 4)
    np.testing.assert_array_equal(paired[0], np.concatenate([rows[0], rows[1]]))
    np.testing.assert_array_equal(paired[1], np.concatenate([rows[2], rows[3]]))

    rows5 = np.arange(10, dtype=np.float64).reshape(5, 2)
    paired5 = enc.pair_frames(rows5)
    assert paired5.shape == (3, 4)
    np.testing.assert_array_equal(paired5[2], np.concatenate([rows5[4], np.zeros(2)]))

    one = enc.pair_frames(np.ones((1, 3)))
    assert one.shape == (1, 6)
    np.testing.assert_array_equal(one[0], np.array([1.0, 1, 1, 0, 0, 0]))

    for t in range(1, 12):
        assert enc.paired_length(t) == (t + 1) // 2
        assert enc.pair_frames(np.zeros((t, 2))).shape[0] == (t + 1) // 2


def test_zero_params_give_zero_output():
    layer = enc.init_layer("z", 4, 3, seed=0)
    for p in layer.parameters():
        p.data[...] = 0.0
    out = enc.bilstm_layer_forward(np.random.default_rng(0).standard_normal((6, 4)), layer)
    np.testing.assert_array_equal(out.data, np.zeros((6, 6)))


def test_single_frame_direction_swap_permutes_halves():
    layer = enc.init_layer("s", 4, 3, seed=1)
    x = np.random.default_rng(1).standard_normal((1, 4))
    out = enc.bilstm_layer_forward(x, layer).data
    swapped = enc.LstmLayerParams(fwd=layer.bwd, bwd=layer.fwd)
    out_swapped = enc.bilstm_layer_forward(x, swapped).data
    np.testing.assert_allclose(out[:, :3], out_swapped[:, 3:], atol=1e-15)
    np.testing.assert_allclose(out[:, 3:], out_swapped[:, :3], atol=1e-15)


def test_forget_bias_initialized_open():
    layer = enc.init_layer("b", 4, 3, seed=2)
    for d in (layer.fwd, layer.bwd):
        np.testing.assert_array_equal(d.b.data[3:6], np.ones(3))
        np.testing.assert_array_equal(d.b.data[:3], np.zeros(3))
        np.testing.assert_array_equal(d.b.data[6:], np.zeros(6))
        assert np.all(np.abs(d.wx.data) <= 0.05)


def test_bilstm_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    layer = enc.init_layer("g", 3, 4, seed=3)
    x = rng.standard_normal((5, 3))
    weights = rng.standard_normal((5, 8))

    def f():
        out = enc.bilstm_layer_forward(x, layer)
        return nm.sum_all(nm.mul(out, nm.constant(weights)))

    assert nm.grad_check(f, layer.parameters(), h=1e-5) <= 1e-5


def test_bilstm_input_gradient_flows():
    rng = np.random.default_rng(4)
    layer = enc.init_layer("i", 2, 3, seed=4)
    x = nm.Parameter("x", rng.standard_normal((4, 2)))
    weights = rng.standard_normal((4, 6))

    def f():
        out = enc.bilstm_layer_forward(x, layer)
        return nm.sum_all(nm.mul(out, nm.constant(weights)))

    assert nm.grad_check(f, [x], h=1e-5) <= 1e-5


def test_bilstm_shape_error():
    layer = enc.init_layer("e", 3, 2, seed=0)
    with pytest.raises(nm.ShapeError):
        enc.bilstm_layer_forward(np.zeros((4, 5)), layer)


def test_batched_forward_equals_per_utterance():
    rng = np.random.default_rng(5)
    cfg = _cfg()
    layers = enc.init_encoder(cfg, seed=7)
    utts = [rng.standard_normal((t, 3)) for t in (7, 4, 2)]
    batched = enc.encoder_forward(utts, cfg, layers, mode="eval")
    for b, u in enumerate(utts):
        solo = enc.encoder_forward(u, cfg, layers, mode="eval")
        t_b = enc.paired_length(u.shape[0])
        assert batched.lengths[b] == t_b
        for k in range(cfg.num_layers):
            np.testing.assert_allclose(
                batched.taps[k].data[:t_b, b, :], solo.taps[k].data, atol=1e-12
            )


def test_eval_forward_deterministic_and_rate_zero_matches_eval():
    rng = np.random.default_rng(6)
    cfg = _cfg(dropout_rate=0.0)
    layers = enc.init_encoder(cfg, seed=8)
    x = rng.standard_normal((6, 3))
    a = enc.encoder_forward(x, cfg, layers, mode="eval")
    b = enc.encoder_forward(x, cfg, layers, mode="eval")
    c = enc.encoder_forward(x, cfg, layers, mode="train", rng=np.random.default_rng(0))
    for k in range(cfg.num_layers):
        np.testing.assert_array_equal(a.taps[k].data, b.taps[k].data)
        np.testing.assert_array_equal(a.taps[k].data, c.taps[k].data)


def test_taps_compose_layer2_recomputation():
    rng = np.random.default_rng(7)
    cfg = _cfg()
    layers = enc.init_encoder(cfg, seed=9)
    x = rng.standard_normal((6, 3))
    taps = enc.encoder_forward(x, cfg, layers, mode="eval")
    standalone = enc.bilstm_layer_forward(taps.taps[0].data, layers[1])
    np.testing.assert_allclose(taps.taps[1].data, standalone.data, atol=1e-15)


def test_dropout_masks_recorded_and_replayable():
    rng = np.random.default_rng(8)
    cfg = _cfg(dropout_rate=0.4)
    layers = enc.init_encoder(cfg, seed=10)
    x = rng.standard_normal((5, 3))
    first = enc.encoder_forward(x, cfg, layers, mode="train", rng=np.random.default_rng(3))
    assert all(m is not None for m in first.dropout_masks)
    replay = enc.encoder_forward(
        x, cfg, layers, mode="train", dropout_masks=first.dropout_masks
    )
    for k in range(cfg.num_layers):
        np.testing.assert_array_equal(first.taps[k].data, replay.taps[k].data)
    with pytest.raises(ValueError):
        enc.encoder_forward(x, cfg, layers, mode="train")


def test_encoder_gradcheck_through_stack_with_fixed_masks():
    rng = np.random.default_rng(9)
    cfg = _cfg(dropout_rate=0.3)
    layers = enc.init_encoder(cfg, seed=11)
    x = rng.standard_normal((5, 3))
    probe = enc.encoder_forward(x, cfg, layers, mode="train", rng=np.random.default_rng(1))
    masks = probe.dropout_masks
    w1 = rng.standard_normal(probe.taps[0].shape)
    w2 = rng.standard_normal(probe.taps[1].shape)
    params = [p for layer in layers for p in layer.parameters()]

    def f():
        taps = enc.encoder_forward(x, cfg, layers, mode="train", dropout_masks=masks)
        a = nm.sum_all(nm.mul(taps.taps[0], nm.constant(w1)))
        b = nm.sum_all(nm.mul(taps.taps[1], nm.constant(w2)))
        return nm.add(a, b)

    assert nm.grad_check(f, params, h=1e-5) <= 1e-5


def test_backward_additivity_across_taps():
    rng = np.random.default_rng(10)
    cfg = _cfg()
    layers = enc.init_encoder(cfg, seed=12)
    params = [p for layer in layers for p in layer.parameters()]
    x = rng.standard_normal((6, 3))
    g1 = rng.standard_normal((3, 4))
    g2 = rng.standard_normal((3, 4))

    nm.zero_grads(params)
    taps = enc.encoder_forward(x, cfg, layers, mode="eval")
    enc.encoder_backward(taps, {1: g1, 2: g2})
    combined = [p.grad.copy() for p in params]

    nm.zero_grads(params)
    taps = enc.encoder_forward(x, cfg, layers, mode="eval")
    enc.encoder_backward(taps, {1: g1})
    only1 = [p.grad.copy() for p in params]
    nm.zero_grads(params)
    taps = enc.encoder_forward(x, cfg, layers, mode="eval")
    enc.encoder_backward(taps, {2: g2})
    only2 = [p.grad.copy() for p in params]

    for got, a, b in zip(combined, only1, only2):
        ref = a + b
        denom = np.maximum(1.0, np.abs(ref))
        assert np.max(np.abs(got - ref) / denom) <= 1e-12


def test_backward_lower_tap_leaves_upper_layers_untouched():
    rng = np.random.default_rng(11)
    cfg = _cfg(num_layers=3)
    layers = enc.init_encoder(cfg, seed=13)
    params_by_layer = [layer.parameters() for layer in layers]
    nm.zero_grads([p for group in params_by_layer for p in group])
    taps = enc.encoder_forward(rng.standard_normal((6, 3)), cfg, layers, mode="eval")
    enc.encoder_backward(taps, {2: np.ones(taps.taps[1].shape)})
    assert all(np.any(p.grad != 0) for p in params_by_layer[0])
    assert all(np.any(p.grad != 0) for p in params_by_layer[1])
    assert all(np.array_equal(p.grad, np.zeros_like(p.grad)) for p in params_by_layer[2])
