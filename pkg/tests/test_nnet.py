import io

import numpy as np
import pytest

from equirepair.nnet import (
    Adam,
    Dense,
    DimensionMismatchError,
    EncoderConfig,
    EncoderLayer,
    LayerNorm,
    MultiHeadSelfAttention,
    NonScalarLossError,
    SGD,
    SetEncoder,
    Tensor,
    assign_params,
    cat,
    encode_set,
    load_params,
    log_softmax,
    polyak_update,
    save_params,
    sgd_step,
    softmax,
    softmax_np,
    zero_grads,
)


def fd_grad(loss_fn, param, h=1e-4):
    """Central finite differences of loss_fn() w.r.t. param.data."""
    g = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-10, np.max(np.abs(b)))


def check_param_grads(build_loss, params, tol=1e-6):
    zero_grads(params)
    loss = build_loss()
    loss.backward()
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = fd_grad(lambda: float(build_loss().data), p)
        assert rel_err(analytic, numeric) < tol, rel_err(analytic, numeric)


def test_sum_of_squares_gradient():
    w = Tensor(np.array([1.0, -2.0, 3.0]))
    loss = (w * w).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, 2 * w.data)


def test_detached_parameter_gets_no_gradient():
    w = Tensor(np.ones(3))
    unused = Tensor(np.ones(3))
    loss = (w * w).sum()
    loss.backward()
    assert unused.grad is None


def test_non_scalar_loss_rejected():
    w = Tensor(np.ones(3))
    with pytest.raises(NonScalarLossError):
        (w * w).backward()


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


@pytest.mark.parametrize("shape", [(3,), (2, 4), (2, 3, 4)])
def test_elementwise_op_gradients(shape):
    rng = np.random.default_rng(hash(shape) % 2**32)
    x = Tensor(rng.uniform(0.5, 2.0, size=shape))
    y = Tensor(rng.uniform(0.5, 2.0, size=shape))

    def build():
        return ((x * y + x / y - y).tanh().exp() + x.log()).sum()

    check_param_grads(build, [x, y])


def test_matmul_broadcast_gradients():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 5)))

    def build():
        return ((a @ w) * (a @ w)).sum()

    check_param_grads(build, [a, w])


def test_getitem_and_cat_gradients():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(4, 3)))
    y = Tensor(rng.normal(size=(2, 3)))

    def build():
        z = cat([x, y], axis=0)
        return (z[1:4] * z[1:4]).sum() + z[:, 1].sum()

    check_param_grads(build, [x, y])


def test_softmax_properties():
    rng = np.random.default_rng(2)
    for _ in range(20):
        logits = rng.normal(size=(3, 6)) * 5
        p = softmax(Tensor(logits)).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(p >= 0)
        shifted = softmax(Tensor(logits + rng.uniform(-100, 100))).data
        np.testing.assert_allclose(shifted, p, atol=1e-9)
        np.testing.assert_allclose(softmax_np(logits), p, atol=1e-15)


def test_masked_softmax_zeroes_invalid():
    logits = np.zeros((1, 4))
    mask = np.array([[True, True, False, True]])
    p = softmax(Tensor(logits), mask=mask).data
    assert p[0, 2] == pytest.approx(0.0, abs=1e-30)
    np.testing.assert_allclose(p.sum(), 1.0, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(2, 5))
    ls = log_softmax(Tensor(logits)).data
    np.testing.assert_allclose(ls, np.log(softmax_np(logits)), atol=1e-12)


@pytest.mark.parametrize("layer_kind", ["dense", "layernorm", "attention", "encoder_layer"])
def test_layer_gradients_match_finite_differences(layer_kind):
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    if layer_kind == "dense":
        layer, out_dim = Dense(8, 6, rng), 6
    elif layer_kind == "layernorm":
        layer, out_dim = LayerNorm(8), 8
    elif layer_kind == "attention":
        layer, out_dim = MultiHeadSelfAttention(8, 2, rng), 8
    else:
        layer, out_dim = EncoderLayer(8, 2, 12, rng), 8
    # random projections keep the loss sensitive to every coordinate
    c1 = Tensor(rng.normal(size=(2, 5, out_dim)))
    c2 = Tensor(rng.normal(size=(2, 5, out_dim)))

    def build():
        z = layer(x)
        return (z * c1).sum() + (z * z * c2).sum()

    params = [x] + [p for _, p in layer.named_params("l")]
    check_param_grads(build, params, tol=2e-6)


def test_encoder_gradcheck_small():
    rng = np.random.default_rng(5)
    enc = SetEncoder(EncoderConfig(input_dim=4, model_dim=8, n_heads=2, n_layers=1, feedforward_dim=8), seed=1)
    tokens = Tensor(rng.normal(size=(1, 3, 4)))
    c_cls = Tensor(rng.normal(size=(1, 8)))
    c_tok = Tensor(rng.normal(size=(1, 3, 8)))

    def build():
        cls, toks = enc.encode(tokens)
        return (cls * c_cls).sum() + (toks * c_tok).sum()

    params = [tokens] + [p for _, p in enc.named_params()]
    check_param_grads(build, params, tol=2e-6)


def test_encoder_permutation_equivariance():
    rng = np.random.default_rng(6)
    enc = SetEncoder(EncoderConfig(input_dim=5), seed=3)
    tokens = rng.normal(size=(1, 7, 5))
    cls, toks = enc.encode_np(tokens)
    perm = rng.permutation(7)
    cls_p, toks_p = enc.encode_np(tokens[:, perm])
    np.testing.assert_allclose(cls_p, cls, atol=1e-6)
    np.testing.assert_allclose(toks_p, toks[:, perm], atol=1e-6)


def test_encoder_single_token():
    enc = SetEncoder(EncoderConfig(input_dim=5), seed=3)
    cls, toks = enc.encode_np(np.random.default_rng(0).normal(size=(1, 1, 5)))
    assert cls.shape == (1, enc.cfg.model_dim)
    assert toks.shape == (1, 1, enc.cfg.model_dim)


def test_encoder_wrong_width():
    enc = SetEncoder(EncoderConfig(input_dim=5), seed=3)
    with pytest.raises(DimensionMismatchError):
        enc.encode_np(np.zeros((1, 3, 4)))
    with pytest.raises(DimensionMismatchError):
        enc.encode_np(np.zeros((1, 0, 5)))


def test_encoder_graph_matches_numpy_path():
    rng = np.random.default_rng(7)
    enc = SetEncoder(EncoderConfig(input_dim=6, model_dim=16, n_heads=4, n_layers=2, feedforward_dim=24), seed=9)
    tokens = rng.normal(size=(3, 5, 6))
    mask = rng.uniform(size=(3, 5)) > 0.3
    mask[:, 0] = True
    cls_g, toks_g = enc.encode(Tensor(tokens), mask=mask)
    cls_n, toks_n = enc.encode_np(tokens, mask=mask)
    np.testing.assert_allclose(cls_g.data, cls_n, atol=1e-12)
    np.testing.assert_allclose(toks_g.data, toks_n, atol=1e-12)


def test_encode_set_wrapper():
    enc = SetEncoder(EncoderConfig(input_dim=5), seed=3)
    cls, toks = encode_set(enc, np.zeros((4, 5)))
    assert cls.shape == (enc.cfg.model_dim,)
    assert toks.shape == (4, enc.cfg.model_dim)
    with pytest.raises(DimensionMismatchError):
        encode_set(enc, np.zeros((4, 3, 5)))


def test_sgd_step_and_polyak_examples():
    p = Tensor(np.array([1.0, 2.0]))
    sgd_step([p], [np.array([0.5, 0.5])], lr=0.0)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    sgd_step([p], [np.array([0.5, 0.5])], lr=1.0)
    np.testing.assert_array_equal(p.data, [0.5, 1.5])
    with pytest.raises(DimensionMismatchError):
        sgd_step([p], [np.zeros(3)], lr=0.1)

    target, online = Tensor(np.zeros(3)), Tensor(np.ones(3))
    polyak_update([target], [online], tau=0.0)
    np.testing.assert_array_equal(target.data, np.zeros(3))
    polyak_update([target], [online], tau=1.0)
    np.testing.assert_array_equal(target.data, np.ones(3))
    polyak_update([target], [Tensor(np.zeros(3))], tau=0.25)
    np.testing.assert_allclose(target.data, 0.75 * np.ones(3))


def test_sgd_optimizer_descends():
    w = Tensor(np.array([3.0]))
    opt = SGD([w], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        loss = (w * w).sum()
        loss.backward()
        opt.step()
    assert abs(w.data[0]) < 1e-4


def test_adam_optimizer_descends():
    rng = np.random.default_rng(8)
    w = Tensor(rng.normal(size=(4,)))
    opt = Adam([w], lr=0.05)
    for _ in range(300):
        opt.zero_grad()
        loss = ((w - 2.0) * (w - 2.0)).sum()
        loss.backward()
        opt.step()
    np.testing.assert_allclose(w.data, 2.0, atol=1e-3)


def test_param_checkpoint_round_trip_bit_exact():
    enc = SetEncoder(EncoderConfig(input_dim=5), seed=11)
    named = dict(enc.named_params())
    buf = io.BytesIO()
    save_params(buf, named)
    buf.seek(0)
    loaded = load_params(buf)
    assert set(loaded) == set(named)
    for name, tensor in named.items():
        assert np.array_equal(loaded[name], tensor.data)
    enc2 = SetEncoder(EncoderConfig(input_dim=5), seed=999)
    assign_params(dict(enc2.named_params()), loaded)
    tokens = np.random.default_rng(1).normal(size=(1, 3, 5))
    np.testing.assert_array_equal(enc2.encode_np(tokens)[0], enc.encode_np(tokens)[0])


def test_seeded_init_deterministic():
    a = SetEncoder(EncoderConfig(input_dim=5), seed=4)
    b = SetEncoder(EncoderConfig(input_dim=5), seed=4)
    for (na, pa), (nb, pb) in zip(a.named_params(), b.named_params()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data)
