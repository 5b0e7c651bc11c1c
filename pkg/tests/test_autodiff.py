"""Gradient and tape behavior of the autodiff engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import concordrl.autodiff as ad
from oracles import LN2, SOFTMAX_123_T05, check_grads, max_rel_err, numeric_grad, softmax_ref


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# forward values


def test_softmax_matches_frozen_value():
    out = ad.softmax(ad.Tensor([1.0, 2.0, 3.0]), temperature=0.5)
    np.testing.assert_allclose(out.values, SOFTMAX_123_T05, rtol=0, atol=1e-15)


def test_softmax_rows_are_distributions():
    x = ad.Tensor(rng(1).normal(size=(4, 7)) * 50.0)
    y = ad.softmax(x).values
    assert (y > 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_shift_invariance():
    x = rng(2).normal(size=(3, 5))
    a = ad.softmax(ad.Tensor(x), temperature=0.7).values
    b = ad.softmax(ad.Tensor(x + 123.4), temperature=0.7).values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_rejects_bad_inputs():
    with pytest.raises(ad.AutodiffError):
        ad.softmax(ad.Tensor([1.0, np.inf]))
    with pytest.raises(ad.AutodiffError):
        ad.softmax(ad.Tensor([1.0, 2.0]), temperature=0.0)


def test_cross_entropy_soft_frozen_value():
    t = ad.Tensor([0.5, 0.5])
    p = ad.Tensor([0.5, 0.5])
    assert abs(ad.cross_entropy_soft(t, p).item() - LN2) < 1e-15


def test_cross_entropy_soft_handles_vanishing_predictions():
    t = ad.Tensor([[1.0, 0.0]])
    p = ad.Tensor([[0.0, 1.0]], requires_grad=True)
    loss = ad.cross_entropy_soft(t, p)
    assert np.isfinite(loss.item())
    ad.backward(loss)
    assert np.isfinite(p.grad).all()


def test_cross_entropy_soft_rejects_unnormalized_targets():
    with pytest.raises(ad.AutodiffError):
        ad.cross_entropy_soft(ad.Tensor([0.9, 0.3]), ad.Tensor([0.5, 0.5]))


def test_cross_entropy_targets_get_no_gradient():
    t = ad.Tensor([0.3, 0.7], requires_grad=True)
    p = ad.Tensor([0.4, 0.6], requires_grad=True)
    ad.backward(ad.cross_entropy_soft(t, p))
    assert np.all(t.grad == 0.0)
    assert np.any(p.grad != 0.0)


# ---------------------------------------------------------------------------
# tape mechanics


def test_grads_accumulate_until_cleared():
    x = ad.Tensor([2.0], requires_grad=True)
    ad.backward((x * 3.0).sum())
    ad.backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, [6.0])
    x.zero_grad()
    np.testing.assert_allclose(x.grad, [0.0])


def test_second_backward_on_same_tape_rejected():
    x = ad.Tensor([1.0], requires_grad=True)
    loss = (x * x).sum()
    ad.backward(loss)
    with pytest.raises(ad.AutodiffError):
        ad.backward(loss)


def test_non_scalar_loss_rejected():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        ad.backward(x * 2.0)


def test_backward_frees_tape():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    mid = x * 3.0
    loss = mid.sum()
    assert mid.on_tape and loss.on_tape
    ad.backward(loss)
    assert not mid.on_tape and not loss.on_tape


def test_no_grad_blocks_recording():
    x = ad.Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 5.0
    assert not y.on_tape
    assert ad.grad_enabled()


def test_diamond_graph_accumulates_through_shared_node():
    # loss = sum(y + y*y) with y = 2x: dloss/dx = 2 + 8x
    x = ad.Tensor([3.0], requires_grad=True)
    y = x * 2.0
    ad.backward((y + y * y).sum())
    np.testing.assert_allclose(x.grad, [2.0 + 8.0 * 3.0])


def test_non_finite_gradient_rejected():
    x = ad.Tensor([0.0], requires_grad=True)
    with np.errstate(divide="ignore"):
        loss = ad.log(x).sum()  # d/dx log(0) -> inf
        with pytest.raises(ad.AutodiffError):
            ad.backward(loss)


# ---------------------------------------------------------------------------
# gradients vs central finite differences (rel err < 1e-4, h = 1e-5)


def test_fd_elementwise_chain():
    x = ad.Tensor(rng(3).normal(size=(4, 3)), requires_grad=True)
    check_grads(lambda: (ad.tanh(x) * ad.exp(x * 0.3) + ad.square(x)).sum(), [x])


def test_fd_matmul_bias_broadcast():
    w = ad.Tensor(rng(4).normal(size=(3, 5)), requires_grad=True)
    b = ad.Tensor(rng(5).normal(size=5), requires_grad=True)
    x = ad.Tensor(rng(6).normal(size=(7, 3)))
    check_grads(lambda: ad.square(x @ w + b).sum(), [w, b])


def test_fd_batched_matmul():
    a = ad.Tensor(rng(7).normal(size=(2, 3, 4)), requires_grad=True)
    b = ad.Tensor(rng(8).normal(size=(2, 4, 5)), requires_grad=True)
    check_grads(lambda: ad.square(a @ b).mean(), [a, b])


def test_fd_softmax_temperature():
    x = ad.Tensor(rng(9).normal(size=(3, 6)), requires_grad=True)
    probe = ad.Tensor(rng(10).normal(size=(3, 6)))
    check_grads(lambda: (ad.softmax(x, temperature=0.25) * probe).sum(), [x])


def test_fd_safe_log_above_floor():
    x = ad.Tensor(np.abs(rng(11).normal(size=8)) + 0.5, requires_grad=True)
    check_grads(lambda: ad.safe_log(x).sum(), [x])


def test_fd_mean_reshape_transpose_concat():
    x = ad.Tensor(rng(12).normal(size=(2, 6)), requires_grad=True)
    y = ad.Tensor(rng(13).normal(size=(2, 6)), requires_grad=True)

    def loss():
        stacked = ad.concat([x, y], axis=0)  # (4, 6)
        t = ad.transpose(ad.reshape(stacked, (4, 3, 2)), (1, 0, 2))
        return ad.square(t).mean()

    check_grads(loss, [x, y])


def test_fd_gather_rows_scatter_adds():
    table = ad.Tensor(rng(14).normal(size=(5, 3)), requires_grad=True)
    idx = np.array([0, 2, 2, 4])
    check_grads(lambda: ad.square(ad.gather_rows(table, idx)).sum(), [table])


def test_fd_take_per_row():
    x = ad.Tensor(rng(15).normal(size=(4, 6)), requires_grad=True)
    idx = np.array([1, 0, 5, 3])
    check_grads(lambda: ad.square(ad.take_per_row(x, idx)).sum(), [x])


def test_fd_cross_entropy_soft():
    logits = ad.Tensor(rng(16).normal(size=(3, 4)), requires_grad=True)
    targets = softmax_ref(rng(17).normal(size=(3, 4)))
    check_grads(
        lambda: ad.cross_entropy_soft(ad.Tensor(targets), ad.softmax(logits)), [logits]
    )


def test_fd_mlp_forward():
    spec = ad.MlpSpec(sizes=(4, 8, 3), activation="tanh", prefix="net")
    params = ad.ParameterSet()
    ad.init_mlp(params, spec, rng(18))
    x = ad.Tensor(rng(19).normal(size=(5, 4)))
    leaves = [params[n] for n in params.names()]
    check_grads(lambda: ad.square(ad.mlp_forward(params, x, spec)).sum(), leaves)


def test_fd_multi_head_attention():
    params = ad.ParameterSet()
    ad.init_attention(params, dim=8, heads=2, rng=rng(20))
    tokens = ad.Tensor(rng(21).normal(size=(3, 8)), requires_grad=True)
    leaves = [params[n] for n in params.names()] + [tokens]
    check_grads(
        lambda: ad.square(ad.multi_head_attention(params, tokens, heads=2)).sum(),
        leaves,
    )


# ---------------------------------------------------------------------------
# attention semantics


def test_attention_single_token_equals_value_projection():
    params = ad.ParameterSet()
    ad.init_attention(params, dim=8, heads=4, rng=rng(22))
    token = rng(23).normal(size=(1, 8))
    out = ad.multi_head_attention(params, ad.Tensor(token), heads=4)
    np.testing.assert_allclose(out.values, token @ params["attn/wv"].values, atol=1e-12)


def test_attention_weights_sum_to_one_per_head():
    params = ad.ParameterSet()
    ad.init_attention(params, dim=12, heads=3, rng=rng(24))
    tokens = ad.Tensor(rng(25).normal(size=(2, 5, 12)))
    _, w = ad.multi_head_attention(params, tokens, heads=3, return_weights=True)
    assert w.shape == (2, 3, 5, 5)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)


def test_attention_rejects_indivisible_heads():
    params = ad.ParameterSet()
    with pytest.raises(ad.AutodiffError):
        ad.init_attention(params, dim=10, heads=4, rng=rng(26))


def test_attention_batched_matches_per_item():
    params = ad.ParameterSet()
    ad.init_attention(params, dim=8, heads=2, rng=rng(27))
    batch = rng(28).normal(size=(3, 4, 8))
    full = ad.multi_head_attention(params, ad.Tensor(batch), heads=2).values
    for b in range(3):
        single = ad.multi_head_attention(params, ad.Tensor(batch[b]), heads=2).values
        np.testing.assert_allclose(full[b], single, atol=1e-12)


# ---------------------------------------------------------------------------
# mlp plumbing


def test_mlp_forward_rejects_wrong_input_width():
    spec = ad.MlpSpec(sizes=(4, 3), prefix="pol")
    params = ad.ParameterSet()
    ad.init_mlp(params, spec, rng(29))
    with pytest.raises(ad.AutodiffError, match="pol"):
        ad.mlp_forward(params, ad.Tensor(np.zeros((2, 5))), spec)


def test_mlp_spec_validation():
    with pytest.raises(ad.AutodiffError):
        ad.MlpSpec(sizes=(4,))
    with pytest.raises(ad.AutodiffError):
        ad.MlpSpec(sizes=(4, 0))
    with pytest.raises(ad.AutodiffError):
        ad.MlpSpec(sizes=(4, 3), activation="gelu")


def test_parameter_set_names_sorted_and_unique():
    params = ad.ParameterSet()
    params.add("b", np.zeros(2))
    params.add("a", np.ones(2))
    assert params.names() == ["a", "b"]
    with pytest.raises(ad.AutodiffError):
        params.add("a", np.zeros(2))
    with pytest.raises(ad.AutodiffError, match="missing"):
        params["missing"]


# ---------------------------------------------------------------------------
# property-based checks (also exercised in bulk by the acceptance suite)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_property_softmax_distribution(logits):
    y = ad.softmax(ad.Tensor(logits)).values
    assert abs(y.sum() - 1.0) < 1e-9
    assert (y >= 0).all()


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.integers(1, 4),
    st.integers(1, 5),
)
def test_property_linear_grad_exact(seed, n, m):
    # loss = sum(x * c) has gradient exactly c regardless of values
    r = np.random.default_rng(seed)
    c = r.normal(size=(n, m))
    x = ad.Tensor(r.normal(size=(n, m)), requires_grad=True)
    ad.backward((x * c).sum())
    np.testing.assert_allclose(x.grad, c, atol=1e-12)
