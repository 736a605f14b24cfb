import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import gelu, sigmoid, softmax
from deshadow.gmft import (
    BMT,
    DGFN,
    GMFT,
    AttentionParams,
    BmtParams,
    DgfnParams,
    GiaParams,
    attention_matrix,
    bmt_block,
    channel_attention,
    dgfn,
    gia_block,
    gmft_forward,
    res_block,
    self_attention,
    simple_gate,
)
from deshadow.gradcheck import check_gradients, randomize

D = torch.float64


def t64(a):
    return torch.tensor(np.asarray(a, dtype=np.float64))


def proj(w, b=None):
    w = t64(w)
    return (w, torch.zeros(w.shape[0], dtype=D) if b is None else t64(b))


def zero_attention(width, heads=1):
    z = (torch.zeros(width, width, dtype=D), torch.zeros(width, dtype=D))
    return AttentionParams(z, z, z, z, heads)


# ResBlock


def test_res_block_zero_weights_is_identity():
    x = torch.randn(1, 3, 5, 7, dtype=D)
    w = torch.zeros(3, 3, 3, 3, dtype=D)
    b = torch.zeros(3, dtype=D)
    assert torch.equal(res_block(x, w, b, w, b), x)


def test_res_block_scalar_oracle():
    x = np.array([[[0.5, -1.0], [2.0, 0.0]], [[1.5, 0.25], [-0.5, 1.0]]])
    w1 = np.array([[0.3, -0.2], [0.7, 0.1]])
    b1 = np.array([0.05, -0.1])
    w2 = np.array([[1.0, 0.5], [-0.4, 0.2]])
    b2 = np.array([0.0, 0.3])
    hidden = gelu(np.einsum("oc,chw->ohw", w1, x) + b1[:, None, None])
    expected = x + np.einsum("oc,chw->ohw", w2, hidden) + b2[:, None, None]
    out = res_block(t64(x)[None], t64(w1), t64(b1), t64(w2), t64(b2))
    np.testing.assert_allclose(out[0].numpy(), expected, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9))
def test_res_block_preserves_shape(h, w):
    x = torch.randn(1, 2, h, w)
    k = torch.randn(2, 2, 3, 3)
    assert res_block(x, k, torch.zeros(2), k, torch.zeros(2)).shape == x.shape


def test_res_block_shape_mismatch():
    with pytest.raises(RuntimeError):
        res_block(torch.randn(1, 2, 4, 4), torch.randn(3, 3, 3, 3), torch.zeros(3), torch.randn(3, 3, 3, 3), torch.zeros(3))


# GIA


def test_gia_zero_gate_halves_input():
    x = torch.randn(1, 4, 3, 3, dtype=D)
    out = gia_block(x, GiaParams(torch.zeros(4, 4, dtype=D), torch.zeros(4, dtype=D)))
    assert torch.equal(out, x / 2)


def test_gia_zero_input_gives_bias():
    x = torch.zeros(1, 3, 2, 2, dtype=D)
    b = t64([0.1, -0.2, 0.3])
    out = gia_block(x, GiaParams(torch.randn(3, 3, dtype=D), b))
    assert torch.equal(out, b[None, :, None, None].expand_as(x))


def test_gia_scalar():
    out = gia_block(t64([[[[1.0]]]]), GiaParams(t64([[2.0]]), t64([0.3])))
    assert out.item() == pytest.approx(1 / (1 + math.exp(-2)) + 0.3, abs=1e-12)
    assert out.item() == pytest.approx(1.1807970779778823, abs=1e-12)


def test_gia_channel_mismatch():
    with pytest.raises(ValueError):
        gia_block(torch.randn(1, 3, 2, 2), GiaParams(torch.zeros(4, 4), torch.zeros(4)))


# SimpleGate


def test_simple_gate_example():
    out = simple_gate(t64([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
    assert out.flatten().tolist() == [3.0, 8.0]


def test_simple_gate_identities():
    a = torch.randn(1, 3, 4, 4)
    assert torch.equal(simple_gate(torch.cat([a, torch.ones_like(a)], 1)), a)
    assert torch.all(simple_gate(torch.cat([torch.zeros_like(a), a], 1)) == 0)


def test_simple_gate_odd_channels():
    with pytest.raises(ValueError):
        simple_gate(torch.randn(1, 3, 2, 2))


# channel attention


def test_channel_attention_unit_scale_is_identity():
    x = torch.randn(1, 3, 4, 4, dtype=D)
    assert torch.equal(channel_attention(x, torch.zeros(3, 3, dtype=D), torch.ones(3, dtype=D)), x)


def test_channel_attention_constant_plane():
    x = torch.full((1, 2, 3, 3), 2.0, dtype=D)
    w = t64([[0.5, 0.0], [0.0, -1.0]])
    out = channel_attention(x, w, t64([0.0, 0.0]))
    np.testing.assert_allclose(out[0, 0].numpy(), 2.0 * 1.0)
    np.testing.assert_allclose(out[0, 1].numpy(), 2.0 * -2.0)


def test_channel_attention_oracle():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]], [[-1.0, 0.0], [0.5, 0.5]]])
    w = np.array([[0.2, -0.3], [0.4, 0.1]])
    b = np.array([1.0, 0.5])
    pooled = x.reshape(2, -1).mean(1)
    expected = x * (w @ pooled + b)[:, None, None]
    out = channel_attention(t64(x)[None], t64(w), t64(b))
    np.testing.assert_allclose(out[0].numpy(), expected, atol=1e-12)


def test_channel_attention_shape_mismatch():
    with pytest.raises(ValueError):
        channel_attention(torch.randn(1, 3, 2, 2), torch.zeros(2, 2), torch.ones(2))


# self-attention


def random_attention(width, heads, gen=None):
    g = torch.Generator().manual_seed(7) if gen is None else gen
    mats = [(torch.randn(width, width, generator=g, dtype=D), torch.randn(width, generator=g, dtype=D)) for _ in range(4)]
    return AttentionParams(*mats, heads)


def attention_oracle(x, p):
    """Direct per-head evaluation on numpy arrays (N x D tokens)."""
    q, k, v = (x @ w.numpy().T + b.numpy() for w, b in (p.q_proj, p.k_proj, p.v_proj))
    dk = p.d_k
    heads = []
    for h in range(p.heads):
        s = slice(h * dk, (h + 1) * dk)
        a = softmax(q[:, s] @ k[:, s].T / math.sqrt(dk))
        heads.append(a @ v[:, s])
    w, b = p.out_proj
    return np.concatenate(heads, 1) @ w.numpy().T + b.numpy()


def test_self_attention_singleton_token():
    p = random_attention(4, 2)
    x = torch.randn(1, 1, 4, dtype=D)
    vx = torch.nn.functional.linear(x, *p.v_proj)
    np.testing.assert_allclose(self_attention(x, p).numpy(), torch.nn.functional.linear(vx, *p.out_proj).numpy(), atol=1e-12)


def test_self_attention_identical_keys_average_values():
    p = random_attention(4, 2)
    p = AttentionParams(p.q_proj, (torch.zeros(4, 4, dtype=D), torch.randn(4, dtype=D)), p.v_proj, p.out_proj, 2)
    x = torch.randn(1, 5, 4, dtype=D)
    mean_v = torch.nn.functional.linear(x, *p.v_proj).mean(1, keepdim=True)
    expected = torch.nn.functional.linear(mean_v, *p.out_proj).expand(1, 5, 4)
    np.testing.assert_allclose(self_attention(x, p).numpy(), expected.numpy(), atol=1e-12)


def test_self_attention_scalar_oracle():
    # N=2 tokens, d_k=1
    x = np.array([[1.0], [-2.0]])
    p = AttentionParams(proj([[0.5]]), proj([[1.5]]), proj([[2.0]], [0.1]), proj([[1.0]]), 1)
    q, k, v = 0.5 * x[:, 0], 1.5 * x[:, 0], 2.0 * x[:, 0] + 0.1
    expected = []
    for i in range(2):
        s = np.exp(q[i] * k)
        expected.append((s * v).sum() / s.sum())
    out = self_attention(t64(x), p)
    np.testing.assert_allclose(out[:, 0].numpy(), expected, atol=1e-12)


def test_self_attention_matches_oracle_multihead():
    p = random_attention(6, 3)
    x = np.random.default_rng(1).normal(size=(7, 6))
    np.testing.assert_allclose(self_attention(t64(x), p).numpy(), attention_oracle(x, p), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 2**16))
def test_attention_rows_are_distributions(n, d, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(n, d, generator=g) * 5
    k = torch.randn(n, d, generator=g) * 5
    a = attention_matrix(q, k)
    assert torch.all(a >= 0)
    torch.testing.assert_close(a.sum(-1), torch.ones(n), rtol=0, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**16))
def test_self_attention_permutation_equivariant(n, seed):
    g = torch.Generator().manual_seed(seed)
    p = random_attention(4, 2, g)
    x = torch.randn(1, n, 4, generator=g, dtype=D)
    perm = torch.randperm(n, generator=g)
    torch.testing.assert_close(self_attention(x[:, perm], p), self_attention(x, p)[:, perm], rtol=0, atol=1e-10)


def test_self_attention_width_errors():
    with pytest.raises(ValueError):
        self_attention(torch.randn(1, 3, 5, dtype=D), random_attention(4, 2))
    with pytest.raises(ValueError):
        self_attention(torch.randn(1, 3, 4, dtype=D), random_attention(4, 3))


# BMT


def test_bmt_zero_projections_is_identity():
    x = torch.randn(1, 4, 5, 5, dtype=D)
    norm = (torch.ones(4, dtype=D), torch.zeros(4, dtype=D))
    p = BmtParams(norm, zero_attention(4, 2), norm, zero_attention(4, 2), torch.ones(2, dtype=D), window=None)
    assert torch.equal(bmt_block(x, p), x)


def _layer_norm(x, eps=1e-5):
    # x: C x N
    mu = x.mean(0)
    var = ((x - mu) ** 2).mean(0)
    return (x - mu) / np.sqrt(var + eps)


def test_bmt_composition_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 2))  # C x H x W
    spatial = random_attention(2, 1, torch.Generator().manual_seed(11))
    channel = random_attention(2, 1, torch.Generator().manual_seed(12))
    temp = 1.7
    norm = (torch.ones(2, dtype=D), torch.zeros(2, dtype=D))
    p = BmtParams(norm, spatial, norm, channel, t64([temp]))

    # pixel tokens: 4 tokens of width 2
    tokens = x.reshape(2, 4)
    y = tokens + attention_oracle(_layer_norm(tokens).T, spatial).T
    # channel tokens: 2 tokens whose features are the 4 pixel values
    z = _layer_norm(y)
    q, k, v = (w.numpy() @ z + b.numpy()[:, None] for w, b in (channel.q_proj, channel.k_proj, channel.v_proj))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    k = k / np.linalg.norm(k, axis=1, keepdims=True)
    mixed = softmax(q @ k.T * temp) @ v
    w, b = channel.out_proj
    expected = y + w.numpy() @ mixed + b.numpy()[:, None]

    out = bmt_block(t64(x)[None], p)
    np.testing.assert_allclose(out[0].reshape(2, 4).numpy(), expected, atol=1e-10)


@pytest.mark.parametrize("window", [None, 2, 3, 8])
def test_bmt_preserves_shape(window):
    block = BMT(8, 4)
    x = torch.randn(1, 8, 5, 7)
    assert block(x, window).shape == x.shape


def test_bmt_window_covering_band_equals_global():
    block = randomize(BMT(4, 2), torch.Generator().manual_seed(0)).double()
    x = torch.randn(1, 4, 6, 6, dtype=D)
    torch.testing.assert_close(block(x, 6), block(x, None), rtol=0, atol=1e-12)


# DGFN


def dgfn_params(c, hidden, w1=0.0, b1=0.0, w2=0.0, b2=0.0, wg=0.0, bg=0.0):
    full = lambda v, *s: torch.full(s, float(v), dtype=D)  # noqa: E731
    return DgfnParams(full(w1, hidden, c), full(b1, hidden), full(w2, c, hidden), full(b2, c), full(wg, hidden, c), full(bg, hidden))


def test_dgfn_zero_params_identity():
    x = torch.randn(1, 3, 4, 4, dtype=D)
    assert torch.equal(dgfn(x, dgfn_params(3, 6)), x)


def test_dgfn_scalar():
    out = dgfn(t64([[[[1.0]]]]), dgfn_params(1, 1, w1=1.0, w2=1.0, bg=10.0))
    assert out.item() - 1.0 == pytest.approx(sigmoid(10.0), abs=1e-12)
    assert out.item() - 1.0 == pytest.approx(1.0, abs=1e-4)


def test_dgfn_negative_preactivation_gives_bias():
    x = torch.rand(1, 2, 3, 3, dtype=D)
    out = dgfn(x, dgfn_params(2, 4, w1=1.0, b1=-10.0, w2=3.0, b2=0.25, wg=0.5))
    torch.testing.assert_close(out - x, torch.full_like(x, 0.25), rtol=0, atol=1e-15)


def test_dgfn_matches_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 2, 2))
    w1, wg = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    w2 = rng.normal(size=(3, 6))
    b1, bg, b2 = rng.normal(size=6), rng.normal(size=6), rng.normal(size=3)
    lin = lambda w, b: np.einsum("oc,chw->ohw", w, x) + b[:, None, None]  # noqa: E731
    hidden = np.maximum(lin(w1, b1), 0) * sigmoid(lin(wg, bg))
    expected = x + np.einsum("oc,chw->ohw", w2, hidden) + b2[:, None, None]
    p = DgfnParams(t64(w1), t64(b1), t64(w2), t64(b2), t64(wg), t64(bg))
    np.testing.assert_allclose(dgfn(t64(x)[None], p)[0].numpy(), expected, atol=1e-12)


def test_dgfn_errors():
    with pytest.raises(ValueError):
        dgfn(torch.randn(1, 2, 2, 2, dtype=D), dgfn_params(3, 6))
    with pytest.raises(ValueError):
        DGFN(4, expansion=0)


# full GMFT


def test_gmft_zero_head_is_exact_identity():
    net = GMFT(3, 8, 2, 2)
    torch.nn.init.zeros_(net.head.weight)
    torch.nn.init.zeros_(net.head.bias)
    band = torch.randn(1, 3, 12, 10)
    assert torch.equal(net(band), band)


def test_gmft_zero_band_stays_within_head_bias():
    net = GMFT(1, 8, 2, 2)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.fill_(0.01)
    out = net(torch.zeros(1, 1, 8, 8))
    assert torch.all(out.abs() <= 0.01 + 1e-7)


def test_gmft_forward_matches_module():
    net = randomize(GMFT(1, 8, 2, 2), torch.Generator().manual_seed(2)).double()
    band = torch.randn(1, 1, 8, 8, dtype=D)
    out = gmft_forward(band, dict(net.named_parameters()), heads=2)
    torch.testing.assert_close(out, net(band), rtol=0, atol=1e-12)


def test_gmft_attention_window_policy():
    net = GMFT(3, 8, heads=2, max_global_tokens=64)
    assert net.attention_window(8, 8) is None
    assert net.attention_window(9, 8) == 8
    assert GMFT(3, 8, heads=2, window=4).attention_window(2, 2) == 4


def test_gmft_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(4)
    net = randomize(GMFT(1, 4, 2, 2), gen).double()
    band = torch.rand(1, 1, 8, 8, generator=gen, dtype=D) - 0.5
    r = torch.randn(1, 1, 8, 8, generator=gen, dtype=D)
    params = dict(net.named_parameters())
    f = lambda: (gmft_forward(band, params, heads=2) * r).sum()  # noqa: E731
    res = check_gradients("gmft", f, {"band": band, **params}, np.random.default_rng(0), samples=4)
    assert res.passed, res
