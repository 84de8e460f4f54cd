import numpy as np
import pytest

from ctxseg import tensor as T
from ctxseg.backbone import FeatureMap
from ctxseg.fusion import CrossAttention, FusionConfig, attention_weights, cross_attention, scaled_logits
from ctxseg.gradcheck import gradcheck
from ctxseg.rng import make_rng
from ctxseg.tensor import Tensor, tensor


def layer(width=8, emb=6, heads=2, residual=True, seed=0):
    return CrossAttention(width, emb, FusionConfig(heads=heads, residual=residual), make_rng(seed), np.float64)


def fmap(rng, b=2, h=3, w=4, c=8):
    return FeatureMap(tensor(rng.normal(size=(b, h, w, c))))


def test_single_label_gets_all_weight(rng):
    ca = layer(residual=False)
    f = fmap(rng)
    emb = tensor(rng.normal(size=(1, 6)))
    w = attention_weights(f, emb, ca).data
    assert np.array_equal(w, np.ones_like(w))
    v = emb.data @ ca.v.weight.data + ca.v.bias.data
    expected = v[0] @ ca.out.weight.data + ca.out.bias.data
    out = cross_attention(f, emb, ca).values.data
    assert np.allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)


def test_identical_keys_give_uniform_weights(rng):
    ca = layer()
    emb = tensor(np.tile(rng.normal(size=(1, 6)), (5, 1)))
    w = ca.attention_weights(fmap(rng), emb).data
    assert np.allclose(w, 0.2, atol=1e-15)


def test_weights_normalised(rng):
    ca = layer(heads=4)
    w = ca.attention_weights(fmap(rng), tensor(rng.normal(size=(7, 6)))).data
    assert w.shape == (2, 3, 4, 4, 7)
    assert np.all(w >= 0) and np.abs(w.sum(-1) - 1).max() <= 1e-6


def test_key_value_permutation_invariance(rng):
    ca = layer()
    f = fmap(rng)
    emb = rng.normal(size=(5, 6))
    ref = ca(f, tensor(emb)).values.data
    worst = 0.0
    for _ in range(20):
        perm = rng.permutation(5)
        worst = max(worst, np.abs(ca(f, tensor(emb[perm])).values.data - ref).max())
    assert worst <= 1e-6


def test_returned_weights_are_the_internal_ones(rng):
    ca = layer()
    f, emb = fmap(rng), tensor(rng.normal(size=(4, 6)))
    _, w = ca(f, emb, return_weights=True)
    assert np.array_equal(w.data, ca.attention_weights(f, emb).data)


def test_hand_computed_one_head():
    ca = CrossAttention(2, 2, FusionConfig(heads=1, residual=False), make_rng(0), np.float64)
    for lin in (ca.q, ca.k, ca.v, ca.out):
        lin.weight.data = np.eye(2)
        lin.bias.data[:] = 0
    q = np.array([1.0, 2.0])
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    s = e @ q / np.sqrt(2)
    p = np.exp(s) / np.exp(s).sum()
    out = ca(FeatureMap(tensor(q.reshape(1, 1, 1, 2))), tensor(e)).values.data.reshape(2)
    assert np.allclose(out, p @ e, atol=1e-15)


def test_logit_scaling_formula(rng):
    q, k = tensor(rng.normal(size=(3, 4))), tensor(rng.normal(size=(5, 4)))
    base = scaled_logits(q, k, 4).data
    assert np.allclose(base, q.data @ k.data.T / 2.0)
    # the scale is 1/sqrt(d_k): 4x d_k halves the logits, 2x divides by sqrt 2
    assert np.allclose(scaled_logits(q, k, 16).data, base / 2)
    assert np.allclose(scaled_logits(q, k, 8).data, base / np.sqrt(2))


def test_shape_contract_and_errors(rng):
    for heads, width in ((1, 4), (2, 8), (4, 16)):
        ca = layer(width=width, heads=heads)
        f = fmap(rng, c=width)
        assert ca(f, tensor(rng.normal(size=(3, 6)))).values.shape == f.values.shape
    with pytest.raises(ValueError):
        layer(width=6, heads=4)
    with pytest.raises(ValueError):
        layer(width=8)(fmap(rng, c=4), tensor(rng.normal(size=(3, 6))))


@pytest.mark.parametrize("residual", [True, False])
def test_fusion_gradcheck(residual):
    rng = np.random.default_rng(11)
    for trial in range(20):
        ca = layer(width=4, emb=3, heads=2, residual=residual, seed=trial)
        f = FeatureMap(tensor(rng.uniform(-1, 1, size=(1, 2, 2, 4))))
        emb = tensor(rng.uniform(-1, 1, size=(3, 3)))
        tgt = Tensor(rng.normal(size=(1, 2, 2, 4)))
        params = list(ca.named_parameters().values())
        fn = lambda: T.tsum(ca(f, emb).values * tgt)  # noqa: E731
        assert gradcheck(fn, params + [f.values, emb], max_coords=10, rng=np.random.default_rng(trial)) <= 1e-3
