"""Attention primitive: normalization, competition, equivariance, gradients."""

import numpy as np
import pytest

from slotseg import Tensor, default_dtype, ops
from slotseg.errors import ConfigError, ShapeError
from slotseg.params import ParameterStore
from slotseg.retriever import Retriever, RetrieverConfig, retrieve

from gradcheck import check_gradients


def _identity_weights(c):
    eye = lambda: Tensor(np.eye(c), requires_grad=True)
    zero = lambda: Tensor(np.zeros(c), requires_grad=True)
    return dict(wq=eye(), bq=zero(), wk=eye(), bk=zero(), wv=eye(), bv=zero())


def test_hand_computed_fixture():
    # identity projections, C=1: competition between two slots over two pixels
    cfg = RetrieverConfig(channels=1)
    w = _identity_weights(1)
    q = Tensor([[2.0], [0.0]])
    k = Tensor([[1.0], [-1.0]])
    v = Tensor([[3.0], [5.0]])
    out, attn = retrieve(q, k, v, cfg, **w)
    np.testing.assert_allclose(attn.numpy(), [[0.8808, 0.1192], [0.1192, 0.8808]], atol=5e-5)
    np.testing.assert_allclose(out.numpy(), [[3.2384], [4.7616]], atol=5e-4)


def test_zero_query_gives_uniform_competition():
    cfg = RetrieverConfig(channels=3)
    w = _identity_weights(3)
    w["wq"] = Tensor(np.zeros((3, 3)))
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=(4, 3)))
    k = Tensor(rng.normal(size=(6, 3)))
    v = Tensor(rng.normal(size=(6, 3)))
    out, attn = retrieve(q, k, v, cfg, **w)
    np.testing.assert_allclose(attn.numpy(), np.full((6, 4), 0.25), atol=1e-7)
    np.testing.assert_allclose(out.numpy(), np.tile(v.numpy().mean(axis=0) * 6 / 4, (4, 1)), rtol=1e-5)


def test_single_slot_wins_every_pixel():
    cfg = RetrieverConfig(channels=2)
    w = _identity_weights(2)
    rng = np.random.default_rng(1)
    q = Tensor(rng.normal(size=(1, 2)))
    k = Tensor(rng.normal(size=(5, 2)))
    v = Tensor(rng.normal(size=(5, 2)))
    out, attn = retrieve(q, k, v, cfg, **w)
    np.testing.assert_allclose(attn.numpy(), np.ones((5, 1)))
    np.testing.assert_allclose(out.numpy(), v.numpy().sum(axis=0, keepdims=True), rtol=1e-6)


@pytest.mark.parametrize("softmax_dim,axis", [("slot", 1), ("spatial", 0)])
def test_normalization_invariant(softmax_dim, axis):
    rng = np.random.default_rng(2)
    store = ParameterStore(seed=5)
    module = Retriever(store, "re", RetrieverConfig(channels=4, softmax_dim=softmax_dim))
    for trial in range(10):
        q = Tensor(rng.normal(size=(rng.integers(1, 6), 4)) * 3)
        k = Tensor(rng.normal(size=(rng.integers(1, 9), 4)) * 3)
        _, attn = module(q, k, k)
        np.testing.assert_allclose(attn.numpy().sum(axis=axis), 1.0, atol=1e-6)


def test_slot_permutation_equivariance_bitwise():
    rng = np.random.default_rng(3)
    store = ParameterStore(seed=7)
    module = Retriever(store, "re", RetrieverConfig(channels=4))
    q = Tensor(rng.normal(size=(5, 4)))
    k = Tensor(rng.normal(size=(7, 4)))
    v = Tensor(rng.normal(size=(7, 4)))
    perm = np.array([3, 0, 4, 1, 2])
    out, attn = module(q, k, v)
    out_p, attn_p = module(Tensor(q.numpy()[perm]), k, v)
    assert np.array_equal(out_p.numpy(), out.numpy()[perm])
    assert np.array_equal(attn_p.numpy(), attn.numpy()[:, perm])


def test_empty_query_rejected():
    cfg = RetrieverConfig(channels=2)
    w = _identity_weights(2)
    with pytest.raises(ShapeError):
        retrieve(Tensor(np.zeros((0, 2))), Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))), cfg, **w)


def test_kv_row_mismatch_rejected():
    cfg = RetrieverConfig(channels=2)
    w = _identity_weights(2)
    with pytest.raises(ShapeError):
        retrieve(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2))), cfg, **w)


def test_bad_softmax_dim_rejected():
    with pytest.raises(ConfigError):
        RetrieverConfig(channels=2, softmax_dim="rows")


def test_output_projection_flag_adds_parameters():
    base = ParameterStore(seed=1)
    Retriever(base, "re", RetrieverConfig(channels=3))
    withproj = ParameterStore(seed=1)
    Retriever(withproj, "re", RetrieverConfig(channels=3, use_output_projection=True))
    assert len(withproj) == len(base) + 2


@pytest.mark.parametrize("softmax_dim", ["slot", "spatial"])
def test_gradients_vs_finite_differences(softmax_dim):
    with default_dtype("f64"):
        worst = 0.0
        for i in range(5):
            rng = np.random.default_rng(10 + i)
            store = ParameterStore(seed=100 + i)
            module = Retriever(store, "re", RetrieverConfig(channels=3, softmax_dim=softmax_dim))
            q = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            k = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            v = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            r = Tensor(rng.normal(size=(3, 3)))

            def loss():
                out, _ = module(q, k, v)
                return ops.reduce_sum(ops.mul(out, r))

            leaves = [q, k, v] + [p.tensor for p in store.parameters()]
            worst = max(worst, check_gradients(loss, leaves))
        assert worst < 1e-4
