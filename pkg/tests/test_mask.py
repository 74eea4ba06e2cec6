import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instances import simplex_rows
from ltmerge import ib, mask
from ltmerge.mask import MaskError, MaskModuleParams
from ltmerge.numerics import Tensor


def test_merged_count_examples():
    assert mask.merged_count(16, 0.25) == 4
    assert mask.merged_count(10, 0.33) == 4
    assert mask.merged_count(7, 1.0) == 7
    with pytest.raises(MaskError):
        mask.merged_count(4, 0.0)


def test_grid_dims_examples():
    assert mask.grid_dims(8, 8, 0.25) == (4, 4)
    assert mask.grid_dims(4, 4, 1.0) == (4, 4)
    assert mask.grid_dims(6, 4, 0.5) == (5, 3)
    with pytest.raises(MaskError):
        mask.grid_dims(4, 4, 1.5)


def test_zero_init_layer_gives_uniform_mask():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 3)))
    p = MaskModuleParams(Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)))
    np.testing.assert_allclose(mask.init_mask(x, p).data, np.full((2, 5, 2), 0.2))


def test_zero_input_uses_bias_only():
    b = np.array([0.3, -1.0])
    p = MaskModuleParams(Tensor(np.random.default_rng(1).normal(size=(3, 2))), Tensor(b))
    G = mask.init_mask(Tensor(np.zeros((1, 4, 3))), p).data
    assert mask.column_sums_ok(G)
    np.testing.assert_allclose(G, np.full((1, 4, 2), 0.25))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.integers(2, 8), P=st.integers(1, 4))
def test_sharper_with_smaller_tau_when_one_logit_positive(seed, N, P):
    # per column, exactly one token has a positive pre-activation
    rng = np.random.default_rng(seed)
    h = -rng.uniform(0.1, 2.0, size=(N, P))
    h[rng.integers(0, N, P), np.arange(P)] = rng.uniform(0.1, 2.0, P)
    x = Tensor(h[None])
    p = lambda tau: MaskModuleParams(Tensor(np.eye(P)), Tensor(np.zeros(P)), tau=tau)
    maxes = [mask.init_mask(x, p(t)).data.max(axis=-2) for t in (0.5, 0.25, 0.1)]
    assert (maxes[1] > maxes[0]).all() and (maxes[2] > maxes[1]).all()


def test_sharpness_not_monotone_for_generic_inputs():
    # several positive logits in a column saturate together and flatten it
    h = np.array([[[2.0], [1.5], [-3.0]]])
    p = lambda tau: MaskModuleParams(Tensor(np.eye(1)), Tensor(np.zeros(1)), tau=tau)
    m5 = mask.init_mask(Tensor(h), p(0.5)).data.max()
    m1 = mask.init_mask(Tensor(h), p(0.1)).data.max()
    assert m1 < m5


def test_normalize_mask_examples():
    G = mask.normalize_mask(np.array([[2.0, 10.0], [2.0, -10.0], [2.0, -10.0], [2.0, -10.0]])).data
    np.testing.assert_allclose(G[:, 0], 0.25)
    np.testing.assert_allclose(G[:, 1], [1, 0, 0, 0], atol=1e-8)
    col = np.random.default_rng(2).normal(size=5)
    e = np.exp(col - col.max())
    np.testing.assert_allclose(mask.normalize_mask(col[:, None]).data[:, 0], e / e.sum(), rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_normalized_columns_convex(seed):
    rng = np.random.default_rng(seed)
    G = mask.normalize_mask(rng.normal(scale=20, size=(rng.integers(1, 9), rng.integers(1, 5)))).data
    assert mask.column_sums_ok(G, 1e-6)


def test_merge_tokens_selection_and_convexity():
    rng = np.random.default_rng(3)
    Z = rng.normal(size=(5, 3))
    G = np.zeros((5, 2))
    G[0, 0] = G[2, 1] = 1.0
    np.testing.assert_array_equal(mask.merge_tokens(Z, G).data, Z[[0, 2]])
    z = rng.normal(size=3)
    Gc = simplex_rows(rng, 2, 5).T
    np.testing.assert_allclose(mask.merge_tokens(np.tile(z, (5, 1)), Gc).data, np.tile(z, (2, 1)),
                               rtol=1e-12)


def test_merge_tokens_matches_matmul_oracle():
    rng = np.random.default_rng(4)
    Z, G = rng.normal(size=(5, 3)), simplex_rows(rng, 2, 5).T
    ref = np.array([[sum(G[n, p] * Z[n, d] for n in range(5)) for d in range(3)] for p in range(2)])
    np.testing.assert_allclose(mask.merge_tokens(Z, G).data, ref, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_merge_tokens_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    Z1, Z2 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    G = simplex_rows(rng, 3, 6).T
    lhs = mask.merge_tokens(a * Z1 + b * Z2, G).data
    rhs = a * mask.merge_tokens(Z1, G).data + b * mask.merge_tokens(Z2, G).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def _state_instance(seed, n=6, N=5, P=2, D=3, C=3, same_centroids=False):
    rng = np.random.default_rng(seed)
    G = simplex_rows(rng, P, N).T
    Z = rng.normal(scale=0.5, size=(n, N, D))
    merged = ib.merge_batch(G, Z).reshape(n, -1)
    cent = merged[:C] + rng.normal(scale=0.2, size=(C, P * D))
    if same_centroids:
        cent = np.tile(cent[:1], (C, 1))
    labels = np.arange(n) % C
    phi_x = simplex_rows(rng, n, C)
    Q = simplex_rows(rng, C, C).T
    state = ib.ClusterState(cent, np.zeros((C, 1)), Q, np.full(C, 1 / C))
    return G, Z, labels, phi_x, state


def test_update_equals_gradient_step():
    G, Z, labels, phi_x, state = _state_instance(0)
    for eta in (1.0, 0.3):
        out = mask.update_mask(G, Z, state, labels, MaskModuleParams(eta=eta), phi_x=phi_x,
                               normalize=False).data
        ref = G - eta * ib.ibb_grad(G, Z, phi_x, labels, state.merged_centroids, state.Q)
        np.testing.assert_allclose(out, ref, rtol=1e-9, atol=1e-15)


def test_null_steps():
    G, Z, labels, phi_x, state = _state_instance(1)
    norm = mask.normalize_mask(G).data
    out = mask.update_mask(G, Z, state, labels, MaskModuleParams(eta=0.0), phi_x=phi_x).data
    np.testing.assert_allclose(out, norm, atol=1e-15)
    G, Z, labels, phi_x, state = _state_instance(1, same_centroids=True)
    out = mask.update_mask(G, Z, state, labels, MaskModuleParams(), phi_x=phi_x).data
    np.testing.assert_allclose(out, mask.normalize_mask(G).data, atol=1e-12)


def test_sample_coupling_steps_each_sample_alone():
    G, Z, labels, phi_x, state = _state_instance(2)
    Gb = np.broadcast_to(G, (len(Z),) + G.shape).copy()
    out = mask.update_mask(Gb, Z, state, labels, MaskModuleParams(), phi_x=phi_x,
                           coupling="sample", normalize=False).data
    for i in range(len(Z)):
        ref = G - ib.ibb_grad(G, Z[i:i + 1], phi_x[i:i + 1], labels[i:i + 1],
                              state.merged_centroids, state.Q)
        np.testing.assert_allclose(out[i], ref, rtol=1e-9, atol=1e-15)


def test_label_free_update_is_convex():
    G, Z, labels, phi_x, state = _state_instance(3)
    out = mask.update_mask(G, Z, state, None, MaskModuleParams(), phi_x=phi_x)
    assert mask.column_sums_ok(out)


def test_zero_second_layer_mlp_is_identity():
    G, Z, labels, phi_x, state = _state_instance(4)
    rng = np.random.default_rng(0)
    D = Z.shape[2]
    mlp = (Tensor(rng.normal(size=(D, D))), Tensor(rng.normal(size=D)), Tensor(np.zeros((D, D))),
           Tensor(np.zeros(D)))
    a = mask.update_mask(G, Z, state, labels, MaskModuleParams(mlp=mlp), phi_x=phi_x).data
    b = mask.update_mask(G, Z, state, labels, MaskModuleParams(), phi_x=phi_x).data
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_update_shape_errors():
    G, Z, labels, phi_x, state = _state_instance(5)
    with pytest.raises(MaskError):
        mask.update_mask(G, Z, None, labels, MaskModuleParams(), phi_x=phi_x)
    with pytest.raises(MaskError):
        mask.update_mask(G[:-1], Z, state, labels, MaskModuleParams(), phi_x=phi_x)
    with pytest.raises(MaskError):
        MaskModuleParams(tau=0.0)
