"""Lattice state machine: init, bottom embedding, attention, column MLPs,
the synchronous update and the propagation loop."""

from types import SimpleNamespace

import numpy as np
import pytest

import agglomerator.tensor as T
from agglomerator import lattice
from agglomerator.tensor import Tensor

from helpers import max_rel_err, numeric_grad

GEN = np.random.default_rng(1234)


def stub_cfg(K, beta=8.0, neighborhood="full", dropout=0.0, use_attention=True,
             acts=(T.sine, T.gelu)):
    return SimpleNamespace(K=K, beta=beta, neighborhood=neighborhood, dropout=dropout,
                           use_attention=use_attention, column_activations=lambda: acts)


def linear_identity_params(K, d=1):
    """Linear-columns weights acting as the identity map."""
    params = {}
    eye = np.eye(d)
    for k in range(1, K + 1):
        params[f"bu.{k}.fc.w"] = Tensor(eye.copy(), requires_grad=True)
        params[f"bu.{k}.fc.b"] = Tensor(np.zeros(d), requires_grad=True)
    for k in range(K):
        params[f"td.{k}.fc.w"] = Tensor(eye.copy(), requires_grad=True)
        params[f"td.{k}.fc.b"] = Tensor(np.zeros(d), requires_grad=True)
    params["mix"] = Tensor(np.ones((K + 1, 4)), requires_grad=True)
    return params


# --- init_state ---------------------------------------------------------------

def test_init_state_same_seed_identical():
    a = lattice.init_state(2, 3, 3, 4, 8, np.random.default_rng(5))
    b = lattice.init_state(2, 3, 3, 4, 8, np.random.default_rng(5))
    assert all(np.array_equal(x.value, y.value) for x, y in zip(a.layers, b.layers))
    assert a.t == 0


def test_init_state_unit_expected_norm():
    # Monte Carlo over 1e4 vectors of dimension 128: E|v|^2 = 1 within 5%
    state = lattice.init_state(10, 10, 10, 10, 128, np.random.default_rng(0))
    sq = np.concatenate([(l.value ** 2).sum(axis=-1).ravel() for l in state.layers])
    assert sq.size >= 10_000
    assert abs(sq.mean() - 1.0) < 0.05


def test_init_state_empty_batch():
    state = lattice.init_state(0, 2, 2, 3, 4, np.random.default_rng(1))
    assert state.layers[0].shape == (0, 2, 2, 4)


# --- embed_bottom --------------------------------------------------------------

def test_embed_bottom_overwrites_only_layer_zero():
    state = lattice.init_state(1, 2, 2, 3, 4, np.random.default_rng(2))
    upper = [l.value.copy() for l in state.layers[1:]]
    tokens = Tensor(np.zeros((1, 2, 2, 4), dtype=np.float32))
    out = lattice.embed_bottom(state, tokens)
    assert np.all(out.layers[0].value == 0.0)
    for new, old in zip(out.layers[1:], upper):
        assert np.array_equal(new.value, old)


def test_embed_bottom_idempotent_and_restoring():
    cfg = stub_cfg(K=2)
    params = lattice.init_lattice_weights(4, 3, np.random.default_rng(3))
    state = lattice.init_state(1, 2, 2, 3, 4, np.random.default_rng(4))
    tokens = Tensor(GEN.standard_normal((1, 2, 2, 4)).astype(np.float32))
    once = lattice.embed_bottom(state, tokens)
    twice = lattice.embed_bottom(once, tokens)
    assert np.array_equal(once.layers[0].value, twice.layers[0].value)
    stepped = lattice.step(once, params, cfg)
    restored = lattice.embed_bottom(stepped, tokens)
    assert np.array_equal(restored.layers[0].value, tokens.value)


def test_embed_bottom_shape_mismatch():
    state = lattice.init_state(1, 2, 2, 3, 4, np.random.default_rng(4))
    with pytest.raises(T.ShapeError, match="embed_bottom"):
        lattice.embed_bottom(state, Tensor(np.zeros((1, 3, 3, 4))))


# --- attention -----------------------------------------------------------------

def test_attention_identical_vectors_uniform_weights():
    v = np.array([0.3, -1.2, 0.5], dtype=np.float32)
    layer = Tensor(np.broadcast_to(v, (1, 1, 2, 3)).copy())
    out = lattice.attention(layer, beta=4.0)
    w = lattice.attention_weights(layer.value, beta=4.0)
    assert np.allclose(w, 0.5, atol=1e-6)
    assert np.allclose(out.value, v, atol=1e-6)


def test_attention_beta_to_zero_is_neighborhood_mean():
    layer = Tensor(GEN.standard_normal((2, 3, 3, 4)).astype(np.float32))
    out = lattice.attention(layer, beta=1e-9)
    mean = layer.value.reshape(2, 9, 4).mean(axis=1, keepdims=True)
    assert np.allclose(out.value.reshape(2, 9, 4), mean, atol=1e-5)


def test_attention_hand_computed_two_columns():
    # 1x2 grid, d=2, l1=(1,0), l2=(0,1), beta=1:
    # weights for position 1 = softmax([1, 0]) = [0.7311, 0.2689]
    layer = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]], dtype=np.float32))
    out = lattice.attention(layer, beta=1.0)
    w = lattice.attention_weights(layer.value, beta=1.0)
    assert w[0, 0] == pytest.approx([0.73105858, 0.26894142], abs=1e-6)
    assert out.value[0, 0, 0] == pytest.approx([0.73105858, 0.26894142], abs=1e-6)


@pytest.mark.parametrize("beta", [0.1, 1.0, 8.0, 32.0])
@pytest.mark.parametrize("neighborhood", ["full", 1])
def test_attention_rows_sum_to_one(beta, neighborhood):
    layer = GEN.standard_normal((4, 5, 5, 8)).astype(np.float32)
    w = lattice.attention_weights(layer, beta=beta, neighborhood=neighborhood)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_radius_masks_far_positions():
    layer = GEN.standard_normal((1, 4, 4, 3)).astype(np.float32)
    w = lattice.attention_weights(layer, beta=1.0, neighborhood=1)
    # position (0,0) may only attend to the 2x2 corner block
    allowed = {0, 1, 4, 5}
    hot = set(np.flatnonzero(w[0, 0] > 1e-12).tolist())
    assert hot <= allowed


def test_attention_rejects_nonpositive_beta():
    with pytest.raises(ValueError, match="beta"):
        lattice.attention(Tensor(np.zeros((1, 1, 2, 2))), beta=0.0)


# --- column MLPs ----------------------------------------------------------------

def test_bottom_up_zero_input_zero_bias_zero_output():
    params = lattice.init_lattice_weights(4, 3, np.random.default_rng(0))
    out = lattice.bottom_up(Tensor(np.zeros((1, 2, 2, 4), dtype=np.float32)), params, k=1)
    assert np.allclose(out.value, 0.0)


def test_top_down_zero_input_zero_bias_zero_output():
    params = lattice.init_lattice_weights(4, 3, np.random.default_rng(0))
    out = lattice.top_down(Tensor(np.zeros((1, 2, 2, 4), dtype=np.float32)), params, k=0)
    assert np.allclose(out.value, 0.0)


@pytest.mark.parametrize("fn,k", [(lattice.bottom_up, 1), (lattice.top_down, 0)])
def test_column_mlp_locality(fn, k):
    params = lattice.init_lattice_weights(3, 2, np.random.default_rng(1))
    base = GEN.standard_normal((1, 3, 3, 3)).astype(np.float32)
    bumped = base.copy()
    bumped[0, 1, 1] += 1.0
    a = fn(Tensor(base), params, k=k).value
    b = fn(Tensor(bumped), params, k=k).value
    changed = np.any(a != b, axis=-1)
    assert changed[0, 1, 1]
    assert changed.sum() == 1


@pytest.mark.parametrize("fn,k", [(lattice.bottom_up, 1), (lattice.top_down, 0)])
def test_column_mlp_gradients(fn, k):
    params = lattice.init_lattice_weights(3, 2, np.random.default_rng(2), dtype=np.float64)
    x = Tensor(GEN.standard_normal((1, 2, 2, 3)), requires_grad=True)
    keys = [p for p in params if p.startswith(("bu.1", "td.0"))]
    leaves = [x] + [params[p] for p in keys]

    def build():
        out = fn(x, params, k=k)
        return T.tsum(out * out)

    build().backward()
    analytic = [lf.grad.copy() if lf.grad is not None else np.zeros_like(lf.value)
                for lf in leaves]
    for lf in leaves:
        lf.grad = None
    numeric = numeric_grad(lambda: build().item(), [lf.value for lf in leaves])
    for a, n in zip(analytic, numeric):
        assert max_rel_err(a, n) < 1e-4


def test_cross_column_weight_sharing():
    # identical inputs at every position -> identical outputs at every position,
    # before and after perturbing the shared weights
    params = lattice.init_lattice_weights(4, 2, np.random.default_rng(3))
    v = GEN.standard_normal(4).astype(np.float32)
    field = Tensor(np.broadcast_to(v, (2, 3, 3, 4)).copy())
    for params_ in (params,):
        out = lattice.bottom_up(field, params_, k=1).value
        assert np.allclose(out, out[0, 0, 0], atol=1e-6)
    params["bu.1.fc1.w"].value += 0.1
    out2 = lattice.bottom_up(field, params, k=1).value
    assert np.allclose(out2, out2[0, 0, 0], atol=1e-6)
    assert not np.allclose(out2, out)


# --- step ------------------------------------------------------------------------

def constant_mlp_params(K, d, values_bu, values_td):
    """MLP weights that output a constant regardless of input (w=0, b2=c)."""
    params = {}
    for k in range(1, K + 1):
        params[f"bu.{k}.fc1.w"] = Tensor(np.zeros((d, 4 * d)))
        params[f"bu.{k}.fc1.b"] = Tensor(np.zeros(4 * d))
        params[f"bu.{k}.fc2.w"] = Tensor(np.zeros((4 * d, d)))
        params[f"bu.{k}.fc2.b"] = Tensor(np.full(d, values_bu[k]))
    for k in range(K):
        params[f"td.{k}.fc1.w"] = Tensor(np.zeros((d, 4 * d)))
        params[f"td.{k}.fc1.b"] = Tensor(np.zeros(4 * d))
        params[f"td.{k}.fc2.w"] = Tensor(np.zeros((4 * d, d)))
        params[f"td.{k}.fc2.b"] = Tensor(np.full(d, values_td[k]))
    params["mix"] = Tensor(np.ones((K + 1, 4)))
    return params


def test_step_average_of_identical_contributions():
    # all contributions equal v at an interior layer -> new level = v
    K, d, v = 2, 3, 0.8
    params = constant_mlp_params(K, d, values_bu={1: v, 2: v}, values_td={0: v, 1: v})
    layers = [Tensor(np.full((1, 2, 2, d), v, dtype=np.float64)) for _ in range(K + 1)]
    state = lattice.LatticeState(layers=layers, t=0)
    out = lattice.step(state, params, stub_cfg(K))
    assert np.allclose(out.layers[1].value, v, atol=1e-7)
    assert out.t == 1


def test_step_no_attention_divides_by_three():
    K, d = 2, 2
    params = constant_mlp_params(K, d, values_bu={1: 2.0, 2: 0.0}, values_td={0: 0.0, 1: 5.0})
    layers = [Tensor(np.full((1, 1, 1, d), c, dtype=np.float64)) for c in (0.0, 1.0, 0.0)]
    state = lattice.LatticeState(layers=layers, t=0)
    out = lattice.step(state, params, stub_cfg(K, use_attention=False))
    # layer 1: (prev 1.0 + bu 2.0 + td 5.0) / 3
    assert np.allclose(out.layers[1].value, (1.0 + 2.0 + 5.0) / 3)
    # top layer without attention: (prev + bu) / 2
    assert np.allclose(out.layers[2].value, (0.0 + 0.0) / 2)


def test_step_single_column_hand_computed():
    # 1x1 grid, K=1, d=1; attention over one position is the value itself
    K = 1
    w1 = 0.5 * np.ones((1, 4))
    b1 = 0.25 * np.ones(4)
    w2 = 0.3 * np.ones((4, 1))
    b2 = np.array([0.1])
    params = {
        "bu.1.fc1.w": Tensor(w1), "bu.1.fc1.b": Tensor(b1),
        "bu.1.fc2.w": Tensor(w2), "bu.1.fc2.b": Tensor(b2),
        "td.0.fc1.w": Tensor(np.zeros((1, 4))), "td.0.fc1.b": Tensor(np.zeros(4)),
        "td.0.fc2.w": Tensor(np.zeros((4, 1))), "td.0.fc2.b": Tensor(np.zeros(1)),
        "mix": Tensor(np.array([[1.0] * 4, [0.7, 1.3, 1.0, 0.4]])),
    }
    token, top = 0.6, -0.2
    layers = [Tensor(np.full((1, 1, 1, 1), token)), Tensor(np.full((1, 1, 1, 1), top))]
    out = lattice.step(lattice.LatticeState(layers, t=0), params, stub_cfg(K, beta=2.0))
    bu_val = float(4 * 0.3 * np.sin(0.5 * token + 0.25) + 0.1)
    expected = (0.7 * top + 1.3 * bu_val + 0.4 * top) / 3.0  # attention of one = itself
    assert out.layers[1].value[0, 0, 0, 0] == pytest.approx(expected, rel=1e-6)
    assert np.array_equal(out.layers[0].value, layers[0].value)  # bottom pinned


def test_step_is_synchronous():
    # with identity columns, layer 2 must read the t-1 value of layer 1,
    # not the freshly computed one
    K = 2
    params = linear_identity_params(K)
    t0, a, b = 2.0, -1.0, 4.0
    layers = [Tensor(np.full((1, 1, 1, 1), c)) for c in (t0, a, b)]
    cfg = stub_cfg(K, use_attention=False, acts=(None, None))
    out = lattice.step(lattice.LatticeState(layers, t=0), params, cfg)
    assert out.layers[1].value.ravel()[0] == pytest.approx((a + t0 + b) / 3)
    assert out.layers[2].value.ravel()[0] == pytest.approx((b + a) / 2)  # old a, not new


def test_step_mix_scaling_linearity():
    K, d = 2, 3
    params = lattice.init_lattice_weights(d, K + 1, np.random.default_rng(8), dtype=np.float64)
    layers = [Tensor(GEN.standard_normal((1, 2, 2, d))) for _ in range(K + 1)]
    state = lattice.LatticeState(layers, t=0)
    cfg = stub_cfg(K, beta=4.0)
    base = lattice.step(state, params, cfg)
    params["mix"].value *= 2.0  # power of two: scaling must be exact
    doubled = lattice.step(state, params, cfg)
    for k in range(1, K + 1):
        assert np.array_equal(doubled.layers[k].value, 2.0 * base.layers[k].value)


# --- propagate ------------------------------------------------------------------

def test_propagate_t1_equals_embed_plus_step():
    K, d = 2, 4
    params = lattice.init_lattice_weights(d, K + 1, np.random.default_rng(9))
    tokens = Tensor(GEN.standard_normal((2, 3, 3, d)).astype(np.float32))
    cfg = stub_cfg(K, beta=2.0)
    init = lattice.init_state(2, 3, 3, K + 1, d, np.random.default_rng(77))
    out = lattice.propagate(tokens, params, 1, cfg, initial_state=init)
    manual = lattice.step(lattice.embed_bottom(init, tokens), params, cfg)
    for a, b in zip(out.layers, manual.layers):
        assert np.array_equal(a.value, b.value)


def test_propagate_same_seed_identical():
    K, d = 1, 3
    params = lattice.init_lattice_weights(d, K + 1, np.random.default_rng(10))
    tokens = Tensor(GEN.standard_normal((2, 2, 2, d)).astype(np.float32))
    cfg = stub_cfg(K)
    runs = [lattice.propagate(tokens, params, 3, cfg,
                              init_gen=np.random.default_rng(55)) for _ in range(2)]
    for a, b in zip(runs[0].layers, runs[1].layers):
        assert np.array_equal(a.value, b.value)


def test_propagate_batch_permutation_equivariance():
    K, d = 2, 4
    params = lattice.init_lattice_weights(d, K + 1, np.random.default_rng(11))
    tokens = GEN.standard_normal((3, 2, 2, d)).astype(np.float32)
    init = lattice.init_state(3, 2, 2, K + 1, d, np.random.default_rng(12))
    cfg = stub_cfg(K, beta=4.0)
    perm = np.array([2, 0, 1])
    out = lattice.propagate(Tensor(tokens), params, 2, cfg, initial_state=init)
    init_p = lattice.LatticeState([Tensor(l.value[perm]) for l in init.layers], t=0)
    out_p = lattice.propagate(Tensor(tokens[perm]), params, 2, cfg, initial_state=init_p)
    for a, b in zip(out.layers, out_p.layers):
        assert np.allclose(a.value[perm], b.value, atol=1e-6)


def test_propagate_requires_step():
    params = lattice.init_lattice_weights(2, 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="at least one step"):
        lattice.propagate(Tensor(np.zeros((1, 2, 2, 2))), params, 0, stub_cfg(1),
                          init_gen=np.random.default_rng(0))
