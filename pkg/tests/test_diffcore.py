import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merl_rl.diffcore import (
    AdamState,
    ConfigurationError,
    MlpParams,
    NumericalError,
    UsageError,
    adam_step,
    backward,
    clip_by_global_norm,
    finite_difference_gradient,
    forward,
    global_norm,
    init_mlp,
    load_mlp,
    max_relative_error,
    mlp_from_dict,
    mlp_to_dict,
    save_mlp,
)


def linear(w, b, act="identity"):
    return MlpParams(((np.atleast_2d(np.asarray(w, float)), np.atleast_1d(np.asarray(b, float))),),
                     hidden_activation="tanh", output_activation=act)


def brute_forward(layers, x, out_act="identity"):
    # Plain loops, no matrix products.
    h = list(x)
    for k, (W, b) in enumerate(layers):
        z = [b[i] + sum(W[i][j] * h[j] for j in range(len(h))) for i in range(len(b))]
        last = k == len(layers) - 1
        act = out_act if last else "tanh"
        h = [math.tanh(v) for v in z] if act == "tanh" else z
    return h


def test_identity_layer():
    p = linear(np.eye(2), np.zeros(2))
    out, _ = forward(p, np.array([1.0, -2.0]))
    assert out.tolist() == [1.0, -2.0]


def test_zero_input_gives_bias():
    rng = np.random.default_rng(3)
    p = MlpParams(((rng.standard_normal((3, 4)), np.array([0.5, -1.0, 2.0])),))
    out, _ = forward(p, np.zeros(4))
    assert out.tolist() == [0.5, -1.0, 2.0]


def test_small_net_matches_hand_evaluation():
    W1 = np.array([[0.5, -0.25], [0.1, 0.3]])
    b1 = np.array([0.05, -0.1])
    W2 = np.array([[0.7, -0.4]])
    b2 = np.array([0.2])
    p = MlpParams(((W1, b1), (W2, b2)))
    x = np.array([0.3, -1.2])
    out, _ = forward(p, x)
    want = brute_forward([(W1.tolist(), b1.tolist()), (W2.tolist(), b2.tolist())], x.tolist())
    assert abs(out[0] - want[0]) < 1e-15


def test_random_net_matches_loop_oracle_batched():
    rng = np.random.default_rng(0)
    p = init_mlp([3, 5, 4, 2], rng)
    x = rng.standard_normal((6, 3))
    out, _ = forward(p, x)
    layers = [(W.tolist(), b.tolist()) for W, b in p.layers]
    for i in range(6):
        np.testing.assert_allclose(out[i], brute_forward(layers, x[i].tolist()), rtol=0, atol=1e-14)


def test_forward_dimension_mismatch():
    p = init_mlp([3, 2], np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        forward(p, np.zeros(4))


def test_forward_bit_deterministic():
    rng = np.random.default_rng(1)
    p = init_mlp([4, 8, 3], rng)
    x = rng.standard_normal((5, 4))
    a, _ = forward(p, x)
    b, _ = forward(p, x)
    assert a.tobytes() == b.tobytes()


def test_backward_linear_case():
    p = linear([[2.0]], [1.0])
    _, cache = forward(p, np.array([3.0]))
    g, dx = backward(p, cache, np.array([1.0]))
    (dw, db), = g.layers
    assert dw.tolist() == [[3.0]] and db.tolist() == [1.0]
    assert dx.tolist() == [2.0]


def test_backward_tanh_at_zero():
    p = linear([[1.0]], [0.0], act="tanh")
    _, cache = forward(p, np.array([0.0]))
    (dw, db), = backward(p, cache, np.array([1.0]))[0].layers
    assert dw.tolist() == [[0.0]] and db.tolist() == [1.0]


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    p = init_mlp([3, 4, 2], rng)
    x = rng.standard_normal((7, 3))
    y = rng.standard_normal((7, 2))

    def loss(q):
        out, _ = forward(q, x)
        return float(np.mean((out - y) ** 2))

    out, cache = forward(p, x)
    g, _ = backward(p, cache, 2.0 * (out - y) / out.size)
    num = finite_difference_gradient(loss, p, 1e-5)
    assert max_relative_error(g, num) < 1e-4


def test_backward_rejects_stale_cache():
    rng = np.random.default_rng(0)
    p = init_mlp([2, 3, 1], rng)
    q = p.with_arrays([a + 1.0 for a in p.arrays()])
    _, cache = forward(p, np.ones(2))
    with pytest.raises(UsageError):
        backward(q, cache, np.ones(1))


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_fixed_point():
    p = init_mlp([2, 3, 1], np.random.default_rng(0))
    st0 = AdamState.zeros(p)
    q, st1 = adam_step(p, p.zeros_like(), st0, 1e-3)
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    assert st1.step == 1


def test_adam_first_step_moves_by_lr():
    lr = 1e-3
    for g in (0.7, 5.0, -2.0):
        (w,), _ = adam_step([np.array([1.0])], [np.array([g])], AdamState.zeros([np.zeros(1)]), lr)
        # Bias-corrected first step: lr * g / (|g| + eps).
        assert abs((1.0 - w[0]) - lr * math.copysign(1.0, g)) < 1e-10


def test_adam_two_steps_match_hand_recursion():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p, m, v = 0.5, 0.0, 0.0
    grads = [0.3, -0.1]
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    params = [np.array([0.5])]
    state = AdamState.zeros(params)
    for g in grads:
        params, state = adam_step(params, [np.array([g])], state, lr)
    assert abs(params[0][0] - p) < 1e-15
    assert state.step == 2


def test_adam_reports_non_finite_location():
    p = [np.zeros(2), np.zeros((2, 2))]
    g = [np.zeros(2), np.array([[0.0, 0.0], [np.nan, 0.0]])]
    with pytest.raises(NumericalError) as err:
        adam_step(p, g, AdamState.zeros(p), 1e-3)
    assert "leaf 1" in err.value.location and "(1, 0)" in err.value.location


def test_adam_state_moments_views():
    p = init_mlp([2, 3], np.random.default_rng(0))
    state = AdamState.zeros(p)
    _, state = adam_step(p, p.with_arrays([np.ones_like(a) for a in p.arrays()]), state, 0.1)
    ms, vs = state.moments()
    assert [m.shape for m in ms] == [a.shape for a in p.arrays()]
    assert np.allclose(ms[0], 0.1) and np.allclose(vs[1], 0.001)


# -- clipping -----------------------------------------------------------------


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    out, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert abs(global_norm(out) - 1.0) < 1e-12
    same, _ = clip_by_global_norm(g, 10.0)
    assert same is g


def test_global_norm_ignores_zero_leaves_exactly():
    rng = np.random.default_rng(5)
    g = [rng.standard_normal(7), rng.standard_normal((3, 2))]
    assert global_norm(g) == global_norm(g + [np.zeros(4)])


# -- finite differences -------------------------------------------------------


def test_fd_quadratic():
    (g,) = finite_difference_gradient(lambda p: float(p[0][0] ** 2), [np.array([3.0])], 1e-5)
    assert abs(g[0] - 6.0) < 1e-6


def test_fd_constant_is_zero():
    p = init_mlp([2, 2], np.random.default_rng(0))
    g = finite_difference_gradient(lambda q: 4.2, p, 1e-5)
    assert all(not a.any() for a in g.arrays())


def test_fd_non_finite_loss():
    with pytest.raises(NumericalError):
        finite_difference_gradient(lambda p: float("nan"), [np.zeros(1)], 1e-5)


# -- serialization ------------------------------------------------------------


def test_mlp_round_trip(tmp_path):
    p = init_mlp([3, 4, 2], np.random.default_rng(9), output_activation="tanh")
    q = mlp_from_dict(mlp_to_dict(p))
    assert q.output_activation == "tanh"
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), q.arrays()))
    save_mlp(p, tmp_path / "m.json")
    r = load_mlp(tmp_path / "m.json")
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), r.arrays()))


def test_mlp_from_dict_rejects_other_format():
    d = mlp_to_dict(init_mlp([2, 1], np.random.default_rng(0)))
    d["format"] = "something-else"
    with pytest.raises(ConfigurationError):
        mlp_from_dict(d)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 5))
def test_batched_forward_equals_rowwise(seed, d_in, d_out):
    rng = np.random.default_rng(seed)
    p = init_mlp([d_in, 4, d_out], rng)
    x = rng.standard_normal((3, d_in))
    batch, _ = forward(p, x)
    rows = np.stack([forward(p, r)[0] for r in x])
    np.testing.assert_allclose(batch, rows, rtol=0, atol=1e-14)
