import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmmformer import numerics as nx
from gmmformer.numerics import Parameters, ShapeError, Tape, Tensor, backpropagate, finite_difference_check


def _fd_error(fn, *shapes, seed=0, positive=False, step=1e-6):
    rng = np.random.default_rng(seed)
    params = Parameters()
    for i, s in enumerate(shapes):
        v = rng.uniform(0.5, 2.0, size=s) if positive else rng.normal(size=s)
        params.add(f"x{i}", v)
    weights = np.random.default_rng(seed + 1)

    def f():
        out = fn(*params.values())
        w = Tensor(weights.standard_normal(out.shape)) if out.shape else Tensor(1.0)
        weights.bit_generator.state = np.random.default_rng(seed + 1).bit_generator.state
        return nx.tsum(out * w)

    return finite_difference_check(f, params, step=step, max_coords=None)


# ---------------------------------------------------------------------------
# forward values


def test_softmax_of_equal_logits_is_uniform():
    out = nx.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_matmul_identity_padded_hand_checked():
    a = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    b = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(nx.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(Tensor(np.full((2, 5), 7.0)))
    assert np.all(out.data == 0.0)


def test_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(scale=30, size=(6, 9)))
    assert np.max(np.abs(nx.softmax(x).data.sum(-1) - 1)) < 1e-12


def test_softmax_mask_excludes_entries(rng):
    x = rng.normal(size=(3, 4))
    mask = np.array([True, False, True, True])
    out = nx.softmax(Tensor(x), mask=mask).data
    assert np.all(out[:, 1] == 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-15)


def test_softmax_fully_masked_row_is_rejected():
    with pytest.raises(ValueError):
        nx.softmax(Tensor(np.zeros((2, 3))), mask=np.zeros(3, dtype=bool))


def test_layer_norm_moments(rng):
    x = Tensor(rng.normal(loc=3, scale=5, size=(7, 16)))
    y = nx.layer_norm(x).data
    assert np.max(np.abs(y.mean(-1))) < 1e-10
    # eps inside the root nudges the variance just below 1
    assert np.max(np.abs(y.var(-1) - 1)) < 1e-6


def test_softplus_is_overflow_safe():
    out = nx.softplus(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, math.log(2), 800.0], atol=1e-300)


def test_cosine_matches_definition(rng):
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    expected = (a @ b.T) / np.outer(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))
    np.testing.assert_allclose(nx.cosine(a, b).data, expected, rtol=1e-14)


def test_cosine_zero_norm_rejected():
    with pytest.raises(ValueError):
        nx.cosine(np.zeros((1, 3)), np.ones((1, 3)))


def test_log_of_nonpositive_rejected():
    with pytest.raises(ValueError):
        nx.log(Tensor([1.0, 0.0]))


def test_reduce_max_and_take():
    x = Tensor([[1.0, 5.0, 2.0], [7.0, 0.0, 7.0]])
    np.testing.assert_array_equal(nx.reduce_max(x).data, [5.0, 7.0])
    np.testing.assert_array_equal(nx.take(x, [2, 0], axis=1).data, [[2.0, 1.0], [7.0, 7.0]])


# ---------------------------------------------------------------------------
# shape errors


@pytest.mark.parametrize(
    "call, name",
    [
        (lambda: nx.matmul(np.ones((2, 3)), np.ones((4, 2))), "matmul"),
        (lambda: Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3))), "add"),
        (lambda: nx.reshape(np.ones(6), (4, 2)), "reshape"),
        (lambda: nx.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1), "concat"),
        (lambda: nx.cosine(np.ones((2, 3)), np.ones((2, 4))), "cosine"),
    ],
)
def test_shape_error_names_primitive_and_shapes(call, name):
    with pytest.raises(ShapeError) as info:
        call()
    assert info.value.primitive == name
    assert len(info.value.shapes) >= 2 or name == "reshape"
    assert name in str(info.value)


# ---------------------------------------------------------------------------
# gradients


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    assert backpropagate(y, tape)[x] == 6.0


def test_disconnected_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([[4.0]], requires_grad=True)
    with Tape() as tape:
        y = nx.tsum(x * x)
    grads = backpropagate(y, tape, wrt=[z])
    assert np.all(grads[z] == 0) and grads[z].shape == (1, 1)


def test_non_scalar_output_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        backpropagate(y, tape)


def test_softmax_dot_gradient_matches_fd():
    err = _fd_error(lambda a, b: nx.tsum(nx.softmax(a) * b), (3, 5), (3, 5))
    assert err < 1e-6


def test_maximum_tie_routes_to_first_argument():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = nx.tsum(nx.maximum(a, b))
    g = backpropagate(y, tape)
    np.testing.assert_array_equal(g[a], [1.0, 0.0])
    np.testing.assert_array_equal(g[b], [0.0, 1.0])


PRIMITIVE_CASES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)], False),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: a * b, [(2, 3, 4), (3, 4)], False),
    "scale": (lambda a: a * 2.5, [(3, 3)], False),
    "exp": (lambda a: nx.exp(a), [(4, 2)], False),
    "log": (lambda a: nx.log(a), [(4, 2)], True),
    "maximum": (lambda a, b: nx.maximum(a, b), [(5,), (5,)], False),
    "relu": (lambda a: nx.relu(a), [(6, 3)], False),
    "softplus": (lambda a: nx.softplus(a * 10.0), [(6,)], False),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)], False),
    "matmul-batched": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)], False),
    "matmul-weight": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)], False),
    "transpose": (lambda a: nx.transpose(a, (1, 0, 2)), [(2, 3, 4)], False),
    "reshape": (lambda a: nx.reshape(a, (6, 2)), [(3, 4)], False),
    "sum": (lambda a: nx.tsum(a, axis=0), [(3, 4)], False),
    "mean": (lambda a: nx.mean(a), [(3, 4)], False),
    "reduce_max": (lambda a: nx.reduce_max(a), [(3, 4)], False),
    "softmax": (lambda a: nx.softmax(a), [(3, 6)], False),
    "softmax-masked": (lambda a: nx.softmax(a, mask=np.array([True, True, False, True])), [(2, 4)], False),
    "layer_norm": (lambda a: nx.layer_norm(a), [(3, 8)], False),
    "concat": (lambda a, b: nx.concat([a, b], axis=0), [(2, 3), (4, 3)], False),
    "take": (lambda a: nx.take(a, [0, 2, 2], axis=1), [(2, 4)], False),
    "cosine": (lambda a, b: nx.cosine(a, b), [(3, 5), (4, 5)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_fd(name):
    fn, shapes, positive = PRIMITIVE_CASES[name]
    assert _fd_error(fn, *shapes, positive=positive) < 1e-6


@settings(max_examples=25, deadline=None)
@given(
    rows=st.integers(1, 8),
    cols=st.integers(1, 8),
    inner=st.integers(1, 8),
    seed=st.integers(0, 10_000),
)
def test_matmul_softmax_gradients_random_shapes(rows, cols, inner, seed):
    err = _fd_error(lambda a, b: nx.softmax(a @ b), (rows, inner), (inner, cols), seed=seed)
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3), seed=st.integers(0, 10_000))
def test_broadcast_mul_gradients(shape, seed):
    tail = tuple(shape[1:]) or (1,)
    err = _fd_error(lambda a, b: nx.exp(a * b) - b, tuple(shape), tail, seed=seed)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# finite-difference checker


def test_fd_check_exact_for_quadratic(rng):
    params = Parameters()
    x = params.add("x", rng.normal(size=(4, 3)))
    a = rng.normal(size=(4, 3))
    err = finite_difference_check(lambda: nx.tsum(x * x * a + x), params, step=1e-5)
    assert err < 1e-8


def test_fd_check_rejects_zero_step():
    params = Parameters()
    x = params.add("x", [1.0])
    with pytest.raises(ValueError):
        finite_difference_check(lambda: nx.tsum(x * x), params, step=0.0)


def test_fd_check_rejects_nonfinite_value():
    params = Parameters()
    x = params.add("x", [1.0])
    with pytest.raises(ValueError), np.errstate(over="ignore"):
        finite_difference_check(lambda: nx.tsum(nx.exp(x * 1e4)), params)


def test_fd_check_restores_parameters(rng):
    params = Parameters()
    x = params.add("x", rng.normal(size=5))
    before = x.data.copy()
    finite_difference_check(lambda: nx.tsum(nx.exp(x)), params)
    np.testing.assert_array_equal(x.data, before)


# ---------------------------------------------------------------------------
# trace


def test_replay_is_bit_identical(rng):
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
    with Tape() as tape:
        y = nx.tsum(nx.softmax(nx.layer_norm(x @ w)) * 3.0)
    values = tape.replay()
    assert values[id(y)].tobytes() == y.data.tobytes()


def test_replay_with_override(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as tape:
        y = nx.tsum(x * x)
    assert tape.replay({x: np.ones(3)})[id(y)] == 3.0


def test_leaves_are_inputs_not_intermediates(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as tape:
        h = nx.exp(x)
        nx.tsum(h * h)
    leaves = tape.leaves()
    assert x in leaves and h not in leaves


def test_no_tape_records_nothing():
    with Tape() as tape:
        pass
    Tensor([1.0]) + Tensor([2.0])
    assert len(tape) == 0


def test_tapes_are_thread_confined():
    lengths = {}

    def work(key, n):
        with Tape() as tape:
            t = Tensor([1.0])
            for _ in range(n):
                t = t + 1.0
        lengths[key] = len(tape)

    threads = [threading.Thread(target=work, args=(i, 50 + i)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert lengths == {i: 50 + i for i in range(4)}


def test_parameters_snapshot_load_roundtrip(rng):
    p = Parameters()
    p.add("a", rng.normal(size=(2, 2)))
    snap = p.snapshot()
    p["a"].data = np.zeros((2, 2))
    p.load(snap)
    np.testing.assert_array_equal(p["a"].data, snap["a"])
    with pytest.raises(KeyError):
        p.load({})
    with pytest.raises(KeyError):
        p.add("a", [1.0])
