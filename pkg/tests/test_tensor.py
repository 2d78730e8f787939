import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pamlora import tensor as T
from pamlora.errors import ContractError, NumericError, ShapeError


def test_matmul_examples():
    assert np.array_equal(T.matmul([[1, 0], [0, 1]], [[2], [3]]).data, [[2], [3]])
    assert np.array_equal(T.matmul([[1, 2], [3, 4]], [[0], [0]]).data, [[0], [0]])
    assert np.array_equal(T.matmul([[1, 2]], [[3], [5]]).data, [[13]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_tensors_are_immutable():
    t = T.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_grad_of_square():
    with T.ComputationRecord() as rec:
        w = rec.watch(T.Tensor([3.0]))
        loss = T.tsum(w * w)
    assert T.grad(loss, rec)[w.id].data.tolist() == [6.0]


def test_unreachable_parameter_gets_zero_grad():
    with T.ComputationRecord() as rec:
        w = rec.watch(T.Tensor([3.0]))
        v = rec.watch(T.Tensor([[1.0, 2.0]]))
        loss = T.tsum(w * w)
    assert np.array_equal(T.grad(loss, rec)[v.id].data, np.zeros((1, 2)))


def test_grad_contract_errors():
    with T.ComputationRecord() as rec:
        w = rec.watch(T.Tensor([1.0, 2.0]))
        y = w * w
    with pytest.raises(ContractError):
        T.grad(y, rec)
    with pytest.raises(ContractError):
        T.grad(T.Tensor(1.0), rec)


def test_finite_diff_examples():
    g = T.finite_diff_grad(lambda w: float(np.sum(w**2)), np.array([3.0]), 1e-5)
    assert abs(g.item() - 6.0) < 1e-6
    assert np.array_equal(T.finite_diff_grad(lambda w: 4.2, np.ones(3)).data, np.zeros(3))
    g = T.finite_diff_grad(lambda w: float(np.sum(np.maximum(w, 0))), np.array([2.0, -2.0]))
    assert np.allclose(g.data, [1.0, 0.0], atol=1e-9)


def test_finite_diff_rejects_bad_inputs():
    with pytest.raises(ContractError):
        T.finite_diff_grad(lambda w: 0.0, np.ones(2), eps=0)
    with pytest.raises(NumericError):
        T.finite_diff_grad(lambda w: float("nan"), np.ones(2))


def _mlp_loss(params, x, y):
    w1, b1, w2, b2 = params
    h = T.relu(T.add(T.matmul(x, T.transpose(w1)), b1))
    return T.softmax_cross_entropy(T.add(T.matmul(h, T.transpose(w2)), b2), y, 0.1)


def assert_grad_matches(params, loss_of):
    with T.ComputationRecord() as rec:
        ts = [rec.watch(T.Tensor(p)) for p in params]
        loss = loss_of(ts)
    grads = T.grad(loss, rec)
    for i, p in enumerate(params):
        def f(v, i=i):
            ps = [q if j != i else v for j, q in enumerate(params)]
            return loss_of([T.Tensor(q) for q in ps]).item()
        fd = T.finite_diff_grad(f, p, 1e-6).data
        np.testing.assert_allclose(grads[ts[i].id].data, fd, rtol=1e-4, atol=1e-7)


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, size=6)
    params = [rng.normal(size=(5, 4)), rng.normal(size=5), rng.normal(size=(3, 5)), rng.normal(size=3)]
    assert_grad_matches(params, lambda ps: _mlp_loss(ps, x, y))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "scale", "log_softmax", "mean", "relu"])
def test_primitive_gradients(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(1, 4))  # exercises broadcasting
    weights = rng.normal(size=(3, 4))

    def loss_of(ts):
        x, z = ts
        out = {
            "add": lambda: T.add(x, z),
            "sub": lambda: T.sub(x, z),
            "mul": lambda: T.mul(x, z),
            "scale": lambda: T.scale(T.add(x, z), -2.5),
            "log_softmax": lambda: T.log_softmax(T.add(x, z)),
            "mean": lambda: T.mul(T.mean(T.mul(x, x)), z),
            "relu": lambda: T.relu(T.add(x, z)),
        }[op]()
        return T.tsum(T.mul(out, weights)) if out.shape == weights.shape else T.tsum(out)

    assert_grad_matches([a, b], loss_of)


def test_determinism_bit_identical():
    def once():
        rng = np.random.default_rng(7)
        params = [rng.normal(size=(5, 4)), rng.normal(size=5), rng.normal(size=(3, 5)), rng.normal(size=3)]
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, size=6)
        with T.ComputationRecord() as rec:
            ts = [rec.watch(T.Tensor(p)) for p in params]
            loss = _mlp_loss(ts, x, y)
        g = T.grad(loss, rec)
        return loss.data, [g[t.id].data for t in ts], [(n.op, len(n.operands)) for n in rec.nodes]

    a, b = once(), once()
    assert a[0].tobytes() == b[0].tobytes()
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a[1], b[1]))
    assert a[2] == b[2]


def test_record_is_topologically_ordered():
    with T.ComputationRecord() as rec:
        w = rec.watch(T.Tensor(np.ones((2, 2))))
        loss = T.tsum(T.relu(T.matmul(w, w)))
    produced = set(rec.trainable)
    for node in rec.nodes:
        assert all(o in produced or o not in rec._tracked for o in node.operands)
        produced.add(node.result)
    assert rec.nodes[-1].result == loss.id


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(-1, 1, size=s) for s in [(4, 5), (5, 3), (3, 6)])
    left = T.matmul(T.matmul(a, b), c).data
    right = T.matmul(a, T.matmul(b, c)).data
    assert np.max(np.abs(left - right)) <= 1e-9


def test_adam_first_step_is_lr_times_sign():
    state = T.AdamState.zeros_like(np.array([1.0]))
    new, state = T.adam_step(np.array([1.0]), np.array([1.0]), state, lr=0.1)
    assert abs((new[0] - 1.0) - (-0.1)) < 1e-8
    assert state.t == 1


def test_adam_zero_gradient_leaves_param():
    p = np.array([0.3, -2.0])
    new, _ = T.adam_step(p, np.zeros(2), T.AdamState.zeros_like(p), lr=0.1)
    assert np.array_equal(new, p)


def test_adam_two_steps_match_hand_rolled():
    lr, b1, b2, eps, g = 0.05, 0.9, 0.999, 1e-8, 0.7
    # hand computation for a scalar with constant gradient
    m1, v1 = (1 - b1) * g, (1 - b2) * g * g
    p1 = 2.0 - lr * (m1 / (1 - b1)) / ((v1 / (1 - b2)) ** 0.5 + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g, b2 * v1 + (1 - b2) * g * g
    p2 = p1 - lr * (m2 / (1 - b1**2)) / ((v2 / (1 - b2**2)) ** 0.5 + eps)
    p, s = np.array([2.0]), T.AdamState.zeros_like(np.array([2.0]))
    p, s = T.adam_step(p, np.array([g]), s, lr, b1, b2, eps)
    assert abs(p[0] - p1) <= 1e-12
    p, s = T.adam_step(p, np.array([g]), s, lr, b1, b2, eps)
    assert abs(p[0] - p2) <= 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        T.adam_step(np.ones(2), np.ones(3), T.AdamState.zeros_like(np.ones(2)))
