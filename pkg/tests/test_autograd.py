import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import gradcheck
from oracles import Adam as RefAdam, gelu_ref, softmax_ref
from splitfed import autograd as ag
from splitfed.autograd import Tensor
from splitfed.errors import ContractError, DimensionError


def t(x, grad=True):
    return ag.parameter(np.asarray(x, dtype=np.float32)) if grad else Tensor(x)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1, 2], [3, 4]], dtype=np.float32)
        np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)

    def test_direct(self):
        out = Tensor([[1, 2], [3, 4]]) @ Tensor([[1], [1]])
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_grad_formula(self):
        rng = np.random.default_rng(3)
        a, b = t(rng.standard_normal((3, 4))), t(rng.standard_normal((4, 2)))
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-6)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)), rtol=1e-6)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.0], dtype=np.float32)
        np.testing.assert_allclose(ag.softmax(Tensor(x + 7.5)).data, ag.softmax(Tensor(x)).data,
                                   atol=1e-6)

    def test_high_precision(self):
        np.testing.assert_allclose(ag.softmax(Tensor([1.0, 2.0, 3.0])).data,
                                   softmax_ref([1.0, 2.0, 3.0]), atol=1e-6)

    def test_large_inputs_stay_finite(self):
        y = ag.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [0.5, 0.5, 0.0], atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, xs):
        y = ag.softmax(Tensor(xs)).data
        assert abs(float(y.sum()) - 1) <= 1e-6
        assert np.all((y >= 0) & (y <= 1))


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = ag.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0)

    def test_zero_gain_gives_beta(self):
        rng = np.random.default_rng(0)
        beta = rng.standard_normal(5).astype(np.float32)
        out = ag.layer_norm(Tensor(rng.standard_normal((3, 5))), Tensor(np.zeros(5)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (3, 5)))

    def test_normalises(self):
        x = np.random.default_rng(1).standard_normal((4, 16)) * 3 + 2
        y = ag.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(-1), 0, atol=1e-5)
        np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)

    def test_bad_gamma(self):
        with pytest.raises(DimensionError):
            ag.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class TestGelu:
    def test_values(self):
        y = ag.gelu(Tensor([0.0, 10.0, 1.0, -1.0])).data
        assert y[0] == 0
        assert abs(y[1] - 10) <= 1e-6
        assert abs(y[2] - 0.841345) <= 1e-6
        assert abs(y[3] - gelu_ref(-1.0)) <= 1e-6

    def test_matches_erf_form(self):
        xs = np.linspace(-6, 6, 101)
        np.testing.assert_allclose(ag.gelu(Tensor(xs)).data, [gelu_ref(x) for x in xs], atol=1e-6)


class TestCrossEntropy:
    def test_uniform(self):
        loss = ag.cross_entropy(Tensor(np.zeros((3, 7))), np.array([0, 3, 6]))
        assert abs(loss.item() - math.log(7)) <= 1e-6

    def test_oracle(self):
        loss = ag.cross_entropy(Tensor([[2.0, 0.0]]), np.array([0]))
        assert abs(loss.item() - (-math.log(math.e**2 / (math.e**2 + 1)))) <= 1e-6
        assert abs(loss.item() - 0.126928) <= 1e-6

    def test_all_ignored(self):
        x = t(np.random.default_rng(0).standard_normal((4, 3)))
        loss = ag.cross_entropy(x, np.full(4, ag.IGNORE_INDEX))
        loss.backward()
        assert loss.item() == 0
        np.testing.assert_array_equal(x.grad, 0)

    def test_ignored_rows_get_no_gradient(self):
        x = t(np.random.default_rng(0).standard_normal((4, 3)))
        ag.cross_entropy(x, np.array([1, -1, 2, -1])).backward()
        np.testing.assert_array_equal(x.grad[[1, 3]], 0)
        assert np.all(x.grad[[0, 2]] != 0)

    def test_out_of_range_target(self):
        with pytest.raises(DimensionError):
            ag.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestBackward:
    def test_linear(self):
        w = t(np.ones(3))
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, [1, 1, 1])

    def test_quadratic(self):
        w = t([1.0, 2.0, 3.0])
        (w * w).sum().backward()
        np.testing.assert_array_equal(w.grad, [2, 4, 6])

    def test_accumulates_across_calls(self):
        w = t([1.0, 2.0])
        (w * w).sum().backward()
        (w * w).sum().backward()
        np.testing.assert_array_equal(w.grad, [4, 8])
        w.zero_grad()
        assert w.grad is None

    def test_fan_out_accumulates(self):
        w = t([3.0])
        (w * 2.0 + w * w + w).sum().backward()
        np.testing.assert_array_equal(w.grad, [2 + 6 + 1])

    def test_diamond_visits_each_node_once(self):
        x = t([1.5])
        a = x * x
        b = a + a
        (b * a).sum().backward()
        # b*a = 2x^4, derivative 8x^3
        np.testing.assert_allclose(x.grad, [8 * 1.5**3], rtol=1e-6)

    def test_non_scalar_needs_seed(self):
        with pytest.raises(ContractError):
            (t([1.0, 2.0]) * 2.0).backward()

    def test_seed_shape_checked(self):
        with pytest.raises(DimensionError):
            (t([1.0, 2.0]) * 2.0).backward(np.ones(3, dtype=np.float32))

    def test_deterministic(self):
        def grads():
            rng = np.random.default_rng(5)
            a, b = t(rng.standard_normal((4, 5))), t(rng.standard_normal((5, 3)))
            ag.cross_entropy(ag.gelu(a @ b), np.array([0, 1, 2, -1])).backward()
            return a.grad, b.grad
        for x, y in zip(grads(), grads()):
            assert x.tobytes() == y.tobytes()

    def test_no_grad_records_nothing(self):
        w = t([1.0])
        with ag.no_grad():
            y = w * 3.0
        assert not y.requires_grad

    def test_float32_by_default(self):
        assert (t([1.0]) * 2.0).data.dtype == np.float32
        with ag.precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64


class TestDropout:
    def test_eval_is_identity(self):
        x = Tensor(np.ones((3, 3)))
        assert ag.dropout(x, 0.5, None, train=False) is x

    def test_train_needs_rng(self):
        with pytest.raises(ContractError):
            ag.dropout(Tensor(np.ones(3)), 0.5, None, train=True)

    def test_inverted_scaling(self):
        y = ag.dropout(Tensor(np.ones(100_000)), 0.2, np.random.default_rng(0), True).data
        assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.8)}
        assert abs(float((y == 0).mean()) - 0.2) <= 0.01


class TestEmbedding:
    def test_repeated_ids_accumulate(self):
        w = t(np.arange(6.0).reshape(3, 2))
        ag.embedding(w, np.array([[0, 2, 0]])).sum().backward()
        np.testing.assert_array_equal(w.grad, [[2, 2], [0, 0], [1, 1]])

    def test_range(self):
        with pytest.raises(DimensionError):
            ag.embedding(t(np.zeros((3, 2))), np.array([3]))


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = {"w": np.array([1.5, -2.0], dtype=np.float32)}
        before = p["w"].copy()
        state = ag.AdamState(lr=0.1)
        for _ in range(3):
            ag.adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, state)
        assert p["w"].tobytes() == before.tobytes()
        assert state.step == 3

    def test_first_step_magnitude_is_lr(self):
        for g in (1e-3, 0.5, -40.0):
            p = {"w": np.array([0.0], dtype=np.float32)}
            ag.adam_step(p, {"w": np.array([g], dtype=np.float32)}, ag.AdamState(lr=0.01))
            assert abs(abs(float(p["w"][0])) - 0.01) <= 1e-5
            assert np.sign(p["w"][0]) == -np.sign(g)

    def test_quadratic_trajectory_matches_reference(self):
        w = ag.parameter(np.array([3.0], dtype=np.float32))
        opt = ag.Adam({"w": w}, lr=0.1)
        ref, rw = RefAdam(0.1), 3.0
        for _ in range(5):
            opt.zero_grad()
            ((w - 1.0) * (w - 1.0)).sum().backward()
            opt.step()
            rw = ref.step(rw, 2 * (rw - 1.0))
            assert abs(float(w.data[0]) - rw) <= 1e-6
        assert opt.state.step == 5

    def test_moments_start_at_zero(self):
        state = ag.AdamState(lr=1.0)
        ag.adam_step({"w": np.ones(2, dtype=np.float32)}, {"w": np.ones(2, dtype=np.float32)}, state)
        np.testing.assert_allclose(state.m["w"], 0.1)
        np.testing.assert_allclose(state.v["w"], 0.001)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ag.adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, ag.AdamState(lr=1.0))

    def test_frozen_names_do_not_move(self):
        a, b = t([1.0]), t([1.0])
        opt = ag.Adam({"a": a, "b": b}, lr=0.1, frozen={"b"})
        (a * b).sum().backward()
        opt.step()
        assert a.data[0] != 1.0 and b.data[0] == 1.0
        assert opt.trainable() == ["a"]


@pytest.mark.parametrize("op", sorted(gradcheck.OPS))
def test_op_gradients_few_seeds(op):
    worst = max(gradcheck.op_error(op, seed) for seed in range(5))
    assert worst <= gradcheck.TOL
