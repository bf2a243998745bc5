import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from expertchain import autograd as ag
from expertchain.autograd import ContractError, DimensionError, GradCheckError, Tensor


def leaf(data, name="x"):
    return Tensor(data, requires_grad=True, name=name)


finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.5, -2.0], [3.0, 0.25]])
        assert np.array_equal(ag.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_zero(self):
        x = np.array([[1.5, -2.0], [3.0, 0.25]])
        assert np.array_equal(ag.matmul(Tensor(np.zeros((2, 2))), Tensor(x)).data, np.zeros((2, 2)))

    def test_hand_product(self):
        out = ag.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        assert out.data.tolist() == [[19, 22], [43, 50]]

    def test_shape_error_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


class TestSoftmax:
    def test_symmetric_row(self):
        assert ag.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]

    def test_single_column(self):
        assert np.array_equal(ag.softmax_rows(Tensor([[3.0], [-7.0]])).data, np.ones((2, 1)))

    def test_log3_row(self):
        out = ag.softmax_rows(Tensor([[0.0, math.log(3)]])).data[0]
        assert out == pytest.approx([0.25, 0.75], abs=1e-15)

    def test_rows_sum_to_one_1000_draws(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            r, c = rng.integers(1, 8, 2)
            m = rng.normal(0, rng.uniform(0.1, 30), (r, c))
            out = ag.softmax_rows(Tensor(m)).data
            assert np.all(out >= 0)
            assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-9)

    @given(arrays(np.float64, (3, 4), elements=finite), finite)
    def test_shift_invariance(self, m, shift):
        a = ag.softmax_rows(Tensor(m)).data
        b = ag.softmax_rows(Tensor(m + shift)).data
        assert np.max(np.abs(a - b)) <= 1e-12


class TestElementwise:
    def test_sigmoid_points(self):
        assert ag.sigmoid(Tensor([[0.0]])).item() == 0.5
        assert abs(ag.sigmoid(Tensor([[40.0]])).item() - 1.0) <= 1e-12

    @given(arrays(np.float64, (2, 3), elements=st.floats(-700, 700)))
    def test_sigmoid_symmetry(self, x):
        s = ag.sigmoid(Tensor(x)).data
        s_neg = ag.sigmoid(Tensor(-x)).data
        assert np.all((s >= 0) & (s <= 1))
        assert np.max(np.abs(s_neg - (1 - s))) <= 1e-12

    def test_relu_cases(self):
        assert ag.relu(Tensor([[-1.0, 0.0, 2.0]])).data.tolist() == [[0.0, 0.0, 2.0]]
        assert np.array_equal(ag.relu(Tensor(-np.ones((2, 2)))).data, np.zeros((2, 2)))
        x = np.array([[0.5, 3.0]])
        assert np.array_equal(ag.relu(Tensor(x)).data, x)


class TestConcat:
    def test_hand_layout(self):
        out = ag.concat_cols(Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[1, 3], [2, 4]]

    def test_empty_right_operand(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ag.concat_cols(Tensor(a), Tensor(np.zeros((2, 0)))).data, a)

    def test_round_trip(self):
        a, b = np.arange(6.0).reshape(2, 3), np.arange(4.0).reshape(2, 2)
        out = ag.concat_cols(Tensor(a), Tensor(b)).data
        assert np.array_equal(out[:, :3], a) and np.array_equal(out[:, 3:], b)

    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            ag.concat_cols(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        g = ag.backward(ag.tensor_sum(x), {"x": x})
        assert np.array_equal(g["x"], np.ones((2, 3)))

    def test_unused_param_gets_exact_zero(self):
        x, p = leaf(np.ones((2, 2))), leaf(np.ones((3, 1)), "p")
        g = ag.backward(ag.tensor_sum(ag.mul(x, x)), {"x": x, "p": p})
        assert np.array_equal(g["p"], np.zeros((3, 1)))

    def test_sigmoid_slope_at_zero(self):
        x = leaf(np.zeros((2, 2)))
        g = ag.backward(ag.tensor_sum(ag.sigmoid(x)), {"x": x})
        assert np.array_equal(g["x"], np.full((2, 2), 0.25))

    def test_non_scalar_loss(self):
        x = leaf(np.ones((2, 2)))
        with pytest.raises(ContractError):
            ag.backward(ag.mul(x, 2.0), {"x": x})

    def test_shared_subexpression_accumulates(self):
        x = leaf([[3.0]])
        y = ag.mul(x, x)
        g = ag.backward(ag.tensor_sum(ag.add(y, y)), {"x": x})
        assert g["x"][0, 0] == pytest.approx(12.0)

    def test_topological_order_visits_each_node_once(self):
        x = leaf(np.ones((2, 2)))
        y = ag.mul(x, x)
        z = ag.add(y, ag.sigmoid(y))
        order = ag.topological_order(ag.tensor_sum(z))
        assert len(order) == len({id(n) for n in order})
        pos = {id(n): i for i, n in enumerate(order)}
        for n in order:
            for p in n._parents:
                assert pos[id(p)] < pos[id(n)]


class TestPurity:
    def test_inputs_are_not_mutated_and_reruns_bit_identical(self):
        rng = np.random.default_rng(3)
        a_np, b_np = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        a, b = leaf(a_np.copy(), "a"), leaf(b_np.copy(), "b")

        def run():
            h = ag.sigmoid(ag.matmul(a, b))
            return ag.tensor_sum(ag.softmax_rows(ag.relu(h)))

        first, second = run(), run()
        ag.backward(first, {"a": a, "b": b})
        assert np.array_equal(a.data, a_np) and np.array_equal(b.data, b_np)
        assert first.item() == second.item()

    def test_buffers_are_read_only(self):
        t = Tensor(np.ones((2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0


class TestGradCheck:
    def test_linear_is_exact(self):
        # dyadic values and step keep every perturbed evaluation exactly representable
        rng = np.random.default_rng(0)
        w = Tensor(rng.integers(-4, 5, (3, 2)) / 4.0)
        params = {"x": leaf(rng.integers(-8, 9, (2, 3)) / 8.0)}
        err = ag.grad_check(lambda p: ag.tensor_sum(ag.matmul(p["x"], w)), params, 2.0 ** -16)
        assert err < 1e-10

    def test_sum_of_squares(self):
        rng = np.random.default_rng(1)
        params = {"x": leaf(rng.normal(size=(4, 3)))}
        err = ag.grad_check(lambda p: ag.tensor_sum(ag.mul(p["x"], p["x"])), params, 1e-5)
        assert err < 1e-7

    def test_every_operation_in_one_graph(self):
        rng = np.random.default_rng(2)
        names = ["a", "b", "c", "r", "w", "lam"]
        shapes = [(3, 4), (4, 4), (3, 2), (1, 4), (3, 1), (3, 4)]
        params = {n: leaf(rng.normal(size=s), n) for n, s in zip(names, shapes)}
        params["lam"] = leaf(rng.uniform(0.1, 0.9, (3, 4)), "lam")

        def f(p):
            h = ag.add_row(ag.matmul(p["a"], p["b"]), p["r"])
            att = ag.softmax_rows(ag.mul(ag.matmul(h, ag.transpose(p["a"])), 0.5))
            mixed = ag.matmul(att, ag.relu(ag.sub(h, 0.1)))
            both = ag.concat_cols(ag.sigmoid(mixed), p["c"])
            picked = ag.take_cols(both, np.array([[0, 5], [2, 3], [4, 4]]))
            rows = ag.take_rows(ag.scale_rows(mixed, p["w"]), [2, 0, 2])
            spread = ag.scatter_rows(ag.take_rows(rows, [0, 1]), [1, 2], 3)
            fused = ag.convex_mix(p["a"], ag.add(spread, ag.exp(ag.mul(p["a"], 0.3))), p["lam"])
            pooled = ag.concat_rows([ag.mean_rows(fused), ag.mean_rows(h)])
            ce = ag.cross_entropy_rows(ag.matmul(pooled, ag.transpose(p["b"])), [1, 3])
            return ag.add(ce, ag.tensor_sum(ag.log(ag.add(ag.mul(picked, picked), 1.0))))

        assert ag.grad_check(f, params, 1e-5) < 1e-4

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_non_finite_evaluation(self):
        params = {"x": leaf([[1e-6]])}
        with pytest.raises(GradCheckError):
            ag.grad_check(lambda p: ag.tensor_sum(ag.mul(1e308, ag.exp(ag.mul(p["x"], 1e9)))), params, 1e-5)

    def test_eps_range(self):
        with pytest.raises(ContractError):
            ag.grad_check(lambda p: ag.tensor_sum(p["x"]), {"x": leaf([[1.0]])}, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_composed_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = {"x": leaf(rng.normal(size=(2, 3))), "y": leaf(rng.normal(size=(3, 3)), "y")}

    def f(p):
        h = ag.softmax_rows(ag.matmul(p["x"], p["y"]))
        return ag.cross_entropy_rows(ag.add(ag.sigmoid(h), ag.matmul(p["x"], p["y"])), [0, 2])

    assert ag.grad_check(f, params, 1e-5) < 1e-4
