import math

import numpy as np
import pytest

from expertchain import autograd as ag
from expertchain.autograd import ContractError, DimensionError, Tensor
from expertchain.fusion import (
    AttentionParams,
    GateParams,
    attention_weights,
    baseline_gate,
    cross_attention,
    gated_fuse,
)


def attn(wq, wk, wv):
    return AttentionParams(Tensor(wq), Tensor(wk), Tensor(wv))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestCrossAttention:
    def test_single_patch_gets_all_weight(self, rng):
        p = AttentionParams.init(4, rng)
        ft, fi = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(1, 4)))
        out = cross_attention(ft, fi, p).data
        value = fi.data @ p.wv.data
        assert np.allclose(out, np.repeat(value, 5, axis=0), rtol=0, atol=1e-15)

    def test_zero_query_is_uniform(self, rng):
        d = 3
        p = attn(np.zeros((d, d)), rng.normal(size=(d, d)), rng.normal(size=(d, d)))
        ft, fi = Tensor(rng.normal(size=(2, d))), Tensor(rng.normal(size=(4, d)))
        out = cross_attention(ft, fi, p).data
        mean_value = (fi.data @ p.wv.data).mean(axis=0)
        assert np.allclose(out, np.tile(mean_value, (2, 1)), atol=1e-14)

    def test_hand_mix(self):
        # logits: (sqrt2 ln3 * 1)/sqrt2 = ln3 and 0, so weights are 3/4 and 1/4
        eye = np.eye(2)
        ft = Tensor([[math.sqrt(2) * math.log(3), 0.0]])
        fi = Tensor([[1.0, 2.0], [0.0, 4.0]])
        out = cross_attention(ft, fi, attn(eye, eye, eye)).data
        assert out[0] == pytest.approx([0.75, 2.5], abs=1e-14)

    def test_width_mismatch(self, rng):
        p = AttentionParams.init(4, rng)
        with pytest.raises(DimensionError):
            cross_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 5))), p)

    def test_weights_are_row_stochastic_1000_draws(self, rng):
        for _ in range(1000):
            d, n, m = rng.integers(1, 6, 3)
            p = attn(*(rng.normal(0, 2, (d, d)) for _ in range(3)))
            w = attention_weights(Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(m, d))), p).data
            assert np.all(np.abs(w.sum(axis=1) - 1) <= 1e-9)

    def test_output_rows_are_convex_combinations(self, rng):
        p = AttentionParams.init(3, rng)
        fi = Tensor(rng.normal(size=(4, 3)))
        out = cross_attention(Tensor(rng.normal(size=(6, 3))), fi, p).data
        v = fi.data @ p.wv.data
        assert np.all(out <= v.max(axis=0) + 1e-12) and np.all(out >= v.min(axis=0) - 1e-12)

    def test_patch_permutation_equivariance(self, rng):
        p = AttentionParams.init(5, rng)
        ft, fi = rng.normal(size=(3, 5)), rng.normal(size=(6, 5))
        perm = rng.permutation(6)
        a = cross_attention(Tensor(ft), Tensor(fi), p).data
        b = cross_attention(Tensor(ft), Tensor(fi[perm]), p).data
        assert np.allclose(a, b, atol=1e-13)


class TestBaselineGate:
    def test_zero_weights_give_half(self, rng):
        g = GateParams(Tensor(np.zeros((3, 3))), Tensor(np.zeros((3, 3))))
        lam = baseline_gate(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3))), g).data
        assert np.array_equal(lam, np.full((2, 3), 0.5))

    def test_saturates_toward_one(self, rng):
        g = GateParams(Tensor(np.eye(3)), Tensor(2 * np.eye(3)))
        ft, h = np.abs(rng.normal(size=(2, 3))) + 0.1, np.abs(rng.normal(size=(2, 3))) + 0.1
        small = baseline_gate(Tensor(ft), Tensor(h), g).data
        large = baseline_gate(Tensor(50 * ft), Tensor(50 * h), g).data
        assert np.all(large > small) and np.all(large > 1 - 1e-6)

    def test_negation_maps_to_complement(self, rng):
        g = GateParams.init(4, rng)
        ft, h = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        lam = baseline_gate(Tensor(ft), Tensor(h), g).data
        neg = baseline_gate(Tensor(-ft), Tensor(-h), g).data
        assert np.allclose(neg, 1 - lam, atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            baseline_gate(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), GateParams.init(3, rng))


class TestGatedFuse:
    def test_endpoints(self, rng):
        ft, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        assert np.array_equal(gated_fuse(Tensor(ft), Tensor(h), Tensor(np.zeros((2, 3)))).data, ft)
        assert np.array_equal(gated_fuse(Tensor(ft), Tensor(h), Tensor(np.ones((2, 3)))).data, h)

    def test_midpoint(self):
        out = gated_fuse(Tensor(np.zeros((2, 2))), Tensor(np.full((2, 2), 2.0)), Tensor(np.full((2, 2), 0.5)))
        assert np.array_equal(out.data, np.ones((2, 2)))

    def test_gate_outside_unit_interval(self):
        with pytest.raises(ContractError):
            gated_fuse(Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2))), Tensor([[0.5, 1.5]]))

    def test_convexity(self, rng):
        for _ in range(1000):
            shape = tuple(rng.integers(1, 5, 2))
            ft, h = rng.normal(0, 10, shape), rng.normal(0, 10, shape)
            lam = rng.uniform(0, 1, shape)
            lam[rng.uniform(size=shape) < 0.1] = 0.0
            out = gated_fuse(Tensor(ft), Tensor(h), Tensor(lam)).data
            assert np.all(out >= np.minimum(ft, h)) and np.all(out <= np.maximum(ft, h))


def test_fusion_gradients(rng):
    d = 4
    params = {
        "ft": Tensor(rng.normal(size=(3, d)), requires_grad=True),
        "fi": Tensor(rng.normal(size=(5, d)), requires_grad=True),
        **AttentionParams.init(d, rng).named(),
        **GateParams.init(d, rng).named(),
    }

    def f(p):
        a = AttentionParams(p["attn.wq"], p["attn.wk"], p["attn.wv"])
        h = cross_attention(p["ft"], p["fi"], a)
        lam = baseline_gate(p["ft"], h, GateParams(p["gate.wl"], p["gate.wv"]))
        fused = gated_fuse(p["ft"], h, lam)
        return ag.tensor_sum(ag.mul(fused, fused))

    assert ag.grad_check(f, params, 1e-5) < 1e-4
