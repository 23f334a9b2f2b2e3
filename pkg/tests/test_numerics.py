import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from baton.errors import DegenerateMaskError, InvalidShapeError, TrainingDivergenceError
from baton.numerics import (
    AdamW,
    Mlp,
    RngStream,
    adamw_step,
    attention,
    derive_seed,
    grad_check,
    joint_attention,
    mlp_apply,
    rng_tensor,
    seeded_init,
)

from conftest import F64, normal


class TestRngStream:
    def test_splitmix64_reference_values(self):
        # published SplitMix64 outputs for seed 0
        rng = RngStream(0)
        assert [rng.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]

    @given(st.integers(0, 2**64 - 1), st.integers(1, 40))
    def test_bulk_matches_scalar(self, seed, n):
        a, b = RngStream(seed), RngStream(seed)
        assert a.u64(n).tolist() == [b.next_u64() for _ in range(n)]
        assert a.state == b.state

    def test_rng_tensor_twice_differs_and_reseeding_reproduces(self):
        rng = RngStream(42)
        first = rng_tensor(rng, [2])
        second = rng_tensor(rng, [2])
        assert not torch.equal(first, second)
        assert torch.equal(rng_tensor(RngStream(42), [2]), first)

    def test_shape(self):
        assert rng_tensor(RngStream(1), [2, 3]).numel() == 6

    def test_normal_sigma(self):
        x = rng_tensor(RngStream(7), [100_000], "normal", 0.02)
        assert abs(float(x.std()) / 0.02 - 1.0) < 0.02

    def test_uniform_range(self):
        u = RngStream(3).uniform(10_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.01

    def test_integers_and_permutation(self):
        rng = RngStream(5)
        vals = rng.integers(2, 7, 1000)
        assert vals.min() == 2 and vals.max() == 6
        assert sorted(rng.permutation(20).tolist()) == list(range(20))

    def test_derive_seed_separates_streams(self):
        assert len({derive_seed(0, i) for i in range(100)}) == 100
        assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)

    @pytest.mark.parametrize("shape", [[], [0], [2, -1]])
    def test_bad_shape(self, shape):
        with pytest.raises(InvalidShapeError):
            rng_tensor(RngStream(0), shape)

    def test_bad_distribution(self):
        with pytest.raises(ValueError):
            rng_tensor(RngStream(0), [2], "cauchy")
        with pytest.raises(ValueError):
            rng_tensor(RngStream(0), [2], "normal", 0.0)


class TestAttention:
    def test_single_key_returns_its_value(self):
        q, k, v = normal(1, 3, 4), normal(2, 1, 4), normal(3, 1, 5)
        assert torch.allclose(attention(q, k, v), v.expand(3, 5), atol=0, rtol=0)

    def test_identical_keys_average_values(self):
        k = normal(2, 1, 4).repeat(2, 1)
        v = normal(3, 2, 5)
        out = attention(normal(1, 3, 4), k, v)
        assert torch.allclose(out, v.mean(0).expand(3, 5), atol=1e-15)

    def test_direct_softmax_oracle(self):
        q, k, v = normal(4, 3, 4), normal(5, 3, 4), normal(6, 3, 2)
        logits = q.numpy() @ k.numpy().T / 2.0
        w = np.exp(logits - logits.max(1, keepdims=True))
        want = (w / w.sum(1, keepdims=True)) @ v.numpy()
        assert np.abs(attention(q, k, v).numpy() - want).max() < 1e-12

    def test_rows_are_stochastic(self):
        q, k = normal(7, 6, 8), normal(8, 9, 8)
        weights = attention(q, k, torch.eye(9, dtype=F64))
        assert (weights.sum(-1) - 1).abs().max() < 1e-12
        w32 = attention(q.float(), k.float(), torch.eye(9))
        assert (w32.sum(-1) - 1).abs().max() < 1e-6

    def test_mask_hides_keys(self):
        q, k, v = normal(1, 2, 4), normal(2, 3, 4), normal(3, 3, 2)
        mask = torch.tensor([[True, False, False], [True, True, False]])
        out = attention(q, k, v, mask)
        assert torch.equal(out[0], v[0])
        assert torch.allclose(out[1], attention(q[1:], k[:2], v[:2])[0], atol=1e-15)

    def test_degenerate_mask(self):
        q, k, v = normal(1, 2, 4), normal(2, 3, 4), normal(3, 3, 2)
        with pytest.raises(DegenerateMaskError):
            attention(q, k, v, torch.tensor([[True, False, False], [False, False, False]]))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShapeError):
            attention(normal(1, 2, 4), normal(2, 3, 5), normal(3, 3, 2))

    def test_joint_equals_concatenated_keys(self):
        q = normal(1, 3, 4)
        k1, v1, k2, v2 = normal(2, 2, 4), normal(3, 2, 5), normal(4, 3, 4), normal(5, 3, 5)
        joint = joint_attention([(q, k1, v1), (q, k2, v2)])
        assert torch.allclose(joint, attention(q, torch.cat([k1, k2]), torch.cat([v1, v2])), atol=1e-14)


class TestMlp:
    def test_identity_layer(self):
        m = Mlp((4, 4), activation="identity").double()
        with torch.no_grad():
            m.layers[0].weight.copy_(torch.eye(4))
            m.layers[0].bias.zero_()
        x = normal(1, 3, 4)
        assert torch.equal(mlp_apply(m, x), x)

    def test_zero_weights_give_bias(self):
        m = Mlp((4, 3)).double()
        b = torch.tensor([1.0, -2.0, 0.5], dtype=F64)
        with torch.no_grad():
            m.layers[0].weight.zero_()
            m.layers[0].bias.copy_(b)
        assert torch.equal(m(normal(1, 5, 4)), b.expand(5, 3))

    def test_two_layer_gelu_oracle(self):
        m = Mlp((4, 6, 3)).double()
        seeded_init(m, RngStream(9))
        x = normal(2, 5, 4).numpy()
        w1, b1 = m.layers[0].weight.detach().numpy(), m.layers[0].bias.detach().numpy()
        w2, b2 = m.layers[1].weight.detach().numpy(), m.layers[1].bias.detach().numpy()
        h = x @ w1.T + b1
        h = 0.5 * h * (1 + np.vectorize(math.erf)(h / math.sqrt(2)))
        assert np.abs(m(torch.from_numpy(x)).detach().numpy() - (h @ w2.T + b2)).max() < 1e-12

    def test_width_mismatch(self):
        with pytest.raises(InvalidShapeError):
            Mlp((4, 3))(torch.zeros(2, 5))
        with pytest.raises(InvalidShapeError):
            Mlp((4,))

    def test_seeded_init_is_deterministic(self):
        a, b = Mlp((4, 6, 3)), Mlp((4, 6, 3))
        seeded_init(a, RngStream(1))
        seeded_init(b, RngStream(1))
        assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
        assert torch.count_nonzero(a.layers[0].bias) == 0


class TestAdamW:
    def test_pure_decay(self):
        p = torch.tensor([2.0, -3.0], dtype=F64)
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
        adamw_step(opt, {"p": torch.zeros(2, dtype=F64)})
        assert torch.equal(p, torch.tensor([2.0, -3.0], dtype=F64) * (1 - 0.1 * 0.5))

    def test_first_step_hand_formula(self):
        p = torch.tensor([1.0], dtype=F64)
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
        adamw_step(opt, {"p": torch.tensor([1.0], dtype=F64)})
        # m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1
        want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8)
        assert float(p) == pytest.approx(want, abs=1e-15)

    def test_second_step_hand_formula(self):
        p = torch.tensor([1.0], dtype=F64)
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.01)
        want, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate((1.0, -0.5), start=1):
            adamw_step(opt, {"p": torch.tensor([g], dtype=F64)})
            want *= 1 - 0.1 * 0.01
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            want -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert float(p) == pytest.approx(want, abs=1e-14)

    def test_determinism(self):
        def run():
            m = Mlp((3, 4, 2)).double()
            seeded_init(m, RngStream(0))
            opt = AdamW(m.named_parameters(), lr=1e-2)
            x, y = normal(1, 8, 3), normal(2, 8, 2)
            for _ in range(100):
                opt.zero_grad()
                ((m(x) - y) ** 2).sum().backward()
                opt.step()
            return [p.detach().clone() for p in m.parameters()]

        assert all(torch.equal(a, b) for a, b in zip(run(), run()))

    def test_rejects_bad_gradients(self):
        p = torch.zeros(2, dtype=F64)
        opt = AdamW([("p", p)])
        with pytest.raises(InvalidShapeError):
            opt.step({"p": torch.zeros(3, dtype=F64)})
        with pytest.raises(TrainingDivergenceError):
            opt.step({"p": torch.tensor([math.nan, 0.0], dtype=F64)})


class TestGradCheck:
    def test_quadratic(self):
        p = normal(1, 5).requires_grad_()
        assert grad_check(lambda: (p**2).sum(), [p], eps=1e-5) < 1e-10

    def test_scaled_gradient_is_flagged(self, monkeypatch):
        monkeypatch.setenv("BATON_INJECT_FAULT", "grad_scale")
        p = normal(1, 5).requires_grad_()
        err = grad_check(lambda: (p**2).sum(), [p], eps=1e-5)
        assert err == pytest.approx(1e-2, rel=0.02)

    def test_explicit_wrong_gradient(self):
        p = normal(2, 4).requires_grad_()
        assert grad_check(lambda: (p**3).sum(), [p], grads=[2 * p.detach()]) > 0.1

    def test_richardson_on_mlp(self):
        m = Mlp((3, 5, 2)).double()
        seeded_init(m, RngStream(4))
        x = normal(3, 4, 3)
        loss = lambda: (m(x) ** 2).sum()  # noqa: E731
        assert grad_check(loss, list(m.parameters()), eps=1e-3, richardson=True) < 1e-8

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000))
    def test_zero_gradient_is_not_noise(self, seed):
        # a constant shift of every key leaves softmax unchanged: exact zero gradient
        q, k, v = normal(seed, 3, 4), normal(seed + 1, 5, 4), normal(seed + 2, 5, 2)
        bias = torch.zeros(4, dtype=F64, requires_grad=True)
        loss = lambda: (attention(q, k + bias, v) ** 2).sum()  # noqa: E731
        assert grad_check(loss, [bias], eps=1e-3, richardson=True) < 1e-4
