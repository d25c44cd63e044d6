import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipstop.errors import DataError
from clipstop.nets import (
    STOP,
    AgentNets,
    AttentionPooler,
    MeanPooler,
    action_distribution,
    actor_forward,
    attention_pool,
    critic_forward,
    predictor_forward,
    softmax_pool,
)
from clipstop.nn import MLP, MLPSpec
from oracles import numeric_grad, pool_reference, rel_error


def _bag(rng, n_valid, n_pad, D):
    x = np.zeros((n_valid + n_pad, D))
    x[:n_valid] = rng.normal(size=(n_valid, D))
    valid = np.zeros(n_valid + n_pad, dtype=bool)
    valid[:n_valid] = True
    return x, valid


class TestPooling:
    def test_hand_example(self):
        h = np.array([[1.0], [3.0]])
        w = np.array([[0.0], [math.log(3)]])
        h_bar, beta = attention_pool(h, np.array([True, True]), weights=w)
        assert abs(beta[0, 0] - 0.25) <= 1e-12 and abs(beta[1, 0] - 0.75) <= 1e-12
        assert abs(h_bar[0] - 2.5) <= 1e-12

    def test_singleton(self, rng):
        x, valid = _bag(rng, 1, 3, 5)
        h_bar, beta = AttentionPooler(5, rng).forward(x, valid)
        np.testing.assert_array_equal(beta[0], np.ones(5))
        np.testing.assert_array_equal(beta[1:], 0.0)
        np.testing.assert_allclose(h_bar, x[0], rtol=1e-15)

    def test_equal_weights_give_mean(self, rng):
        x = rng.normal(size=(2, 3))
        h_bar, _ = softmax_pool(x, np.ones((2, 3)), np.array([True, True]))
        np.testing.assert_allclose(h_bar, x.mean(axis=0), rtol=1e-15)

    def test_matches_reference(self, rng):
        pooler = AttentionPooler(4, rng)
        x, valid = _bag(rng, 5, 2, 4)
        h_bar, beta = pooler.forward(x, valid)
        w = np.tanh(x @ pooler.dense.W.values + pooler.dense.b.values)
        ref_h, ref_beta = pool_reference(x.tolist(), w.tolist(), valid.tolist())
        np.testing.assert_allclose(h_bar, ref_h, atol=1e-12)
        np.testing.assert_allclose(beta, ref_beta, atol=1e-12)

    def test_no_valid_slot(self, rng):
        with pytest.raises(ValueError):
            AttentionPooler(2, rng).forward(np.zeros((3, 2)), np.zeros(3, dtype=bool))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n_valid=st.integers(1, 8), n_pad=st.integers(0, 5), D=st.integers(1, 6))
    def test_permutation_padding_and_column_sums(self, seed, n_valid, n_pad, D):
        rng = np.random.default_rng(seed)
        pooler = AttentionPooler(D, rng)
        x, valid = _bag(rng, n_valid, n_pad, D)
        h_bar, beta = pooler.forward(x, valid)
        np.testing.assert_allclose(beta[valid].sum(axis=0), 1.0, atol=1e-9)
        assert np.all(beta[~valid] == 0.0)
        perm = rng.permutation(n_valid)
        xp = x.copy()
        xp[:n_valid] = x[perm]
        hp, bp = pooler.forward(xp, valid)
        np.testing.assert_allclose(hp, h_bar, atol=1e-12)
        np.testing.assert_allclose(bp[:n_valid], beta[perm], atol=1e-12)
        junk = x.copy()
        junk[~valid] = rng.normal(size=(n_pad, D)) * 100
        hj, bj = pooler.forward(junk, valid)
        assert np.array_equal(hj, h_bar) and np.array_equal(bj, beta)

    def test_mean_pooler_example(self):
        h_bar, beta = MeanPooler().forward(np.array([[1.0, 3.0], [3.0, 1.0], [9.0, 9.0]]), np.array([True, True, False]))
        np.testing.assert_array_equal(h_bar, [2.0, 2.0])
        np.testing.assert_array_equal(beta[2], 0.0)


class TestHeads:
    def test_zero_actor_uniform(self):
        actor = MLP(MLPSpec((3, 4, 4, 4), output="softmax"))
        dist = actor_forward(np.ones(3), np.ones(4, dtype=bool), actor)
        np.testing.assert_array_equal(dist.probs, [0.25] * 4)
        assert dist.entropy == pytest.approx(math.log(4), abs=1e-15)

    def test_stop_only(self):
        dist = action_distribution(np.array([3.0, -1.0, 2.0, 0.5]), np.array([False, False, False, True]))
        np.testing.assert_array_equal(dist.probs, [0, 0, 0, 1])
        assert dist.entropy == 0.0
        assert dist.sample(np.random.default_rng(0)) == STOP

    def test_softmax_example(self):
        dist = action_distribution(np.array([1.0, 1.0, 1.0, 1.0 - math.log(2)]), np.ones(4, dtype=bool))
        # a logit gap of ln 2 halves the probability: exp weights (e, e, e, e/2)
        np.testing.assert_allclose(dist.probs, [2 / 7, 2 / 7, 2 / 7, 1 / 7], rtol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(
        logits=st.lists(st.floats(-30, 30), min_size=4, max_size=4),
        mask=st.lists(st.booleans(), min_size=4, max_size=4).filter(any),
    )
    def test_entropy_bounds(self, logits, mask):
        dist = action_distribution(np.array(logits), np.array(mask))
        assert -1e-12 <= dist.entropy <= math.log(sum(mask)) + 1e-12
        assert np.all(dist.probs[~np.array(mask)] == 0)

    def test_sample_respects_mask(self):
        rng = np.random.default_rng(1)
        mask = np.array([True, False, True, False])
        dist = action_distribution(np.zeros(4), mask)
        draws = [dist.sample(rng) for _ in range(2000)]
        assert set(draws) == {0, 2}
        assert abs(np.mean(np.array(draws) == 0) - 0.5) < 0.05

    def test_log_prob(self, rng):
        dist = action_distribution(rng.normal(size=(5, 4)), np.ones((5, 4), dtype=bool))
        a = rng.integers(0, 4, size=5)
        np.testing.assert_allclose(np.exp(dist.log_prob(a)), dist.probs[np.arange(5), a], rtol=1e-12)

    def test_critic_examples(self, rng):
        nets = AgentNets(2, rng=rng)
        for layer in nets.critic.layers[-1:]:
            layer.W.values[...] = 0.0
        v, _ = critic_forward(np.array([[1.0, 2.0]]), np.array([True]), nets)
        assert v == 0.0
        nets.critic = MLP(MLPSpec((2, 1)))
        nets.critic.layers[0].W.values[...] = 1.0
        v, h_bar = critic_forward(np.array([[1.0, 2.0]]), np.array([True]), nets)
        assert v == 3.0
        np.testing.assert_array_equal(h_bar, [1.0, 2.0])

    def test_predictor_examples(self):
        pred = MLP(MLPSpec((3, 4, 4, 1), output="sigmoid"))
        y_hat = predictor_forward(np.ones(3), pred)
        assert y_hat == 0.5 and int(y_hat >= 0.5) == 1
        pred.layers[-1].b.values[...] = math.log(3)
        assert predictor_forward(np.ones(3), pred) == pytest.approx(0.75, abs=1e-15)
        pred.layers[-1].b.values[...] = 800.0
        assert predictor_forward(np.ones(3), pred) == 1.0

    def test_padding_leaves_all_heads_bit_identical(self, rng):
        nets = AgentNets(3, hidden=8, rng=rng)
        x, valid = _bag(rng, 3, 4, 3)
        mask = np.array([True, True, False, True])
        a = nets.forward(x[None], valid[None], mask[None])
        x2 = x.copy()
        x2[~valid] = 7.0
        b = nets.forward(x2[None], valid[None], mask[None])
        for name in ("h_bar", "value", "y_hat"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert np.array_equal(a.dist.probs, b.dist.probs)


def _heads(rng, mode="full", through=False):
    nets = AgentNets(3, mode=mode, hidden=5, rng=rng, policy_through_pooler=through)
    x, valid = _bag(rng, 3, 1, 3)
    X, V = x[None], valid[None]
    M = np.array([[True, True, False, True]])
    return nets, X, V, M


class TestRouting:
    def _grads(self, nets):
        return {k: p.grad.copy() for k, p in nets.named_params().items()}

    def test_policy_loss_skips_pooler(self, rng):
        nets, X, V, M = _heads(rng)
        nets.forward(X, V, M)
        gx = nets.backward(g_logits=rng.normal(size=(1, 4)))
        g = self._grads(nets)
        assert gx is None
        assert all(not v.any() for k, v in g.items() if not k.startswith("actor"))
        assert any(v.any() for k, v in g.items() if k.startswith("actor"))

    def test_policy_flag_reaches_pooler(self, rng):
        nets, X, V, M = _heads(rng, through=True)
        nets.forward(X, V, M)
        nets.backward(g_logits=rng.normal(size=(1, 4)))
        assert nets.named_params()["pooler.0.W"].grad.any()

    def test_value_loss_skips_actor(self, rng):
        nets, X, V, M = _heads(rng)
        nets.forward(X, V, M)
        nets.backward(g_value=np.ones(1))
        g = self._grads(nets)
        assert all(not v.any() for k, v in g.items() if k.startswith(("actor", "predictor")))
        assert g["pooler.0.W"].any() and g["critic.0.W"].any()

    def test_combined_pooler_grad_is_sum_of_paths(self, rng):
        nets, X, V, M = _heads(rng)
        gv, gc, gl = np.array([0.7]), np.array([-1.3]), rng.normal(size=(1, 4))

        def pooler_grad(**kw):
            nets.zero_grad()
            nets.forward(X, V, M)
            nets.backward(**kw)
            return nets.named_params()["pooler.0.W"].grad.copy()

        both = pooler_grad(g_value=gv, g_pred_logit=gc, g_logits=gl)
        np.testing.assert_allclose(both, pooler_grad(g_value=gv) + pooler_grad(g_pred_logit=gc), rtol=1e-12)

        def loss():
            fw = nets.forward(X, V, M)
            logit = nets.predictor.logits(fw.h_bar)[..., 0]
            return float(gv @ fw.value + gc @ logit)

        W = nets.named_params()["pooler.0.W"].values
        assert rel_error(both, numeric_grad(loss, W)) < 1e-4

    def test_ab_modes(self, rng):
        ab2 = AgentNets(3, mode="AB2", hidden=4, rng=rng)
        assert not any(k.startswith("pooler") for k in ab2.named_params())
        ab1 = AgentNets(4, mode="AB1", hidden=4, rng=rng)
        assert ab1.predictor is None
        with pytest.raises(ValueError):
            ab1.predict_from_pooled(np.zeros(4))
        with pytest.raises(ValueError):
            AgentNets(3, mode="AB3")


class TestGradients:
    @pytest.mark.parametrize("mode", ["full", "AB2"])
    def test_input_gradient(self, mode, rng):
        nets, X, V, M = _heads(rng, mode)
        c = rng.normal(size=3)

        def loss():
            h_bar, _ = nets.pool(X, V)
            return float(h_bar[0] @ c)

        loss()
        gx = nets.pooler.backward(c[None])
        num = numeric_grad(loss, X)
        assert rel_error(gx, num) < 1e-4


class TestPersistence:
    @pytest.mark.parametrize("mode,dim", [("full", 3), ("AB1", 4), ("AB2", 3)])
    def test_round_trip(self, tmp_path, rng, mode, dim):
        nets = AgentNets(dim, mode=mode, hidden=6, rng=rng)
        path = tmp_path / "n.bin"
        nets.save(path, extra={"tag": 1}, arrays={"init_mean": np.arange(dim, dtype=float)})
        back, meta, extras = AgentNets.load(path, expect_mode=mode)
        assert meta["tag"] == 1 and meta["nets"]["mode"] == mode
        np.testing.assert_array_equal(extras["init_mean"], np.arange(dim))
        for k, p in nets.named_params().items():
            np.testing.assert_array_equal(back.named_params()[k].values, p.values)

    def test_mode_mismatch(self, tmp_path, rng):
        path = tmp_path / "n.bin"
        AgentNets(3, mode="AB2", hidden=4, rng=rng).save(path)
        with pytest.raises(DataError, match="AB2"):
            AgentNets.load(path, expect_mode="full")
