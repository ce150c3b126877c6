import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmarl.errors import InvalidArgument, UpdateRejected
from hmarl.mappo import (
    PpoConfig,
    Rollout,
    act,
    clipped_surrogate,
    discounted_return,
    gae,
    make_actor,
    make_critic,
    squashed_logp,
    surrogate_grad,
    update,
    values,
)

rewards_st = st.lists(st.floats(-10, 10), min_size=1, max_size=30)


class TestGae:
    @given(rewards_st, st.floats(0.5, 1.0))
    def test_lambda_one_zero_values_is_return(self, r, gamma):
        adv, targets = gae(r, np.zeros(len(r)), 0.0, gamma, 1.0)
        assert adv[0] == pytest.approx(discounted_return(r, gamma), abs=1e-9)
        np.testing.assert_allclose(targets, adv)

    @given(rewards_st, st.floats(0.5, 1.0))
    def test_lambda_zero_is_td_error(self, r, gamma):
        v = np.linspace(-1, 1, len(r))
        adv, _ = gae(r, v, 0.3, gamma, 0.0)
        next_v = np.append(v[1:], 0.3)
        np.testing.assert_allclose(adv, np.array(r) + gamma * next_v - v, atol=1e-12)

    def test_done_cuts_recursion(self):
        adv, _ = gae([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 5.0, 0.9, 0.95, dones=[False, True, False])
        assert adv[1] == pytest.approx(1.0)
        assert adv[2] == pytest.approx(1.0 + 0.9 * 5.0)
        assert adv[0] == pytest.approx(1.0 + 0.9 * 0.95 * 1.0)

    def test_multi_agent_columns_independent(self, rng):
        r = rng.normal(size=(8, 3))
        v = rng.normal(size=(8, 3))
        adv, _ = gae(r, v, np.array([0.1, 0.2, 0.3]), 0.9, 0.8)
        for j in range(3):
            np.testing.assert_allclose(adv[:, j], gae(r[:, j], v[:, j], [0.1, 0.2, 0.3][j], 0.9, 0.8)[0])

    def test_matches_direct_double_sum(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 25))
            r, v = rng.normal(size=n), rng.normal(size=n)
            boot, gamma, lam = rng.normal(), rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
            adv, _ = gae(r, v, boot, gamma, lam)
            nv = np.append(v[1:], boot)
            delta = r + gamma * nv - v
            direct = [sum((gamma * lam) ** (s - t) * delta[s] for s in range(t, n)) for t in range(n)]
            np.testing.assert_allclose(adv, direct, rtol=1e-10, atol=1e-10)

    def test_invalid(self):
        with pytest.raises(InvalidArgument):
            gae([], [], 0.0, 0.9, 0.9)
        with pytest.raises(InvalidArgument):
            gae([1.0], [1.0, 2.0], 0.0, 0.9, 0.9)
        with pytest.raises(InvalidArgument):
            gae([1.0], [1.0], 0.0, 1.5, 0.9)


class TestSurrogate:
    def test_clip_examples(self):
        np.testing.assert_allclose(clipped_surrogate([1.5, 0.5, 1.5, 0.5], [1.0, 1.0, -1.0, -1.0], 0.2), [1.2, 0.5, -1.5, -0.8])

    def test_gradient_zero_where_clipped(self):
        np.testing.assert_allclose(surrogate_grad([1.5, 0.5, 1.5, 0.5], [1.0, 1.0, -1.0, -1.0], 0.2), [0.0, 0.5, -1.5, 0.0])


class TestPolicy:
    def test_actions_bounded_and_logp_consistent(self, rng):
        actor = make_actor(9, 3, 0.5, rng, hidden=(16,))
        obs = rng.normal(size=(200, 9))
        a, logp, u = act(actor, obs, "stochastic", rng, 0.5)
        assert np.all(np.abs(a) < 0.5)
        mu = act(actor, obs, "deterministic", None, 0.5)[2]
        np.testing.assert_allclose(logp, squashed_logp(u, mu, actor["log_std"], 0.5), rtol=1e-12)

    def test_sampling_statistics(self, rng):
        actor = make_actor(2, 2, 10.0, rng, hidden=(8,))
        obs = np.zeros((50_000, 2))
        _, _, u = act(actor, obs, "stochastic", rng, 10.0)
        mu = act(actor, obs[:1], "deterministic", None, 10.0)[2][0]
        sigma = np.exp(actor["log_std"])
        np.testing.assert_allclose(u.mean(axis=0), mu, atol=4 * sigma.max() / np.sqrt(len(u)))
        np.testing.assert_allclose(u.std(axis=0), np.exp(actor["log_std"]), rtol=0.02)

    def test_logp_integrates_to_one(self):
        # one-dimensional density of the squashed sample over (-delta, delta)
        delta = 0.5
        a = np.linspace(-delta, delta, 200_001)[1:-1]
        u = delta * np.arctanh(a / delta)
        dens = np.exp(squashed_logp(u[:, None], np.array([0.1]), np.array([np.log(0.3)]), delta))
        assert np.trapezoid(dens, a) == pytest.approx(1.0, abs=1e-4)

    def test_bad_mode(self, rng):
        actor = make_actor(2, 2, 1.0, rng, hidden=(4,))
        with pytest.raises(InvalidArgument):
            act(actor, np.zeros(2), "greedy", rng, 1.0)
        with pytest.raises(InvalidArgument):
            act(actor, np.zeros(2), "stochastic", None, 1.0)


def synthetic_batch(rng, n=64, obs_dim=3, act_dim=2, delta=1.0, hidden=(8,)):
    actor = make_actor(obs_dim, act_dim, delta, rng, hidden=hidden)
    critic = make_critic(obs_dim, rng, hidden=hidden)
    obs = rng.normal(size=(n, obs_dim))
    _, logp, u = act(actor, obs, "stochastic", rng, delta)
    data = {"obs": obs, "critic_in": obs, "u": u, "logp": logp, "adv": np.zeros(n), "targets": rng.normal(size=n)}
    return actor, critic, data


class TestUpdate:
    def test_zero_advantage_leaves_actor_unchanged(self, rng):
        actor, critic, data = synthetic_batch(rng)
        before = actor.flat().copy()
        update(actor, critic, data, PpoConfig(epochs=3, batch_size=16, entropy_coef=0.0), rng, 1.0)
        np.testing.assert_array_equal(actor.flat(), before)

    def test_positive_advantage_raises_logp(self, rng):
        actor, critic, data = synthetic_batch(rng)
        data["adv"] = np.ones(len(data["adv"]))
        mu = lambda: act(actor, data["obs"], "deterministic", None, 1.0)[2]
        before = squashed_logp(data["u"], mu(), actor["log_std"], 1.0).sum()
        update(actor, critic, data, PpoConfig(epochs=1, batch_size=64, entropy_coef=0.0, normalize_advantages=False), rng, 1.0)
        assert squashed_logp(data["u"], mu(), actor["log_std"], 1.0).sum() > before

    @given(st.lists(st.floats(0.81, 1.19), min_size=1, max_size=20), st.floats(-5, 5))
    def test_clip_inert_inside_range(self, ratios, a):
        r = np.array(ratios)
        np.testing.assert_allclose(clipped_surrogate(r, a, 0.2), r * a, atol=1e-12)

    def test_critic_loss_falls_over_first_epochs(self):
        rng = np.random.default_rng(2)
        actor, critic, data = synthetic_batch(rng, n=200, hidden=(32,))
        data["targets"] = data["obs"] @ np.array([1.0, -2.0, 0.5])
        losses = []
        for _ in range(10):
            update(actor, critic, data, PpoConfig(epochs=1, batch_size=200, lr=1e-3), rng, 1.0)
            losses.append(float(np.mean((values(critic, data["obs"]) - data["targets"]) ** 2)))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_deterministic_act_repeats(self, rng):
        actor = make_actor(4, 3, 0.5, rng, hidden=(8,))
        obs = rng.normal(size=4)
        a1, _, _ = act(actor, obs, "deterministic", None, 0.5)
        a2, _, _ = act(actor, obs, "deterministic", None, 0.5)
        np.testing.assert_array_equal(a1, a2)

    def test_non_finite_restores_snapshot(self, rng):
        actor, critic, data = synthetic_batch(rng)
        data["targets"] = np.full(len(data["targets"]), np.inf)
        before_a, before_c = actor.flat().copy(), critic.flat().copy()
        with pytest.raises(UpdateRejected):
            update(actor, critic, data, PpoConfig(epochs=2, batch_size=16), rng, 1.0)
        np.testing.assert_array_equal(actor.flat(), before_a)
        np.testing.assert_array_equal(critic.flat(), before_c)

    def test_bandit_moves_mean_to_best_action(self):
        rng = np.random.default_rng(0)
        delta = 1.0
        target = np.array([0.4, -0.3])
        actor = make_actor(1, 2, delta, rng, hidden=(16,))
        critic = make_critic(1, rng, hidden=(16,))
        cfg = PpoConfig(epochs=10, batch_size=64, lr=3e-3, entropy_coef=0.0)
        obs = np.ones((256, 1))
        for _ in range(60):
            a, logp, u = act(actor, obs, "stochastic", rng, delta)
            r = -np.sum((a - target) ** 2, axis=1)
            data = {"obs": obs, "critic_in": obs, "u": u, "logp": logp,
                    "adv": r - values(critic, obs), "targets": r}
            update(actor, critic, data, cfg, rng, delta)
        a_det = act(actor, obs[:1], "deterministic", None, delta)[0][0]
        np.testing.assert_allclose(a_det, target, atol=0.05)

    def test_value_regression(self):
        rng = np.random.default_rng(1)
        actor = make_actor(2, 1, 1.0, rng, hidden=(8,))
        critic = make_critic(2, rng, hidden=(32,))
        x = rng.uniform(-1, 1, size=(400, 2))
        y = 2.0 * x[:, 0] - x[:, 1] + 0.5
        _, logp, u = act(actor, x, "stochastic", rng, 1.0)
        data = {"obs": x, "critic_in": x, "u": u, "logp": logp, "adv": np.zeros(400), "targets": y}
        cfg = PpoConfig(epochs=300, batch_size=100, lr=3e-3, max_grad_norm=10.0)
        update(actor, critic, data, cfg, rng, 1.0)
        assert np.mean((values(critic, x) - y) ** 2) < 1e-2

    def test_rollout_finish_and_flat(self, rng):
        ro = Rollout()
        for t in range(5):
            ro.add(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 1)), np.zeros(2), np.ones(2), np.zeros(2), done=t == 4)
        with pytest.raises(InvalidArgument):
            ro.flat()
        ro.finish(np.zeros(2), PpoConfig(gamma=1.0, gae_lambda=1.0))
        flat = ro.flat()
        assert flat["obs"].shape == (10, 3)
        np.testing.assert_allclose(flat["adv"][::2], [5, 4, 3, 2, 1])
