"""Actor-critic agent tests.

Reward oracles are frozen by hand: 64**-0.1 - 1 = -0.3402460446135529 for
the accuracy sub-reward example, and the quality sub-reward at K=2 with
targets [1,0] against action [0,1] is -1.
"""

import numpy as np
import pytest

from deskfed.agent import (
    DrlState,
    EpisodeEnv,
    SacAgent,
    build_state,
    compound_reward,
    pool_embed,
    quality_target_weights,
    reward_r1,
    reward_r2,
    reward_r3,
    state_dim,
    train_episode,
)
from deskfed.datasets import partition_iid, synth_dataset
from deskfed.federation import check_simplex
from deskfed.nets import FlatParams, LayerSpec, init_params
from deskfed.quality import init_quality_net
from deskfed.replay import BufferConfig, ReplayBuffer
from deskfed.seeding import derive_rng

CLIENT_MANIFEST = (LayerSpec(8, 6, "relu"), LayerSpec(6, 4, "softmax"))


def small_agent(k=3, embed=8, hidden=32, **kw):
    return SacAgent(state_dim(k, embed), k, hidden=hidden, seed=0, **kw)


def fake_batch(agent, b, rng):
    states = rng.normal(size=(b, agent.state_dim))
    actions = rng.dirichlet(np.ones(agent.k), b)
    rewards = rng.uniform(-1, 0, b)
    next_states = rng.normal(size=(b, agent.state_dim))
    dones = np.zeros(b)
    return states, actions, rewards, next_states, dones


# -- rewards ------------------------------------------------------------------

def test_reward_r1_frozen_values():
    assert reward_r1(0.9, 0.5, 1.0, 64.0) == pytest.approx(
        -0.3402460446135529, abs=1e-12)
    assert reward_r1(0.95, 0.2, 0.95, 64.0) == 0.0
    assert reward_r1(0.4, 0.4, 0.95, 64.0) == 0.0
    # low branch would be positive: 64**0.25 - 1 > 0, clamped
    assert reward_r1(0.45, 0.2, 0.95, 64.0) == 0.0
    with pytest.raises(ValueError):
        reward_r1(1.2, 0.5, 0.95, 64.0)
    with pytest.raises(ValueError):
        reward_r1(0.5, 0.5, 0.95, 0.5)


def test_reward_r1_bounds_randomized():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        r = reward_r1(rng.uniform(0, 1), rng.uniform(0, 1),
                      rng.uniform(0.05, 1.0), rng.uniform(1.001, 200))
        assert -1.0 < r <= 0.0


def test_reward_r2_hand_values():
    assert reward_r2([0.0, 1.0], [1.0, 0.0]) == pytest.approx(0.0)
    assert reward_r2([0.0, 1.0], [0.0, 1.0]) == pytest.approx(-1.0)
    # all marks equal: target is uniform, best action is uniform
    assert reward_r2([0.3, 0.3, 0.3], np.full(3, 1 / 3)) == pytest.approx(0.0)
    assert np.allclose(quality_target_weights([1.0, 1.0]), [0.5, 0.5])
    with pytest.raises(ValueError, match="marks"):
        reward_r2([0.5, 1.4], [0.5, 0.5])


def test_reward_r2_unique_max_at_target():
    # grid search over the K=3 simplex; target concentrated on index 0
    marks = np.array([0.0, 1.0, 1.0])
    target = quality_target_weights(marks)
    assert np.allclose(target, [1.0, 0.0, 0.0])
    best = reward_r2(marks, target)
    for i in np.arange(0.0, 1.0001, 0.05):
        for j in np.arange(0.0, 1.0001 - i, 0.05):
            a = np.array([i, j, 1.0 - i - j])
            if np.allclose(a, target):
                continue
            assert reward_r2(marks, a) < best


def test_reward_r3_hand_values_and_scale():
    manifest = (LayerSpec(2, 2, "identity"),)
    w = FlatParams(np.array([1.0, 2.0, 0.0, -1.0, 0.5, 0.0]), manifest)
    assert reward_r3(w, w) == pytest.approx(0.0, abs=1e-12)
    neg = FlatParams(-w.values, manifest)
    assert reward_r3(w, neg) == pytest.approx(-1.0)

    a = FlatParams(np.array([1.0, 0.0]), (LayerSpec(1, 1, "identity"),))
    b = FlatParams(np.array([0.0, 1.0]), (LayerSpec(1, 1, "identity"),))
    assert reward_r3(a, b) == pytest.approx(-0.5)

    for c in (0.1, 3.0, 250.0):
        scaled = FlatParams(c * w.values, manifest)
        assert reward_r3(scaled, neg) == pytest.approx(reward_r3(w, neg))

    zero = FlatParams(np.zeros(2), (LayerSpec(1, 1, "identity"),))
    with pytest.warns(UserWarning, match="zero global"):
        assert reward_r3(zero, a) == -0.5


def test_compound_reward():
    parts = compound_reward(0.0, 0.0, 0.0)
    assert parts.total == 0.0 and parts.beta == (0.5, 0.4, 0.1)
    near = compound_reward(-1.0 + 1e-12, -1.0, -1.0)
    assert near.total == pytest.approx(-1.0, abs=1e-9)
    only_r1 = compound_reward(-0.25, -1.0, -1.0, beta=(1.0, 0.0, 0.0))
    assert only_r1.total == pytest.approx(-0.25)
    with pytest.raises(ValueError, match="outside"):
        compound_reward(0.5, 0.0, 0.0)
    with pytest.raises(ValueError, match="beta"):
        compound_reward(0.0, 0.0, 0.0, beta=(1.0, -0.1, 0.0))


def test_compound_bounds_randomized():
    rng = np.random.default_rng(2)
    for _ in range(2000):
        parts = compound_reward(-rng.uniform(0, 0.999), -rng.uniform(0, 1),
                                -rng.uniform(0, 1))
        assert -1.0 <= parts.total <= 0.0


# -- state --------------------------------------------------------------------

def test_state_dim_formula():
    assert state_dim(10, 64) == 724
    assert state_dim(4, 16) == 88


def test_build_state_with_encoder():
    qnet = init_quality_net(CLIENT_MANIFEST, seed=0, embed_dim=16,
                            enc_hidden=32, quality_hidden=8)
    uploads = [init_params(CLIENT_MANIFEST, seed=s) for s in range(4)]
    state = build_state(qnet, uploads[0], uploads, [0.5, 2.5, 7.0, 100.0],
                        np.full(4, 0.25), loss_clip=5.0)
    assert state.flat().shape == (state_dim(4, 16),)
    assert np.allclose(state.local_losses, [0.1, 0.5, 1.0, 1.0])
    assert np.allclose(state.prev_action, 0.25)
    again = build_state(qnet, uploads[0], uploads, [0.5, 2.5, 7.0, 100.0],
                        np.full(4, 0.25), loss_clip=5.0)
    assert np.array_equal(state.flat(), again.flat())


def test_build_state_pooled_fallback():
    uploads = [init_params(CLIENT_MANIFEST, seed=s) for s in range(3)]
    state = build_state(None, uploads[0], uploads, [1.0, 1.0, 1.0],
                        np.full(3, 1 / 3), embed_dim=8)
    assert state.flat().shape == (state_dim(3, 8),)
    manual = np.array([c.mean() for c in np.array_split(uploads[0].values, 8)])
    assert np.allclose(state.server_embedding, manual)
    with pytest.raises(ValueError, match="embed_dim required"):
        build_state(None, uploads[0], uploads, [1, 1, 1], np.full(3, 1 / 3))
    with pytest.raises(ValueError, match="prev_action"):
        build_state(None, uploads[0], uploads, [1, 1, 1], np.full(4, 0.25),
                    embed_dim=8)


def test_pool_embed_rejects_tiny_models():
    with pytest.raises(ValueError, match="pool"):
        pool_embed(FlatParams(np.zeros(2), (LayerSpec(1, 1, "identity"),)), 8)


# -- policy -------------------------------------------------------------------

def test_act_deterministic_uniform_at_init():
    agent = small_agent(k=5, embed=8)
    s = np.random.default_rng(0).normal(size=agent.state_dim)
    a1, logp1 = agent.act(s, deterministic=True)
    a2, logp2 = agent.act(s, deterministic=True)
    assert np.array_equal(a1, a2) and logp1 == logp2
    # zero-initialized final layer: mean 0, log-std 0 -> exactly uniform
    assert np.allclose(a1, 0.2, atol=1e-15)
    # density of the mean itself: sum over K of (-log_std - 0.5*log(2pi))
    assert logp1 == pytest.approx(-2.5 * np.log(2 * np.pi))


def test_actions_on_simplex():
    agent = small_agent(k=7, embed=8)
    rng = derive_rng(3, "act")
    s_rng = np.random.default_rng(4)
    for _ in range(200):
        action, _ = agent.act(s_rng.normal(size=agent.state_dim), rng=rng)
        check_simplex(action, 7)


def test_untrained_mean_action_near_uniform():
    agent = small_agent(k=10, embed=8)
    state = np.random.default_rng(5).normal(size=agent.state_dim)
    states = np.tile(state, (1000, 1))
    actions, _, _ = agent.sample_actions(states, derive_rng(5, "mc"))
    assert np.abs(actions.mean(axis=0) - 0.1).max() < 0.05


def test_logp_matches_gaussian_density_of_preaction():
    agent = small_agent(k=4, embed=8)
    # give the actor a non-trivial head so mu/ls vary
    agent.actor = init_params(agent.actor.manifest, seed=9)
    states = np.random.default_rng(6).normal(size=(5, agent.state_dim))
    actions, logp, cache = agent.sample_actions(states, derive_rng(6, "x"))
    xi = (cache["z"] - cache["mu"]) / cache["std"]
    manual = (-0.5 * xi ** 2 - cache["ls"] - 0.5 * np.log(2 * np.pi)).sum(axis=1)
    assert np.allclose(logp, manual, atol=1e-12)
    assert np.allclose(actions, cache["actions"])


def test_entropy_estimate_positive():
    agent = small_agent(k=6, embed=8)
    states = np.random.default_rng(7).normal(size=(500, agent.state_dim))
    _, logp, _ = agent.sample_actions(states, derive_rng(7, "h"))
    assert np.mean(-logp) > 0.0


# -- updates ------------------------------------------------------------------

def test_critic_targets_gamma_zero_and_done():
    agent = small_agent(gamma=0.0)
    s, a, r, s2, d = fake_batch(agent, 8, np.random.default_rng(8))
    y = agent.critic_targets(r, s2, d, derive_rng(8, "t"))
    assert np.array_equal(y, r)

    agent2 = small_agent(gamma=0.99)
    y2 = agent2.critic_targets(r, s2, np.ones(8), derive_rng(8, "t"))
    assert np.array_equal(y2, r)


def test_critic_targets_formula():
    agent = small_agent(gamma=0.9)
    s, a, r, s2, d = fake_batch(agent, 6, np.random.default_rng(9))
    y = agent.critic_targets(r, s2, d, derive_rng(9, "t"))

    a2, logp2, _ = agent.sample_actions(s2, derive_rng(9, "t"))
    q1 = agent._q_values(agent.target_q1, s2, a2)[:, 0]
    q2 = agent._q_values(agent.target_q2, s2, a2)[:, 0]
    manual = r + 0.9 * (np.minimum(q1, q2) - agent.alpha * logp2)
    assert np.allclose(y, manual, atol=1e-12)


def test_critic_update_decreases_loss_on_fixed_batch():
    agent = small_agent()
    batch = fake_batch(agent, 32, np.random.default_rng(10))
    is_w = np.ones(32)
    losses = [agent.critic_update(*batch, is_w, derive_rng(10, "fix"))[0]
              for _ in range(50)]
    assert losses[-1] < losses[0]
    assert all(np.isfinite(losses))


def test_critic_update_returns_per_item_tds():
    agent = small_agent()
    batch = fake_batch(agent, 16, np.random.default_rng(11))
    _, tds = agent.critic_update(*batch, np.ones(16), derive_rng(11, "x"))
    assert tds.shape == (16, 2)
    assert np.isfinite(tds).all()


def test_actor_update_finite_and_large_alpha_grows_std():
    agent = small_agent()
    states = np.random.default_rng(12).normal(size=(32, agent.state_dim))
    loss = agent.actor_update(states, derive_rng(12, "a"))
    assert np.isfinite(loss)

    agent2 = small_agent()
    agent2.log_alpha = float(np.log(50.0))
    probe = states[:1]
    _, ls_before, _, _ = agent2._policy_head(probe)
    for _ in range(30):
        agent2.actor_update(states, derive_rng(13, "b"))
    _, ls_after, _, _ = agent2._policy_head(probe)
    assert ls_after.mean() > ls_before.mean()


def test_actor_gradient_matches_finite_differences():
    # tiny agent so every coordinate can be bumped
    agent = SacAgent(state_dim(2, 4), 2, hidden=8, seed=3)
    agent.actor = init_params(agent.actor.manifest, seed=21)  # non-zero head
    rng = np.random.default_rng(22)
    states = rng.normal(size=(5, agent.state_dim))
    xi = rng.standard_normal((5, agent.k))

    _, grads, _ = agent._actor_loss_grads(states, xi)

    def loss_at(values):
        saved = agent.actor
        agent.actor = FlatParams(values, saved.manifest)
        loss, _, _ = agent._actor_loss_grads(states, xi)
        agent.actor = saved
        return loss

    h = 1e-6
    base = agent.actor.values
    numeric = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] += h
        up = loss_at(bumped)
        bumped[i] -= 2 * h
        numeric[i] = (up - loss_at(bumped)) / (2 * h)
    rel = np.abs(grads - numeric) / np.maximum(
        np.maximum(np.abs(grads), np.abs(numeric)), 1e-3)
    assert rel.max() < 1e-4


def test_critic_gradient_matches_finite_differences():
    agent = SacAgent(state_dim(2, 4), 2, hidden=8, seed=4)
    rng = np.random.default_rng(23)
    states = rng.normal(size=(6, agent.state_dim))
    actions = rng.dirichlet(np.ones(2), 6)
    y = rng.normal(size=6)
    is_w = rng.uniform(0.2, 1.0, 6)

    _, _, grads = agent._critic_loss_grads(agent.q1, states, actions, y, is_w)

    h = 1e-6
    base = agent.q1.values
    numeric = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] += h
        up = agent._critic_loss_grads(
            FlatParams(bumped, agent.q1.manifest), states, actions, y, is_w)[0]
        bumped[i] -= 2 * h
        dn = agent._critic_loss_grads(
            FlatParams(bumped, agent.q1.manifest), states, actions, y, is_w)[0]
        numeric[i] = (up - dn) / (2 * h)
    rel = np.abs(grads - numeric) / np.maximum(
        np.maximum(np.abs(grads), np.abs(numeric)), 1e-3)
    assert rel.max() < 1e-4


def test_alpha_moves_toward_target_entropy():
    agent = small_agent()
    before = agent.alpha
    states = np.random.default_rng(14).normal(size=(32, agent.state_dim))
    for _ in range(20):
        agent.actor_update(states, derive_rng(14, "c"))
    assert agent.alpha != before


def test_soft_target_update():
    agent = small_agent()
    batch = fake_batch(agent, 16, np.random.default_rng(15))
    agent.critic_update(*batch, np.ones(16), derive_rng(15, "d"))

    frozen = agent.target_q1.values.copy()
    agent.soft_target_update(rho=1.0)
    assert np.array_equal(agent.target_q1.values, frozen)

    online = agent.q1.values.copy()
    agent.soft_target_update(rho=0.0)
    assert np.array_equal(agent.target_q1.values, online)

    agent.critic_update(*batch, np.ones(16), derive_rng(15, "e"))
    t_before = agent.target_q1.values.copy()
    agent.soft_target_update(rho=0.9)
    expect = 0.9 * t_before + 0.1 * agent.q1.values
    assert np.allclose(agent.target_q1.values, expect, atol=1e-15)


def test_agent_checkpoint_roundtrip(tmp_path):
    agent = small_agent()
    batch = fake_batch(agent, 16, np.random.default_rng(16))
    agent.critic_update(*batch, np.ones(16), derive_rng(16, "f"))
    agent.actor_update(batch[0], derive_rng(16, "g"))
    path = tmp_path / "agent.ckpt"
    agent.save(path)
    loaded = SacAgent.load(path)
    s = np.random.default_rng(17).normal(size=agent.state_dim)
    a1, lp1 = agent.act(s, deterministic=True)
    a2, lp2 = loaded.act(s, deterministic=True)
    assert np.array_equal(a1, a2) and lp1 == lp2
    assert loaded.alpha == agent.alpha

    from deskfed.quality import save_quality_net
    qnet = init_quality_net(CLIENT_MANIFEST, seed=0, embed_dim=8,
                            enc_hidden=16, quality_hidden=4)
    save_quality_net(tmp_path / "q.ckpt", qnet)
    with pytest.raises(ValueError, match="not an agent"):
        SacAgent.load(tmp_path / "q.ckpt")


# -- episode loop ---------------------------------------------------------------

def make_env(m=0, rounds=3, gamma_env_seed=0, beta=(0.5, 0.4, 0.1)):
    ds = synth_dataset(4, 30, 8, 0.1, seed=20)
    part = partition_iid(ds, 6, seed=20)
    return EpisodeEnv(
        dataset=ds, eval_dataset=ds, client_indices=part.client_indices,
        client_manifest=CLIENT_MANIFEST, k=3, rounds=rounds, m=m, degree=0.5,
        kinds=("data_contamination", "comm_loss", "label_shuffle") if m else (),
        local_epochs=1, local_batch=16, local_lr=0.05, kappa=64.0,
        target_delta=0.95, beta=beta, seed=gamma_env_seed)


def episode_fixture(gamma=0.99, m=2, rounds=3, seed=0):
    qnet = init_quality_net(CLIENT_MANIFEST, seed=1, embed_dim=8,
                            enc_hidden=16, quality_hidden=4)
    agent = SacAgent(state_dim(3, 8), 3, hidden=32, gamma=gamma, seed=seed)
    buf = ReplayBuffer(BufferConfig(capacity=500, c_min=8))
    env = make_env(m=m, rounds=rounds, gamma_env_seed=seed)
    return agent, buf, env, qnet


def test_train_episode_mechanics():
    agent, buf, env, qnet = episode_fixture()
    g, records = train_episode(agent, buf, env, qnet, episode=0,
                               updates_per_round=2, update_batch=4)
    assert len(records) == env.rounds
    assert len(buf) == env.rounds  # T-1 chained + 1 terminal
    assert buf.recent(1)[0].done is True
    assert np.isfinite(g) and -env.rounds <= g <= 0.0
    for rec in records:
        check_simplex(rec["weights"], 3)
        assert 0.0 <= rec["accuracy"] <= 1.0
        assert -1 < rec["r1"] <= 0 and -1 <= rec["r2"] <= 0 and -1 <= rec["r3"] <= 0


def test_train_episode_gamma_zero_return():
    agent, buf, env, qnet = episode_fixture(gamma=0.0, rounds=1)
    g, records = train_episode(agent, buf, env, qnet, episode=0)
    assert g == pytest.approx(records[0]["reward"])


def test_train_episode_deterministic_given_seeds():
    g1, r1 = train_episode(*episode_fixture(seed=3), episode=5,
                           updates_per_round=1, update_batch=4)
    g2, r2 = train_episode(*episode_fixture(seed=3), episode=5,
                           updates_per_round=1, update_batch=4)
    assert g1 == g2
    assert all(np.array_equal(a["weights"], b["weights"])
               for a, b in zip(r1, r2))


def test_train_episode_pooled_state_mode():
    agent = SacAgent(state_dim(3, 8), 3, hidden=32, seed=0)
    buf = ReplayBuffer(BufferConfig(capacity=500, c_min=8))
    env = make_env(m=2)
    env.embed_dim = 8
    env.beta = (0.5, 0.0, 0.5)
    g, records = train_episode(agent, buf, env, None, episode=0,
                               updates_per_round=1, update_batch=4)
    assert np.isfinite(g)
    assert all(rec["r2"] == 0.0 for rec in records)


def test_fedavg_episode_replay_deterministic():
    from deskfed.experiments import fedavg_episode_accuracy
    env = make_env(m=2, rounds=3, gamma_env_seed=4)
    acc = fedavg_episode_accuracy(env, episode=7)
    assert 0.0 <= acc <= 1.0
    assert fedavg_episode_accuracy(env, episode=7) == acc
