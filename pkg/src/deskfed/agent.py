"""Soft actor-critic agent that emits simplex aggregation weights.

The actor maps the round state to a K-dim Gaussian pre-action; a softmax
squashes the sample onto the simplex, so every emitted action satisfies the
weight constraints exactly. The reported log-probability is the Gaussian
density of the pre-action and omits the softmax change-of-variables term
(a documented approximation). Twin critics with slowly tracking targets
score (state, action) pairs, and the temperature is tuned toward a target
entropy of -K.

State per round: server embedding, K client embeddings, K scaled local
losses, previous action. Rewards combine accuracy gain over the uniform
shadow aggregate, agreement with quality-derived target weights, and
global-model smoothness.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .defects import sample_plan
from .federation import ClientState, fedavg_weights, run_round
from .nets import (
    AdamState,
    FlatParams,
    LayerSpec,
    backward,
    forward_array,
    init_params,
    load_sections,
    save_sections,
)
from .quality import encode, normalize_scores, score_params
from .replay import ReplayBuffer, Transition, priority_from_td
from .seeding import derive_rng

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))

DEFAULT_BETA = (0.5, 0.4, 0.1)


# -- rewards ----------------------------------------------------------------

def reward_r1(delta: float, delta_bar: float, target_delta: float,
              kappa: float) -> float:
    """Accuracy sub-reward in (-1, 0].

    Below 50% accuracy the comparison point is the uniform-aggregation
    shadow delta_bar, above it the target accuracy. Clamped at 0 because
    the low branch can otherwise go positive.
    """
    if not (0.0 <= delta <= 1.0 and 0.0 <= delta_bar <= 1.0):
        raise ValueError("accuracies must lie in [0,1]")
    if not 0.0 < target_delta <= 1.0 or kappa <= 1.0:
        raise ValueError("need target_delta in (0,1] and kappa > 1")
    exponent = (delta - delta_bar) if delta < 0.5 else (delta - target_delta)
    return min(kappa ** exponent - 1.0, 0.0)


def quality_target_weights(marks_norm) -> np.ndarray:
    """Simplex target q derived from normalized marks: q_i prop to 1 - mark."""
    marks_norm = np.asarray(marks_norm, dtype=np.float64).ravel()
    if marks_norm.min() < 0 or marks_norm.max() > 1:
        raise ValueError("normalized marks must lie in [0,1]")
    good = 1.0 - marks_norm
    total = good.sum()
    if total == 0.0:
        # every model maximally marked: nothing to prefer
        return fedavg_weights(marks_norm.size)
    return good / total


def reward_r2(marks_norm, action) -> float:
    """Penalty in [-1, 0] for deviating from the quality-derived weights."""
    target = quality_target_weights(marks_norm)
    action = np.asarray(action, dtype=np.float64).ravel()
    if action.size != target.size:
        raise ValueError(f"{action.size} weights vs {target.size} marks")
    return float(-np.mean((target - action) ** 2))


def reward_r3(w_prev: FlatParams, w_next: FlatParams) -> float:
    """Smoothness sub-reward in [-1, 0]: half cosine similarity minus half."""
    if w_prev.manifest != w_next.manifest:
        raise ValueError("global models have different manifests")
    if np.array_equal(w_prev.values, w_next.values) and w_prev.values.any():
        return 0.0  # sqrt rounding would otherwise leave ~1 ulp of residue
    na = float(np.linalg.norm(w_prev.values))
    nb = float(np.linalg.norm(w_next.values))
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of a zero global model is undefined; using -0.5")
        return -0.5
    cos = float(w_prev.values @ w_next.values) / (na * nb)
    return 0.5 * cos - 0.5


@dataclass(frozen=True)
class RewardParts:
    r1: float
    r2: float
    r3: float
    beta: tuple
    total: float

    def __post_init__(self):
        if not -1.0 < self.r1 <= 0.0:
            raise ValueError(f"r1={self.r1} outside (-1, 0]")
        for name, value in (("r2", self.r2), ("r3", self.r3)):
            if not -1.0 <= value <= 0.0:
                raise ValueError(f"{name}={value} outside [-1, 0]")


def compound_reward(r1: float, r2: float, r3: float,
                    beta=DEFAULT_BETA) -> RewardParts:
    beta = tuple(float(b) for b in beta)
    if len(beta) != 3 or min(beta) < 0:
        raise ValueError("beta must be three non-negative weights")
    total = beta[0] * r1 + beta[1] * r2 + beta[2] * r3
    return RewardParts(r1, r2, r3, beta, total)


# -- state ------------------------------------------------------------------

@dataclass
class DrlState:
    """(server embedding, K client embeddings, K scaled losses, prev action)."""

    server_embedding: np.ndarray
    client_embeddings: np.ndarray  # (K, E)
    local_losses: np.ndarray       # scaled into [0, 1]
    prev_action: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([
            self.server_embedding,
            self.client_embeddings.ravel(),
            self.local_losses,
            self.prev_action,
        ])


def state_dim(k: int, embed_dim: int) -> int:
    return (k + 1) * embed_dim + 2 * k


def pool_embed(params: FlatParams, embed_dim: int) -> np.ndarray:
    """Ablation embedding: mean over embed_dim contiguous parameter chunks."""
    if params.d < embed_dim:
        raise ValueError(f"cannot pool {params.d} params into {embed_dim} bins")
    return np.array([chunk.mean()
                     for chunk in np.array_split(params.values, embed_dim)])


def build_state(qnet, global_params: FlatParams, uploads, local_losses,
                prev_action, loss_clip: float = 5.0,
                embed_dim: int | None = None) -> DrlState:
    """Round state for the agent.

    With qnet=None the embeddings fall back to chunk-mean pooling of the raw
    parameters (the no-auto-encoder ablation); embed_dim is then required.
    """
    k = len(uploads)
    prev_action = np.asarray(prev_action, dtype=np.float64).ravel()
    if prev_action.size != k:
        raise ValueError(f"prev_action has {prev_action.size} entries for K={k}")
    if qnet is not None:
        e_g = encode(qnet, global_params)
        e_c = np.stack([encode(qnet, p) for p in uploads])
    else:
        if embed_dim is None:
            raise ValueError("embed_dim required when no encoder is given")
        e_g = pool_embed(global_params, embed_dim)
        e_c = np.stack([pool_embed(p, embed_dim) for p in uploads])
    losses = np.clip(np.asarray(local_losses, dtype=np.float64).ravel(),
                     0.0, loss_clip) / loss_clip
    if losses.size != k:
        raise ValueError(f"{losses.size} losses for K={k}")
    return DrlState(e_g, e_c, losses, prev_action)


# -- the agent ---------------------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class SacAgent:
    """Twin-critic soft actor-critic over softmax-squashed Gaussian actions."""

    def __init__(self, state_dim: int, k: int, hidden: int = 256,
                 lr: float = 3e-4, gamma: float = 0.99, rho: float = 0.995,
                 target_entropy: float | None = None, seed: int = 0,
                 alpha_lr: float | None = None):
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0,1]")
        if not 0.0 < rho < 1.0:
            raise ValueError("rho must lie in (0,1)")
        self.state_dim = state_dim
        self.k = k
        self.hidden = hidden
        self.lr = lr
        self.gamma = gamma
        self.rho = rho
        self.target_entropy = (-float(k) if target_entropy is None
                               else float(target_entropy))
        # the temperature is a single scalar that may need to travel several
        # units in log space; at the network lr it would take tens of
        # thousands of Adam steps to anneal, far beyond a short run
        self.alpha_lr = 10.0 * lr if alpha_lr is None else alpha_lr

        actor_manifest = (LayerSpec(state_dim, hidden, "relu"),
                          LayerSpec(hidden, hidden, "relu"),
                          LayerSpec(hidden, 2 * k, "identity"))
        critic_manifest = (LayerSpec(state_dim + k, hidden, "relu"),
                           LayerSpec(hidden, hidden, "relu"),
                           LayerSpec(hidden, 1, "identity"))
        # zero final layer pins the untrained deterministic action at uniform
        self.actor = init_params(actor_manifest, seed=seed, final_layer_zero=True)
        self.q1 = init_params(critic_manifest, seed=seed + 1)
        self.q2 = init_params(critic_manifest, seed=seed + 2)
        self.target_q1 = self.q1.copy()
        self.target_q2 = self.q2.copy()
        # start small: auto-tuning can raise alpha when entropy drops below
        # target, but a large initial bonus rams log_std into its upper clamp
        # where the gradient mask leaves it stranded
        self.log_alpha = float(np.log(0.01))
        self.critic_steps = 0

        self.opt_actor = AdamState(self.actor.d, lr=lr)
        self.opt_q1 = AdamState(self.q1.d, lr=lr)
        self.opt_q2 = AdamState(self.q2.d, lr=lr)
        self.opt_alpha = AdamState(1, lr=self.alpha_lr)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    # -- policy --

    def _policy_head(self, states: np.ndarray):
        out, trace = forward_array(self.actor, states, want_trace=True)
        mu, ls_raw = out[:, :self.k], out[:, self.k:]
        ls = np.clip(ls_raw, LOG_STD_MIN, LOG_STD_MAX)
        mask = (ls_raw > LOG_STD_MIN) & (ls_raw < LOG_STD_MAX)
        return mu, ls, mask, trace

    def sample_actions(self, states: np.ndarray, rng: np.random.Generator,
                       deterministic: bool = False):
        """Batched (actions, log_probs, cache-for-gradients)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        mu, ls, mask, trace = self._policy_head(states)
        std = np.exp(ls)
        xi = (np.zeros_like(mu) if deterministic
              else rng.standard_normal(mu.shape))
        z = mu + std * xi
        actions = _softmax_rows(z)
        log_probs = (-0.5 * xi ** 2 - ls - 0.5 * LOG_2PI).sum(axis=1)
        cache = {"mu": mu, "ls": ls, "mask": mask, "std": std, "xi": xi,
                 "z": z, "actions": actions, "trace": trace, "states": states}
        return actions, log_probs, cache

    def act(self, state, deterministic: bool = False,
            rng: np.random.Generator | None = None):
        """(simplex action, log-prob) for one state vector or DrlState."""
        if isinstance(state, DrlState):
            state = state.flat()
        if rng is None:
            rng = np.random.default_rng(0)
        actions, log_probs, _ = self.sample_actions(
            state[None, :], rng, deterministic=deterministic)
        return actions[0], float(log_probs[0])

    # -- critics --

    def _q_values(self, critic: FlatParams, states, actions,
                  want_trace: bool = False):
        x = np.concatenate([states, actions], axis=1)
        return forward_array(critic, x, want_trace=want_trace)

    def critic_targets(self, rewards, next_states, dones,
                       rng: np.random.Generator) -> np.ndarray:
        """Soft TD target y = r + gamma*(1-done)*(min target Q - alpha*logp)."""
        rewards = np.asarray(rewards, dtype=np.float64).ravel()
        dones = np.asarray(dones, dtype=np.float64).ravel()
        if self.gamma == 0.0 or dones.all():
            return rewards.copy()
        a2, logp2, _ = self.sample_actions(next_states, rng)
        q1 = self._q_values(self.target_q1, next_states, a2)[:, 0]
        q2 = self._q_values(self.target_q2, next_states, a2)[:, 0]
        soft = np.minimum(q1, q2) - self.alpha * logp2
        return rewards + self.gamma * (1.0 - dones) * soft

    def _critic_loss_grads(self, critic: FlatParams, states, actions,
                           y, is_weights):
        """IS-weighted regression loss of one critic toward fixed targets."""
        b = states.shape[0]
        q, trace = self._q_values(critic, states, actions, want_trace=True)
        td = q[:, 0] - y
        loss = float(np.mean(is_weights * td ** 2))
        d_out = (2.0 * is_weights * td / b)[:, None]
        grads, _ = backward(critic, trace, d_out)
        return loss, td, grads

    def critic_update(self, states, actions, rewards, next_states, dones,
                      is_weights, rng: np.random.Generator):
        """One regression step per critic; returns (loss, td_errors (B,2))."""
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        is_weights = np.asarray(is_weights, dtype=np.float64).ravel()
        y = self.critic_targets(rewards, next_states, dones, rng)

        total = 0.0
        tds = []
        for name in ("q1", "q2"):
            critic = getattr(self, name)
            opt = getattr(self, f"opt_{name}")
            loss, td, grads = self._critic_loss_grads(
                critic, states, actions, y, is_weights)
            setattr(self, name,
                    FlatParams(opt.step(critic.values, grads), critic.manifest))
            total += loss
            tds.append(td)
        if not np.isfinite(total):
            raise RuntimeError("critic loss became non-finite")
        self.critic_steps += 1
        return total, np.stack(tds, axis=1)

    # -- actor & temperature --

    def _actor_loss_grads(self, states: np.ndarray, xi: np.ndarray):
        """Loss E[alpha*log pi - min Q] and its actor gradient, at fixed noise.

        The pre-action noise xi is an input so the pathwise gradient is
        exact and finite-difference checkable.
        """
        b = states.shape[0]
        mu, ls, mask, trace = self._policy_head(states)
        std = np.exp(ls)
        z = mu + std * xi
        actions = _softmax_rows(z)
        log_probs = (-0.5 * xi ** 2 - ls - 0.5 * LOG_2PI).sum(axis=1)

        q1, tr1 = self._q_values(self.q1, states, actions, want_trace=True)
        q2, tr2 = self._q_values(self.q2, states, actions, want_trace=True)
        q1, q2 = q1[:, 0], q2[:, 0]
        loss = float(np.mean(self.alpha * log_probs - np.minimum(q1, q2)))

        # dJ/da through whichever critic attains the min, actions slice only
        use1 = (q1 <= q2)[:, None]
        d_q = np.full((b, 1), -1.0 / b)
        d_actions = np.zeros_like(actions)
        for critic, tr, sel in ((self.q1, tr1, use1), (self.q2, tr2, ~use1)):
            _, d_in = backward(critic, tr, d_q * sel)
            d_actions += d_in[:, self.state_dim:]

        d_z = actions * (d_actions
                         - (d_actions * actions).sum(axis=1, keepdims=True))
        d_mu = d_z
        # z = mu + exp(ls)*xi, plus the -alpha/B entropy path through ls
        d_ls = (d_z * std * xi - (self.alpha / b)) * mask
        d_head = np.concatenate([d_mu, d_ls], axis=1)
        grads, _ = backward(self.actor, trace, d_head)
        return loss, grads, log_probs

    def actor_update(self, states, rng: np.random.Generator) -> float:
        """Ascend E[min Q(s, a) - alpha*log pi], then retune alpha."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        xi = rng.standard_normal((states.shape[0], self.k))
        loss, grads, log_probs = self._actor_loss_grads(states, xi)
        if not np.isfinite(loss):
            raise RuntimeError("actor loss became non-finite")
        self.actor = FlatParams(self.opt_actor.step(self.actor.values, grads),
                                self.actor.manifest)

        # temperature: descend -log_alpha * E[log pi + target entropy]
        grad_log_alpha = -float(np.mean(log_probs + self.target_entropy))
        self.log_alpha = float(self.opt_alpha.step(
            np.array([self.log_alpha]), np.array([grad_log_alpha]))[0])
        return loss

    def soft_target_update(self, rho: float | None = None) -> None:
        rho = self.rho if rho is None else rho
        if not 0.0 <= rho <= 1.0:
            raise ValueError("rho must lie in [0,1]")
        for online, target in (("q1", "target_q1"), ("q2", "target_q2")):
            src = getattr(self, online)
            dst = getattr(self, target)
            setattr(self, target,
                    FlatParams(rho * dst.values + (1.0 - rho) * src.values,
                               dst.manifest))

    # -- persistence --

    def save(self, path, seed: int = 0) -> None:
        sections = {"actor": self.actor, "q1": self.q1, "q2": self.q2,
                    "target_q1": self.target_q1, "target_q2": self.target_q2}
        meta = {"kind": "sac_agent", "state_dim": self.state_dim, "k": self.k,
                "hidden": self.hidden, "lr": self.lr, "gamma": self.gamma,
                "rho": self.rho, "target_entropy": self.target_entropy,
                "log_alpha": self.log_alpha, "alpha_lr": self.alpha_lr}
        save_sections(path, sections, meta=meta, seed=seed)

    @classmethod
    def load(cls, path) -> "SacAgent":
        sections, meta = load_sections(path)
        if meta.get("kind") != "sac_agent":
            raise ValueError(f"{path} is not an agent checkpoint")
        agent = cls(int(meta["state_dim"]), int(meta["k"]),
                    hidden=int(meta["hidden"]), lr=float(meta["lr"]),
                    gamma=float(meta["gamma"]), rho=float(meta["rho"]),
                    target_entropy=float(meta["target_entropy"]),
                    alpha_lr=float(meta["alpha_lr"]) if "alpha_lr" in meta
                    else None)
        agent.actor = sections["actor"]
        agent.q1 = sections["q1"]
        agent.q2 = sections["q2"]
        agent.target_q1 = sections["target_q1"]
        agent.target_q2 = sections["target_q2"]
        agent.log_alpha = float(meta["log_alpha"])
        return agent


# -- episode loop -------------------------------------------------------------

@dataclass
class EpisodeEnv:
    """Everything one training episode needs about the federated world."""

    dataset: object
    eval_dataset: object
    client_indices: list
    client_manifest: tuple
    k: int
    rounds: int = 50
    m: int = 0
    degree: float = 0.0
    kinds: tuple = ()
    local_epochs: int = 1
    local_batch: int = 32
    local_lr: float = 0.05
    loss_clip: float = 5.0
    kappa: float = 64.0
    target_delta: float = 0.95
    beta: tuple = DEFAULT_BETA
    seed: int = 0
    embed_dim: int | None = None  # only used when qnet is None

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def round_rewards(env: EpisodeEnv, qnet, result, action,
                  prev_global: FlatParams) -> RewardParts:
    """Compound reward for one finished round."""
    r1 = reward_r1(result.global_accuracy, result.fedavg_shadow_accuracy,
                   env.target_delta, env.kappa)
    if qnet is not None:
        marks = normalize_scores(score_params(qnet, result.uploads))
        r2 = reward_r2(marks, action)
    else:
        r2 = 0.0
    r3 = reward_r3(prev_global, result.global_params)
    return compound_reward(r1, r2, r3, env.beta)


def train_episode(agent: SacAgent, buf: ReplayBuffer, env: EpisodeEnv,
                  qnet, episode: int, updates_per_round: int = 1,
                  update_batch: int = 64, actor_warmup: int = 0):
    """One episode: fresh global model, fresh defect draw, env.rounds rounds.

    actor_warmup holds the actor (and temperature) fixed for that many
    critic steps. The untouched actor keeps sampling diffuse actions, so
    the critic first fits the region where the reward is informative
    instead of handing the actor extrapolated values to chase.

    Returns (discounted compound return G, per-round record dicts).
    """
    plan = sample_plan(env.num_clients, env.m, env.degree, env.kinds,
                       seed=env.seed, episode=episode)
    global_params = init_params(env.client_manifest,
                                seed=derive_rng(env.seed, "init", episode)
                                .integers(0, 2 ** 31))
    clients = [ClientState(i, ix, global_params.copy())
               for i, ix in enumerate(env.client_indices)]
    act_rng = derive_rng(env.seed, "act", episode)
    update_rng = derive_rng(env.seed, "update", episode)

    prev_action = fedavg_weights(env.k)
    pending = None  # (state, action, reward) awaiting its next_state
    g_return = 0.0
    records = []
    total_updates = max(env.rounds * updates_per_round, 1)

    for t in range(1, env.rounds + 1):
        holder = {}

        def choose(ctx):
            state = build_state(qnet, ctx.server_params, ctx.uploads,
                                ctx.local_losses, prev_action,
                                loss_clip=env.loss_clip,
                                embed_dim=env.embed_dim)
            action, logp = agent.act(state, deterministic=False, rng=act_rng)
            holder["state"] = state
            holder["action"] = action
            return action

        prev_global = global_params
        result = run_round(
            clients, global_params, env.dataset, env.eval_dataset, env.k,
            choose, plan, round_idx=t - 1,
            train_seed=derive_seed_for_episode(env.seed, episode),
            select_rng=derive_rng(env.seed, "select", episode, t),
            epochs=env.local_epochs, batch_size=env.local_batch,
            lr=env.local_lr)
        global_params = result.global_params

        parts = round_rewards(env, qnet, result, holder["action"], prev_global)
        g_return += (agent.gamma ** (t - 1)) * parts.total
        state_flat = holder["state"].flat()
        if pending is not None:
            s_prev, a_prev, r_prev = pending
            buf.push(Transition(s_prev, a_prev, r_prev, state_flat, False))
        pending = (state_flat, holder["action"], parts.total)
        prev_action = holder["action"]

        records.append({
            "round": t,
            "accuracy": result.global_accuracy,
            "shadow_accuracy": result.fedavg_shadow_accuracy,
            "r1": parts.r1, "r2": parts.r2, "r3": parts.r3,
            "reward": parts.total,
            "weights": holder["action"],
            "defect_flags": result.defect_flags,
        })

        for u in range(1, updates_per_round + 1):
            if len(buf) < update_batch:
                continue
            t_dot = (t - 1) * updates_per_round + u
            items, is_w, ids = buf.sample(update_batch, t_dot, total_updates,
                                          update_rng)
            states = np.stack([tr.state for tr in items])
            actions = np.stack([tr.action for tr in items])
            rewards = np.array([tr.reward for tr in items])
            next_states = np.stack([tr.next_state for tr in items])
            dones = np.array([tr.done for tr in items], dtype=np.float64)
            _, tds = agent.critic_update(states, actions, rewards,
                                         next_states, dones, is_w, update_rng)
            if agent.critic_steps > actor_warmup:
                agent.actor_update(states, update_rng)
            agent.soft_target_update()
            buf.update_priorities(
                ids, [priority_from_td(a, b, buf.cfg.epsilon) for a, b in tds])

    if pending is not None:
        s_last, a_last, r_last = pending
        buf.push(Transition(s_last, a_last, r_last, s_last, True))
    return g_return, records


def derive_seed_for_episode(seed: int, episode: int) -> int:
    """Stable sub-seed for local-training streams within one episode."""
    return int(derive_rng(seed, "train", episode).integers(0, 2 ** 31))
