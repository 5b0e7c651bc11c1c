"""CTDE actor-critic trainer with consensus-augmented inputs.

Execution is decentralized: each agent's policy sees only its own observation,
the consensus vector fused from its own observation history, and (under
parameter sharing) its agent index. Training is centralized: the critic sees
the global state concatenated with every agent's consensus vector, and updates
use the whole batch.

Defaults are PPO-style (clipped surrogate, GAE, entropy bonus). Two fidelity
modes are kept behind flags: ``literal_pg`` ascends plain ``log pi * A``, and
``target_critic`` bootstraps the value target from an EMA copy of the critic.
With ``consensus=False`` the trainer degrades to a plain MAPPO-style baseline:
all consensus inputs are zero-filled (widths unchanged) and the hierarchy is
never trained, so ablations differ only in the information content of those
slots.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamState,
    MlpSpec,
    ParameterSet,
    Tensor,
    adam_step,
    backward,
    concat,
    ema_blend,
    exp,
    gather_rows,
    init_mlp,
    mlp_forward,
    no_grad,
    reshape,
    safe_log,
    softmax,
    take_per_row,
    tmean,
    tsum,
)
from .consensus import agreement_rate, consensus_categories, consensus_category
from .envs import Env, EnvConfig, EpisodeResult, N_ACTIONS
from .hierarchy import (
    Hierarchy,
    HierarchyConfig,
    ObservationHistory,
    TimestepGroup,
    aggregate_attention,
    attention_layer_shares,
    hierarchy_train_step,
)
from .rng import stream


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; every range is checked at construction."""

    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    update_epochs: int = 4
    minibatch_size: int = 256
    rollout_steps: int = 64          # env steps per instance per iteration
    n_envs: int = 4                  # independent environment instances
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    aggregator_lr: float = 1e-3      # attention fusion, trained by RL gradients
    hierarchy_lr: float = 1e-3       # consensus students, trained by distillation
    entropy_coef: float = 0.01
    consensus: bool = True           # False: zero-filled consensus slots (baseline)
    literal_pg: bool = False         # plain log-prob * advantage objective
    target_critic: bool = False      # bootstrap targets from an EMA critic copy
    target_momentum: float = 0.99
    share_actor: bool = True         # one actor + agent one-hot vs per-agent actors
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (128, 128)
    activation: str = "tanh"
    consensus_pretrain_steps: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_epsilon <= 0.0:
            raise ValueError(f"clip_epsilon must be > 0, got {self.clip_epsilon}")
        for name in ("update_epochs", "minibatch_size", "rollout_steps", "n_envs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("actor_lr", "critic_lr", "aggregator_lr", "hierarchy_lr",
                     "entropy_coef"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.target_momentum <= 1.0:
            raise ValueError(
                f"target_momentum must be in [0, 1], got {self.target_momentum}"
            )
        if self.consensus_pretrain_steps < 0:
            raise ValueError("consensus_pretrain_steps must be >= 0")


# ---------------------------------------------------------------------------
# rollout storage


@dataclass
class RolloutSegment:
    """One instance's slice of a rollout, in step order.

    categories are the discrete per-layer consensus assignments made during
    collection; updates re-embed them on the tape so aggregator gradients flow.
    """

    obs: np.ndarray            # [T, n, obs_dim]
    consensus: np.ndarray      # [T, n, d_c] vectors used when acting
    categories: np.ndarray     # [T, n, n_layers] ints
    actions: np.ndarray        # [T, n] ints
    log_probs: np.ndarray      # [T, n]
    rewards: np.ndarray        # [T] shared reward
    values: np.ndarray         # [T] centralized value estimates
    dones: np.ndarray          # [T] bool
    states: np.ndarray         # [T, state_dim]
    bootstrap_value: float     # V after the last step; 0 when that step ended
    final_state: np.ndarray    # [state_dim] global state after the last step
    final_categories: np.ndarray  # [n, n_layers]; zeros when done

    @property
    def steps(self) -> int:
        return self.rewards.shape[0]


@dataclass
class RolloutBuffer:
    """All segments of one collection pass plus bookkeeping for the updates."""

    segments: list
    groups: list = field(default_factory=list)      # TimestepGroup per (env, step)
    episodes: list = field(default_factory=list)    # EpisodeResult, completed only
    env_steps: int = 0
    attention_shares: np.ndarray | None = None      # [n_layers] mean received mass
    advantages: np.ndarray | None = None            # [total_steps], segment order
    returns: np.ndarray | None = None
    actor_consumed: bool = False

    @property
    def total_steps(self) -> int:
        return sum(seg.steps for seg in self.segments)

    def stacked(self, name: str) -> np.ndarray:
        return np.concatenate([getattr(seg, name) for seg in self.segments], axis=0)


def compute_returns_advantages(
    buffer: RolloutBuffer,
    cfg: TrainConfig,
    gamma: float | None = None,
    gae_lambda: float | None = None,
):
    """GAE advantages and discounted returns, stored on the buffer.

    Episode boundaries (done flags) cut both the bootstrap and the recursion,
    so value estimates never leak across episodes. ``gamma``/``gae_lambda``
    override the config for analysis (e.g. the myopic gamma=0 case, which the
    config's open interval excludes).
    """
    if not buffer.segments or buffer.total_steps == 0:
        raise ValueError("cannot compute returns for an empty rollout buffer")
    g = cfg.gamma if gamma is None else gamma
    lam = cfg.gae_lambda if gae_lambda is None else gae_lambda
    if not 0.0 <= g <= 1.0 or not 0.0 <= lam <= 1.0:
        raise ValueError(f"gamma/gae_lambda overrides must be in [0, 1], got {g}, {lam}")
    adv_parts, ret_parts = [], []
    for seg in buffer.segments:
        T = seg.steps
        adv = np.zeros(T)
        running = 0.0
        for t in reversed(range(T)):
            live = 0.0 if seg.dones[t] else 1.0
            next_v = seg.bootstrap_value if t == T - 1 else seg.values[t + 1]
            delta = seg.rewards[t] + g * next_v * live - seg.values[t]
            running = delta + g * lam * live * running
            adv[t] = running
        adv_parts.append(adv)
        ret_parts.append(adv + seg.values)
    buffer.advantages = np.concatenate(adv_parts)
    buffer.returns = np.concatenate(ret_parts)
    return buffer.returns, buffer.advantages


def normalize_advantages(advantages) -> np.ndarray:
    """Shift/scale to mean 0, std 1. Single-sample batches pass through raw
    (there is no scale to learn from one sample); zero-spread batches are only
    centered so all-equal advantages stay finite."""
    a = np.asarray(advantages, dtype=np.float64).reshape(-1)
    if a.size <= 1:
        return a.copy()
    centered = a - a.mean()
    sd = a.std()
    if sd <= 1e-12:
        return centered
    return centered / sd


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One action index per row by inverse-CDF sampling."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1))
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


# ---------------------------------------------------------------------------
# trainer


@dataclass
class _Instance:
    """One environment's live rollout state (persists across iterations)."""

    index: int
    env: Env
    history: ObservationHistory | None = None
    obs: np.ndarray | None = None
    ep_reward: float = 0.0
    episode_index: int = -1


class Trainer:
    """Owns the nets, the consensus hierarchy, and the environment instances.

    All randomness flows through named streams derived from the root seed and
    the iteration counter, so a checkpoint (parameters + optimizer moments +
    live environment snapshots) resumes bitwise-identically.
    """

    def __init__(
        self,
        env_cfg: EnvConfig,
        cfg: TrainConfig | None = None,
        hier_cfg: HierarchyConfig | None = None,
        seed: int = 0,
    ):
        self.env_cfg = env_cfg
        self.cfg = cfg or TrainConfig()
        self.hier_cfg = hier_cfg or HierarchyConfig(obs_dim=env_cfg.obs_dim)
        if self.hier_cfg.obs_dim != env_cfg.obs_dim:
            raise ValueError(
                f"hierarchy expects obs_dim {self.hier_cfg.obs_dim}, "
                f"environment provides {env_cfg.obs_dim}"
            )
        self.seed = int(seed)
        self.iteration = 0
        self.env_steps = 0

        n = env_cfg.n_agents
        d_c = self.hier_cfg.embed_dim
        self.hier = Hierarchy(
            self.hier_cfg, stream(self.seed, "init/hierarchy"),
            head_lr=self.cfg.hierarchy_lr,
        )

        self.actor = ParameterSet()
        act_rng = stream(self.seed, "init/actor")
        if self.cfg.share_actor:
            sizes = (env_cfg.obs_dim + d_c + n, *self.cfg.actor_hidden, N_ACTIONS)
            spec = MlpSpec(sizes, self.cfg.activation, prefix="actor")
            init_mlp(self.actor, spec, act_rng)
            self.actor_specs = [spec] * n
        else:
            self.actor_specs = []
            for i in range(n):
                sizes = (env_cfg.obs_dim + d_c, *self.cfg.actor_hidden, N_ACTIONS)
                spec = MlpSpec(sizes, self.cfg.activation, prefix=f"actor{i}")
                init_mlp(self.actor, spec, act_rng)
                self.actor_specs.append(spec)

        self.critic = ParameterSet()
        self.critic_spec = MlpSpec(
            (env_cfg.state_dim + n * d_c, *self.cfg.critic_hidden, 1),
            self.cfg.activation, prefix="critic",
        )
        init_mlp(self.critic, self.critic_spec, stream(self.seed, "init/critic"))
        self.critic_target = self.critic.copy() if self.cfg.target_critic else None

        self.actor_opt = AdamState.for_params(self.actor, lr=self.cfg.actor_lr)
        self.critic_opt = AdamState.for_params(self.critic, lr=self.cfg.critic_lr)
        self.agg_opt = AdamState.for_params(self.hier.agg, lr=self.cfg.aggregator_lr)

        self.instances = [_Instance(i, Env(env_cfg)) for i in range(self.cfg.n_envs)]

    # -- shared forward passes ----------------------------------------------

    @property
    def n_layers(self) -> int:
        return self.hier.n_layers

    def _consensus_tensor(self, categories_2d: np.ndarray) -> Tensor:
        """[B, n_layers] int categories -> [B, d_c] vectors (tape-aware)."""
        if self.cfg.consensus:
            return self.hier.consensus_vectors(categories_2d)
        return Tensor(np.zeros((len(categories_2d), self.hier_cfg.embed_dim)))

    def _actor_logits(self, obs_t: Tensor, cons_t: Tensor, agent_ids: np.ndarray) -> Tensor:
        rows = len(agent_ids)
        n = self.env_cfg.n_agents
        if self.cfg.share_actor:
            onehot = np.zeros((rows, n))
            onehot[np.arange(rows), agent_ids] = 1.0
            x = concat([obs_t, cons_t, Tensor(onehot)], axis=1)
            return mlp_forward(self.actor, x, self.actor_specs[0])
        x = concat([obs_t, cons_t], axis=1)
        order = np.argsort(agent_ids, kind="stable")
        outs = []
        start = 0
        for i in range(n):
            count = int(np.count_nonzero(agent_ids == i))
            if count == 0:
                continue
            block = gather_rows(x, order[start:start + count])
            outs.append(mlp_forward(self.actor, block, self.actor_specs[i]))
            start += count
        merged = concat(outs, axis=0) if len(outs) > 1 else outs[0]
        inverse = np.empty_like(order)
        inverse[order] = np.arange(rows)
        return gather_rows(merged, inverse)

    def _critic_forward(self, states: np.ndarray, cons2d, params: ParameterSet) -> Tensor:
        """states [B, state_dim] + consensus block [B, n*d_c] -> [B] values."""
        x = concat([Tensor(states), cons2d], axis=1)
        out = mlp_forward(params, x, self.critic_spec)
        return reshape(out, (states.shape[0],))

    def _critic_values(self, states: np.ndarray, categories: np.ndarray,
                       params: ParameterSet) -> Tensor:
        """[B, state_dim] + [B, n, n_layers] -> [B] values on the tape."""
        B, n = categories.shape[0], self.env_cfg.n_agents
        cons = self._consensus_tensor(categories.reshape(B * n, self.n_layers))
        return self._critic_forward(
            states, reshape(cons, (B, n * self.hier_cfg.embed_dim)), params
        )

    # -- acting ---------------------------------------------------------------

    def policy_probs(self, obs_rows: np.ndarray, cons_rows: np.ndarray,
                     agent_ids: np.ndarray) -> np.ndarray:
        """Action distributions for a batch of agent rows (no tape)."""
        with no_grad():
            logits = self._actor_logits(Tensor(obs_rows), Tensor(cons_rows),
                                        np.asarray(agent_ids, dtype=np.intp))
            return softmax(logits).values

    def act_rows(self, obs_rows, cons_rows, agent_ids, rng=None, greedy=False):
        """Sample (or argmax) one action per row; returns (actions, log_probs)."""
        probs = self.policy_probs(obs_rows, cons_rows, agent_ids)
        if greedy:
            actions = probs.argmax(axis=1)
        else:
            if rng is None:
                raise ValueError("sampling actions requires an rng (or greedy=True)")
            actions = sample_categorical(probs, rng)
        logp = np.log(probs[np.arange(len(actions)), actions])
        return actions.astype(np.intp), logp

    # -- rollout collection ----------------------------------------------------

    def _reset_instance(self, inst: _Instance, episodes_out: list) -> None:
        n = self.env_cfg.n_agents
        attempts = 0
        while True:
            if inst.env._rng is not None and inst.env.done:
                steps = (inst.env.success_step if inst.env.success
                         else self.env_cfg.step_limit)
                episodes_out.append(
                    EpisodeResult(inst.env.success, steps, inst.ep_reward)
                )
            inst.episode_index += 1
            obs = inst.env.reset(
                stream(self.seed, f"env/{inst.index}/{inst.episode_index}")
            )
            inst.history = self.hier.new_history(n)
            inst.history.append(0, obs)
            inst.obs = obs
            inst.ep_reward = 0.0
            if not inst.env.done:
                return
            attempts += 1
            if attempts > 8:
                raise ValueError(
                    f"task '{self.env_cfg.task}' keeps completing at reset; "
                    "there is nothing to train on"
                )

    def _local_windows(self, instances) -> tuple[list, np.ndarray]:
        """Per-layer stacked windows across instances, plus categories.

        Returns (windows, categories): windows[layer] is [E*n, window*obs_dim]
        in instance order, categories is [E, n, n_layers]. Every row is built
        from one agent's own history only. In baseline mode no windows are
        built and the categories are all zeros (the aggregator never runs).
        """
        E, n = len(instances), self.env_cfg.n_agents
        if not self.cfg.consensus:
            return [], np.zeros((E, n, self.n_layers), dtype=np.intp)
        windows = []
        for spec in self.hier_cfg.layers:
            per_inst = [
                inst.history.window_all(spec, inst.env.t) for inst in instances
            ]
            windows.append(np.concatenate(per_inst, axis=0))
        cols = [
            consensus_categories(head, win)
            for head, win in zip(self.hier.heads, windows)
        ]
        cats = np.stack(cols, axis=1).reshape(E, n, self.n_layers)
        return windows, cats

    def collect_rollouts(self, rng: np.random.Generator) -> RolloutBuffer:
        cfg, env_cfg = self.cfg, self.env_cfg
        E, n, T = cfg.n_envs, env_cfg.n_agents, cfg.rollout_steps
        d_c, L = self.hier_cfg.embed_dim, self.n_layers

        store = {
            "obs": np.zeros((E, T, n, env_cfg.obs_dim)),
            "consensus": np.zeros((E, T, n, d_c)),
            "categories": np.zeros((E, T, n, L), dtype=np.intp),
            "actions": np.zeros((E, T, n), dtype=np.intp),
            "log_probs": np.zeros((E, T, n)),
            "rewards": np.zeros((E, T)),
            "values": np.zeros((E, T)),
            "dones": np.zeros((E, T), dtype=bool),
            "states": np.zeros((E, T, env_cfg.state_dim)),
        }
        groups: list[TimestepGroup] = []
        episodes: list[EpisodeResult] = []
        share_sum = np.zeros(L)
        share_count = 0

        for step in range(T):
            for inst in self.instances:
                if inst.env.done:
                    self._reset_instance(inst, episodes)
            windows, cats = self._local_windows(self.instances)
            if cfg.consensus:
                for inst in self.instances:
                    t = inst.env.t
                    i0 = inst.index * n
                    groups.append(TimestepGroup(
                        np.full(n, t),
                        [win[i0:i0 + n] for win in windows],
                    ))
                with no_grad():
                    vec, weights = self.hier.consensus_vectors(
                        cats.reshape(E * n, L), return_weights=True
                    )
                cons = vec.values.reshape(E, n, d_c)
                share_sum += attention_layer_shares(weights)
                share_count += 1
            else:
                cons = np.zeros((E, n, d_c))
            obs = np.stack([inst.obs for inst in self.instances])
            states = np.stack([inst.env.global_state() for inst in self.instances])
            with no_grad():
                values = self._critic_forward(
                    states, Tensor(cons.reshape(E, n * d_c)), self.critic
                ).values
            actions, logps = self.act_rows(
                obs.reshape(E * n, -1), cons.reshape(E * n, -1),
                np.tile(np.arange(n), E), rng,
            )
            actions = actions.reshape(E, n)
            logps = logps.reshape(E, n)

            for e, inst in enumerate(self.instances):
                store["obs"][e, step] = obs[e]
                store["consensus"][e, step] = cons[e]
                store["categories"][e, step] = cats[e]
                store["actions"][e, step] = actions[e]
                store["log_probs"][e, step] = logps[e]
                store["states"][e, step] = states[e]
                store["values"][e, step] = values[e]
                next_obs, reward, done, _ = inst.env.step(actions[e])
                store["rewards"][e, step] = reward
                store["dones"][e, step] = done
                inst.ep_reward += reward
                if not done:
                    inst.history.append(inst.env.t, next_obs)
                    inst.obs = next_obs

        segments = []
        final_states = np.stack(
            [inst.env.global_state() for inst in self.instances]
        )
        live = [inst for inst in self.instances if not inst.env.done]
        final_cats = np.zeros((E, n, L), dtype=np.intp)
        if live:
            _, live_cats = self._local_windows(live)
            for j, inst in enumerate(live):
                final_cats[inst.index] = live_cats[j]
        with no_grad():
            final_values = self._critic_values(
                final_states, final_cats, self.critic
            ).values
        for e, inst in enumerate(self.instances):
            segments.append(RolloutSegment(
                obs=store["obs"][e], consensus=store["consensus"][e],
                categories=store["categories"][e], actions=store["actions"][e],
                log_probs=store["log_probs"][e], rewards=store["rewards"][e],
                values=store["values"][e], dones=store["dones"][e],
                states=store["states"][e],
                bootstrap_value=0.0 if inst.env.done else float(final_values[e]),
                final_state=final_states[e],
                final_categories=final_cats[e],
            ))
        self.env_steps += T * E
        return RolloutBuffer(
            segments=segments, groups=groups, episodes=episodes, env_steps=T * E,
            attention_shares=(share_sum / share_count) if share_count else None,
        )

    # -- updates ----------------------------------------------------------------

    def _critic_targets(self, buffer: RolloutBuffer) -> np.ndarray:
        if self.cfg.target_critic:
            parts = []
            with no_grad():
                for seg in buffer.segments:
                    next_states = np.concatenate(
                        [seg.states[1:], seg.final_state[None]], axis=0
                    )
                    next_cats = np.concatenate(
                        [seg.categories[1:], seg.final_categories[None]], axis=0
                    )
                    next_v = self._critic_values(
                        next_states, next_cats, self.critic_target
                    ).values
                    live = 1.0 - seg.dones.astype(np.float64)
                    parts.append(seg.rewards + self.cfg.gamma * next_v * live)
            return np.concatenate(parts)
        return buffer.returns

    def critic_update(self, buffer: RolloutBuffer, rng: np.random.Generator) -> float:
        """Fit values to targets over epochs of minibatches; returns the
        pre-update full-batch loss."""
        if buffer.returns is None:
            raise ValueError("compute_returns_advantages must run before critic_update")
        states = buffer.stacked("states")
        cats = buffer.stacked("categories")
        targets = self._critic_targets(buffer)
        N = states.shape[0]

        with no_grad():
            v0 = self._critic_values(states, cats, self.critic).values
        pre_loss = float(np.mean((v0 - targets) ** 2))

        self.critic.zero_grads()
        self.hier.agg.zero_grads()
        for _ in range(self.cfg.update_epochs):
            order = rng.permutation(N)
            for lo in range(0, N, self.cfg.minibatch_size):
                rows = order[lo:lo + self.cfg.minibatch_size]
                v = self._critic_values(states[rows], cats[rows], self.critic)
                err = v - Tensor(targets[rows])
                loss = tmean(err * err)
                backward(loss)
                adam_step(self.critic_opt, self.critic)
                if self.cfg.consensus:
                    adam_step(self.agg_opt, self.hier.agg)
                else:
                    self.hier.agg.zero_grads()
        if self.cfg.target_critic:
            ema_blend(self.critic_target, self.critic, self.cfg.target_momentum)
        return pre_loss

    def _actor_objective(self, obs, cats, agent_ids, actions, old_logp, adv) -> Tensor:
        """Scalar objective (to ascend) for one batch of agent-step samples."""
        cons = self._consensus_tensor(cats)
        logits = self._actor_logits(Tensor(obs), cons, agent_ids)
        probs = softmax(logits)
        logp = take_per_row(safe_log(probs), actions)
        if self.cfg.literal_pg:
            return tmean(logp * Tensor(adv))
        ratio = exp(logp - Tensor(old_logp))
        r = ratio.values
        clipped = np.clip(r, 1.0 - self.cfg.clip_epsilon, 1.0 + self.cfg.clip_epsilon)
        unclipped_wins = (r * adv <= clipped * adv)
        surrogate = (
            Tensor(unclipped_wins.astype(np.float64)) * (ratio * Tensor(adv))
            + Tensor(np.where(unclipped_wins, 0.0, clipped * adv))
        )
        entropy = tsum(probs * safe_log(probs), axis=-1) * (-1.0)
        return tmean(surrogate) + tmean(entropy) * self.cfg.entropy_coef

    def actor_update(self, buffer: RolloutBuffer, rng: np.random.Generator) -> float:
        """PPO/literal policy step over epochs of minibatches; returns the
        pre-update full-batch objective."""
        if buffer.advantages is None:
            raise ValueError("compute_returns_advantages must run before actor_update")
        if buffer.actor_consumed:
            raise ValueError(
                "stale rollout buffer: the actor already consumed its epochs; "
                "collect fresh rollouts before updating again"
            )
        n = self.env_cfg.n_agents
        obs = buffer.stacked("obs").reshape(-1, self.env_cfg.obs_dim)
        cats = buffer.stacked("categories").reshape(-1, self.n_layers)
        actions = buffer.stacked("actions").reshape(-1)
        old_logp = buffer.stacked("log_probs").reshape(-1)
        agent_ids = np.tile(np.arange(n), buffer.total_steps)
        adv = normalize_advantages(np.repeat(buffer.advantages, n))
        N = obs.shape[0]

        with no_grad():
            pre = self._actor_objective(
                obs, cats, agent_ids, actions, old_logp, adv
            ).item()

        self.actor.zero_grads()
        self.hier.agg.zero_grads()
        for _ in range(self.cfg.update_epochs):
            order = rng.permutation(N)
            for lo in range(0, N, self.cfg.minibatch_size):
                rows = order[lo:lo + self.cfg.minibatch_size]
                objective = self._actor_objective(
                    obs[rows], cats[rows], agent_ids[rows],
                    actions[rows], old_logp[rows], adv[rows],
                )
                backward(objective * (-1.0))
                adam_step(self.actor_opt, self.actor)
                if self.cfg.consensus:
                    adam_step(self.agg_opt, self.hier.agg)
                else:
                    self.hier.agg.zero_grads()
        buffer.actor_consumed = True
        return pre

    # -- the full loop ------------------------------------------------------------

    def train_iteration(self) -> dict:
        """Collect rollouts, train the hierarchy on same-timestep groups, then
        update critic and actor. Returns one flat metrics record."""
        t0 = time.perf_counter()
        k = self.iteration
        buffer = self.collect_rollouts(stream(self.seed, f"iter/{k}/rollout"))

        layer_losses = [float("nan")] * self.n_layers
        agree = float("nan")
        shares = [float("nan")] * self.n_layers
        if self.cfg.consensus:
            layer_losses = hierarchy_train_step(self.hier, buffer.groups)
            cats = buffer.stacked("categories")  # [N, n, L]
            if self.env_cfg.n_agents > 1:
                agree = float(np.mean([
                    agreement_rate(cats[g, :, layer])
                    for g in range(cats.shape[0])
                    for layer in range(self.n_layers)
                ]))
            else:
                agree = 1.0
            if buffer.attention_shares is not None:
                shares = [float(s) for s in buffer.attention_shares]

        compute_returns_advantages(buffer, self.cfg)
        critic_loss = self.critic_update(buffer, stream(self.seed, f"iter/{k}/critic"))
        actor_obj = self.actor_update(buffer, stream(self.seed, f"iter/{k}/actor"))

        eps = buffer.episodes
        record = {
            "iteration": k,
            "env_steps": self.env_steps,
            "episodes_completed": len(eps),
            "mean_episode_reward": (
                float(np.mean([r.total_reward for r in eps])) if eps else float("nan")
            ),
            "mean_steps_to_complete": (
                float(np.mean([r.steps_to_complete for r in eps])) if eps else float("nan")
            ),
            "success_rate": (
                float(np.mean([r.success for r in eps])) if eps else float("nan")
            ),
            "agreement_rate": agree,
            "critic_loss": critic_loss,
            "actor_objective": actor_obj,
        }
        for i, loss in enumerate(layer_losses):
            record[f"consensus_loss_layer{i}"] = float(loss)
        for i, s in enumerate(shares):
            record[f"attention_share_layer{i}"] = float(s)
        record["wall_clock_s"] = time.perf_counter() - t0
        self.iteration += 1
        return record

    def pretrain_consensus(self, steps: int) -> list[float]:
        """Hierarchy-only warmup: collect rollouts with the current (random)
        policy and run distillation steps, skipping the RL updates."""
        last = []
        for j in range(steps):
            buffer = self.collect_rollouts(stream(self.seed, f"pretrain/{j}"))
            last = hierarchy_train_step(self.hier, buffer.groups)
        return last

    # -- evaluation ----------------------------------------------------------------

    def evaluate(self, episodes: int, seed: int | None = None,
                 greedy: bool = True) -> list[EpisodeResult]:
        """Fresh-environment episodes with the current policy (greedy by default)."""
        if episodes < 1:
            raise ValueError(f"evaluation needs at least one episode, got {episodes}")
        root = self.seed if seed is None else int(seed)
        n = self.env_cfg.n_agents
        results = []
        for ep in range(episodes):
            env = Env(self.env_cfg)
            obs = env.reset(stream(root, f"eval/{ep}/env"))
            act_rng = stream(root, f"eval/{ep}/act")
            history = self.hier.new_history(n)
            history.append(0, obs)
            total = 0.0
            while not env.done:
                cats = self._categories_for(history, env.t)
                with no_grad():
                    cons = self._consensus_tensor(cats).values
                actions, _ = self.act_rows(
                    obs, cons, np.arange(n), act_rng, greedy=greedy
                )
                obs_next, reward, done, _ = env.step(actions)
                total += reward
                if not done:
                    history.append(env.t, obs_next)
                    obs = obs_next
            steps = env.success_step if env.success else self.env_cfg.step_limit
            results.append(EpisodeResult(env.success, steps, total))
        return results

    def _categories_for(self, history: ObservationHistory, t: int) -> np.ndarray:
        if not self.cfg.consensus:
            return np.zeros((self.env_cfg.n_agents, self.n_layers), dtype=np.intp)
        return self.hier.categories_all(history, t)

    # -- snapshots -------------------------------------------------------------------

    def state(self) -> dict:
        return {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "actor": {k: p.values.copy() for k, p in self.actor.items()},
            "critic": {k: p.values.copy() for k, p in self.critic.items()},
            "critic_target": (
                {k: p.values.copy() for k, p in self.critic_target.items()}
                if self.critic_target is not None else None
            ),
            "opt_actor": self.actor_opt.state(),
            "opt_critic": self.critic_opt.state(),
            "opt_agg": self.agg_opt.state(),
            "hierarchy": self.hier.state(),
            "instances": [
                {
                    "episode_index": inst.episode_index,
                    "ep_reward": inst.ep_reward,
                    "env": inst.env.state() if inst.env._rng is not None else None,
                    "history": inst.history.state() if inst.history else None,
                }
                for inst in self.instances
            ],
        }

    def load_state(self, state: dict) -> None:
        self.iteration = int(state["iteration"])
        self.env_steps = int(state["env_steps"])
        for k, p in self.actor.items():
            p.values[...] = np.asarray(state["actor"][k])
        for k, p in self.critic.items():
            p.values[...] = np.asarray(state["critic"][k])
        if self.critic_target is not None:
            for k, p in self.critic_target.items():
                p.values[...] = np.asarray(state["critic_target"][k])
        self.actor_opt.load_state(state["opt_actor"])
        self.critic_opt.load_state(state["opt_critic"])
        self.agg_opt.load_state(state["opt_agg"])
        self.hier.load_state(state["hierarchy"])
        n = self.env_cfg.n_agents
        for inst, snap in zip(self.instances, state["instances"]):
            inst.episode_index = int(snap["episode_index"])
            inst.ep_reward = float(snap["ep_reward"])
            if snap["env"] is not None:
                inst.env.load_state(snap["env"])
                inst.history = self.hier.new_history(n)
                inst.history.load_state(snap["history"])
                inst.obs = inst.env.observe_all()


# ---------------------------------------------------------------------------
# single-row conveniences (decentralized-execution checks and evaluation)


def act(trainer: Trainer, obs_i, consensus_i, agent: int,
        rng: np.random.Generator | None = None, greedy: bool = False):
    """One agent's action and exact log-probability from its local inputs."""
    actions, logp = trainer.act_rows(
        np.asarray(obs_i, dtype=np.float64)[None],
        np.asarray(consensus_i, dtype=np.float64)[None],
        np.array([agent], dtype=np.intp), rng, greedy=greedy,
    )
    return int(actions[0]), float(logp[0])


def agent_policy_probs(trainer: Trainer, history: ObservationHistory,
                       obs_i, agent: int, t: int) -> np.ndarray:
    """Action distribution computed from agent-local inputs only: the agent's
    observation, its own history windows, and frozen network parameters."""
    if trainer.cfg.consensus:
        cats = [
            consensus_category(head, history.window(agent, spec, t))
            for head, spec in zip(trainer.hier.heads, trainer.hier_cfg.layers)
        ]
        with no_grad():
            cons = aggregate_attention(trainer.hier.agg, cats, trainer.hier_cfg).values
    else:
        cons = np.zeros(trainer.hier_cfg.embed_dim)
    return trainer.policy_probs(
        np.asarray(obs_i, dtype=np.float64)[None], cons[None],
        np.array([agent], dtype=np.intp),
    )[0]
