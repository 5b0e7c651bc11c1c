"""Multi-window consensus: per-layer heads over stacked observation histories,
fused into one vector by self-attention over the layers.

Each layer looks at a window of m past observations sampled `stride` apart
(m = 1 is the instantaneous layer; larger m sees slower structure). Every
layer runs its own teacher/student head and emits a discrete category; the
categories are embedded (learned table per layer, plus a layer-position
embedding), passed through multi-head attention across layers, and
mean-pooled into the fused consensus vector.

Gradients from downstream losses flow into the aggregator parameters only;
the categories are discrete, so the heads train exclusively through their
own distillation losses (a hard stop-gradient at the category boundary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    AutodiffError,
    ParameterSet,
    Tensor,
    adam_step,
    backward,
    concat,
    gather_rows,
    init_attention,
    multi_head_attention,
    no_grad,
    reshape,
    safe_log,
    tmean,
    tsum,
)
from .consensus import (
    ConsensusConfig,
    ConsensusHead,
    consensus_categories,
    consensus_category,
    student_distribution,
    teacher_distribution,
    teacher_logits,
    update_teacher,
)


@dataclass(frozen=True)
class LayerSpec:
    """One consensus layer: window of `window` observations, `stride` steps apart."""

    window: int
    stride: int = 1

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise AutodiffError(f"window and stride must be >= 1, got {self}")

    @property
    def span(self) -> int:
        return (self.window - 1) * self.stride + 1


DEFAULT_LAYERS = (LayerSpec(window=1, stride=1), LayerSpec(window=5, stride=3))


@dataclass(frozen=True)
class HierarchyConfig:
    """Layer windows plus shared head/aggregator shapes."""

    obs_dim: int
    layers: tuple[LayerSpec, ...] = DEFAULT_LAYERS
    categories: tuple[int, ...] | int = 8
    embed_dim: int = 16
    attention_heads: int = 4
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    teacher_momentum: float = 0.99
    center_momentum: float = 0.9
    include_self_pairs: bool = True

    def __post_init__(self):
        if not self.layers:
            raise AutodiffError("hierarchy needs at least one layer")
        if self.embed_dim % self.attention_heads != 0:
            raise AutodiffError(
                f"embed_dim {self.embed_dim} not divisible by {self.attention_heads} heads"
            )
        ks = self.layer_categories()
        if len(ks) != len(self.layers):
            raise AutodiffError(
                f"{len(ks)} category counts for {len(self.layers)} layers"
            )

    def layer_categories(self) -> tuple[int, ...]:
        if isinstance(self.categories, int):
            return tuple(self.categories for _ in self.layers)
        return tuple(self.categories)

    def consensus_config(self, layer: int) -> ConsensusConfig:
        spec = self.layers[layer]
        return ConsensusConfig(
            input_dim=spec.window * self.obs_dim,
            categories=self.layer_categories()[layer],
            hidden=self.hidden,
            activation=self.activation,
            student_temp=self.student_temp,
            teacher_temp=self.teacher_temp,
            teacher_momentum=self.teacher_momentum,
            center_momentum=self.center_momentum,
            include_self_pairs=self.include_self_pairs,
        )

    @property
    def history_capacity(self) -> int:
        return max(spec.span for spec in self.layers)


class ObservationHistory:
    """Rolling window of recent observations for every agent in one world.

    Timesteps must arrive strictly increasing and the buffer is cleared at
    episode reset, so "earliest available" always means the episode's first
    stored observation while any left-padding can still be needed.
    """

    def __init__(self, n_agents: int, obs_dim: int, capacity: int):
        if capacity < 1:
            raise AutodiffError(f"history capacity must be >= 1, got {capacity}")
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.capacity = capacity
        self.reset()

    def reset(self) -> None:
        self._obs: list[np.ndarray] = []
        self._steps: list[int] = []

    def __len__(self) -> int:
        return len(self._steps)

    @property
    def latest_step(self) -> int:
        if not self._steps:
            raise AutodiffError("history is empty")
        return self._steps[-1]

    def append(self, t: int, obs) -> None:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (self.n_agents, self.obs_dim):
            raise AutodiffError(
                f"history expects [{self.n_agents}, {self.obs_dim}] observations, got {obs.shape}"
            )
        if self._steps and t <= self._steps[-1]:
            raise AutodiffError(
                f"timesteps must increase strictly: got {t} after {self._steps[-1]}"
            )
        self._obs.append(obs.copy())
        self._steps.append(int(t))
        if len(self._steps) > self.capacity:
            self._obs.pop(0)
            self._steps.pop(0)

    def _lookup(self, t: int) -> np.ndarray:
        if t <= self._steps[0]:
            return self._obs[0]  # left-pad with the earliest available
        try:
            return self._obs[self._steps.index(t)]
        except ValueError:
            raise AutodiffError(
                f"timestep {t} not in history (stored: {self._steps})"
            ) from None

    def window_all(self, spec: LayerSpec, t: int) -> np.ndarray:
        """[n_agents, window*obs_dim] stacked inputs, newest first."""
        if not self._steps:
            raise AutodiffError("history is empty")
        parts = [self._lookup(t - j * spec.stride) for j in range(spec.window)]
        return np.concatenate(parts, axis=1)

    def window(self, agent: int, spec: LayerSpec, t: int) -> np.ndarray:
        """[window*obs_dim] stacked input for one agent, newest first."""
        if not 0 <= agent < self.n_agents:
            raise AutodiffError(f"agent {agent} out of range [0, {self.n_agents})")
        return self.window_all(spec, t)[agent]

    def state(self) -> dict:
        return {
            "steps": list(self._steps),
            "obs": [frame.copy() for frame in self._obs],
        }

    def load_state(self, state: dict) -> None:
        self._steps = [int(t) for t in state["steps"]]
        self._obs = [
            np.asarray(frame, dtype=np.float64).reshape(self.n_agents, self.obs_dim)
            for frame in state["obs"]
        ]


def build_layer_input(history: ObservationHistory, agent: int, spec: LayerSpec, t: int) -> np.ndarray:
    """Stacked window for one agent at timestep t (newest first, left-padded)."""
    return history.window(agent, spec, t)


# ---------------------------------------------------------------------------
# aggregator


def _embed_name(layer: int) -> str:
    return f"agg/embed{layer}"


def init_aggregator(params: ParameterSet, cfg: HierarchyConfig, rng: np.random.Generator) -> None:
    scale = 1.0 / np.sqrt(cfg.embed_dim)
    for layer, k in enumerate(cfg.layer_categories()):
        params.add(_embed_name(layer), rng.standard_normal((k, cfg.embed_dim)) * scale)
    params.add("agg/pos", rng.standard_normal((len(cfg.layers), cfg.embed_dim)) * scale)
    init_attention(params, cfg.embed_dim, cfg.attention_heads, rng, prefix="agg/attn")


def aggregate_attention_batch(
    params: ParameterSet,
    categories,
    cfg: HierarchyConfig,
    return_weights: bool = False,
):
    """Fuse per-layer categories into consensus vectors for a whole batch.

    categories is an integer array [B, n_layers]; the result is a Tensor
    [B, embed_dim], differentiable w.r.t. the aggregator parameters.
    """
    cats = np.asarray(categories, dtype=np.intp)
    if cats.ndim != 2 or cats.shape[1] != len(cfg.layers):
        raise AutodiffError(
            f"categories must be [batch, {len(cfg.layers)}], got {cats.shape}"
        )
    batch = cats.shape[0]
    n_layers = len(cfg.layers)
    pos = params["agg/pos"]
    tokens = []
    for layer in range(n_layers):
        rows = gather_rows(params[_embed_name(layer)], cats[:, layer])  # [B, d]
        rows = rows + gather_rows(pos, np.full(batch, layer, dtype=np.intp))
        tokens.append(reshape(rows, (batch, 1, cfg.embed_dim)))
    stacked = concat(tokens, axis=1)  # [B, L, d]
    out = multi_head_attention(
        params, stacked, cfg.attention_heads, prefix="agg/attn", return_weights=True
    )
    fused, weights = out
    pooled = tmean(fused, axis=1)  # [B, d]
    if return_weights:
        return pooled, weights
    return pooled


def aggregate_attention(
    params: ParameterSet,
    categories,
    cfg: HierarchyConfig,
    return_weights: bool = False,
):
    """Single-agent fusion: categories is a length-n_layers sequence of ints."""
    cats = np.asarray(categories, dtype=np.intp).reshape(1, -1)
    out = aggregate_attention_batch(params, cats, cfg, return_weights=True)
    pooled, weights = out
    vec = reshape(pooled, (cfg.embed_dim,))
    if return_weights:
        return vec, weights[0]  # [heads, L, L]
    return vec


# ---------------------------------------------------------------------------
# hierarchy: heads + aggregator + per-layer optimizers


@dataclass
class TimestepGroup:
    """Same-timestep stack of all agents' per-layer window inputs."""

    timesteps: np.ndarray  # [n_agents]
    layer_inputs: list  # per layer: [n_agents, window*obs_dim]

    def validate(self, n_layers: int) -> int:
        ts = np.asarray(self.timesteps)
        if ts.size == 0:
            raise AutodiffError("empty timestep group")
        if not np.all(ts == ts.reshape(-1)[0]):
            raise AutodiffError(
                f"mixed timesteps in one group: {ts.tolist()} (pairs must share a timestep)"
            )
        if len(self.layer_inputs) != n_layers:
            raise AutodiffError(
                f"group has {len(self.layer_inputs)} layer inputs, expected {n_layers}"
            )
        return int(ts.reshape(-1)[0])


class Hierarchy:
    """All per-layer heads plus the attention aggregator and head optimizers."""

    def __init__(self, cfg: HierarchyConfig, rng: np.random.Generator, head_lr: float = 1e-3):
        self.cfg = cfg
        self.heads = [
            ConsensusHead(cfg.consensus_config(i), rng, prefix=f"layer{i}")
            for i in range(len(cfg.layers))
        ]
        self.agg = ParameterSet()
        init_aggregator(self.agg, cfg, rng)
        self.head_opts = [AdamState.for_params(h.student, lr=head_lr) for h in self.heads]

    @property
    def n_layers(self) -> int:
        return len(self.cfg.layers)

    def new_history(self, n_agents: int) -> ObservationHistory:
        return ObservationHistory(n_agents, self.cfg.obs_dim, self.cfg.history_capacity)

    def categories_all(self, history: ObservationHistory, t: int) -> np.ndarray:
        """[n_agents, n_layers] categories from each agent's local history."""
        cols = []
        for spec, head in zip(self.cfg.layers, self.heads):
            inputs = history.window_all(spec, t)
            cols.append(consensus_categories(head, inputs))
        return np.stack(cols, axis=1)

    def consensus_vectors(self, categories, return_weights: bool = False):
        return aggregate_attention_batch(self.agg, categories, self.cfg, return_weights)

    def state(self) -> dict:
        return {
            "heads": [h.state() for h in self.heads],
            "agg": {n: p.values.copy() for n, p in self.agg.items()},
            "head_opts": [o.state() for o in self.head_opts],
        }

    def load_state(self, state: dict) -> None:
        for head, hs in zip(self.heads, state["heads"]):
            head.load_state(hs)
        for name, p in self.agg.items():
            p.values[...] = np.asarray(state["agg"][name])
        for opt, os in zip(self.head_opts, state["head_opts"]):
            opt.load_state(os)


def layer_consensus(hier: Hierarchy, layer_inputs) -> list[int]:
    """Per-layer categories for one agent's stacked inputs (one row per layer)."""
    if len(layer_inputs) != hier.n_layers:
        raise AutodiffError(
            f"{len(layer_inputs)} inputs for {hier.n_layers} layers"
        )
    return [
        consensus_category(head, np.asarray(x).reshape(-1))
        for head, x in zip(hier.heads, layer_inputs)
    ]


def _grouped_loss(head: ConsensusHead, inputs: np.ndarray) -> Tensor:
    """Mean over groups of the pairwise loss; inputs is [G, n, d].

    Batched equivalent of averaging consensus_loss over the G groups (one
    tape instead of G); asserted equal to the per-group route in tests.
    """
    g, n, d = inputs.shape
    flat = inputs.reshape(g * n, d)
    t = teacher_distribution(head, flat).reshape(g, n, -1)
    s = student_distribution(head, flat)
    s = reshape(s, (g, n, t.shape[-1]))
    col_sums = t.sum(axis=1, keepdims=True)  # [G, 1, K]
    total = tsum(Tensor(col_sums) * safe_log(s)) * (-1.0)
    if not head.cfg.include_self_pairs:
        if n < 2:
            raise AutodiffError("excluding self-pairs needs at least 2 views")
        total = total - tsum(Tensor(t) * safe_log(s)) * (-1.0)
    return total * (1.0 / g)


def hierarchy_train_step(hier: Hierarchy, groups: list[TimestepGroup]) -> list[float]:
    """One distillation step per layer over a batch of same-timestep groups.

    Each layer independently: compute the grouped pairwise loss, backprop
    into that layer's student, take one optimizer step, then EMA the teacher
    and refresh its center from the batch's teacher logits.
    """
    if not groups:
        raise AutodiffError("hierarchy_train_step needs at least one group")
    for grp in groups:
        grp.validate(hier.n_layers)
    losses = []
    for layer, head in enumerate(hier.heads):
        inputs = np.stack([np.asarray(grp.layer_inputs[layer]) for grp in groups])
        loss = _grouped_loss(head, inputs)
        losses.append(loss.item())
        backward(loss)
        adam_step(hier.head_opts[layer], head.student)
        flat = inputs.reshape(-1, inputs.shape[-1])
        update_teacher(head, teacher_logits(head, flat))
    return losses


def attention_layer_shares(weights: np.ndarray) -> np.ndarray:
    """Mean attention mass received by each layer: [.., heads, L, L] -> [L]."""
    w = np.asarray(weights)
    return w.mean(axis=tuple(range(w.ndim - 1)))
