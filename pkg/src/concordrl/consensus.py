"""Teacher/student self-distillation that turns local views into a shared category.

Several views of the same underlying situation are pushed through a student
projection (sharpened softmax) and a teacher projection (EMA copy of the
student, centered then sharpened harder). The loss is the cross-entropy of
every student view against every teacher view — all ordered pairs, self-pairs
included — so the views are pulled toward one distribution. Centering keeps
that distribution from collapsing onto a single category.

The discrete consensus category is the argmax of the student distribution;
ties resolve to the smallest index (first-occurrence argmax), so the category
is a pure function of the distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AutodiffError,
    MlpSpec,
    ParameterSet,
    Tensor,
    cross_entropy_soft,
    ema_blend,
    init_mlp,
    mlp_forward,
    no_grad,
    softmax,
)


@dataclass(frozen=True)
class ConsensusConfig:
    """Shape and temperatures of one consensus projection head."""

    input_dim: int
    categories: int
    hidden: tuple[int, ...] = (64, 64)
    # tanh, not relu: zero-centered features keep a fresh head's category
    # propensities near-uniform (pairwise agreement ~ 1/K at init); relu's
    # positive feature mean gives some category a large head start.
    activation: str = "tanh"
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    teacher_momentum: float = 0.99
    center_momentum: float = 0.9
    include_self_pairs: bool = True

    def __post_init__(self):
        if self.categories < 1:
            raise AutodiffError(f"need at least 1 category, got {self.categories}")
        if self.input_dim < 1:
            raise AutodiffError(f"input_dim must be positive, got {self.input_dim}")
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise AutodiffError("temperatures must be positive")
        if self.teacher_temp > self.student_temp:
            raise AutodiffError(
                f"teacher temperature {self.teacher_temp} must not exceed "
                f"student temperature {self.student_temp} (the teacher is the sharper one)"
            )
        if not 0.0 <= self.teacher_momentum <= 1.0:
            raise AutodiffError(
                f"teacher_momentum must be in [0,1], got {self.teacher_momentum}"
            )
        if not 0.0 <= self.center_momentum <= 1.0:
            raise AutodiffError(
                f"center_momentum must be in [0,1], got {self.center_momentum}"
            )


class ConsensusHead:
    """One student/teacher projection pair plus the teacher's logit center."""

    def __init__(self, cfg: ConsensusConfig, rng: np.random.Generator, prefix: str = "consensus"):
        self.cfg = cfg
        self.spec = MlpSpec(
            sizes=(cfg.input_dim, *cfg.hidden, cfg.categories),
            activation=cfg.activation,
            prefix=prefix,
        )
        self.student = ParameterSet()
        init_mlp(self.student, self.spec, rng)
        self.teacher = self.student.copy()
        self.center = np.zeros(cfg.categories)

    def state(self) -> dict:
        return {
            "student": {n: p.values.copy() for n, p in self.student.items()},
            "teacher": {n: p.values.copy() for n, p in self.teacher.items()},
            "center": self.center.copy(),
        }

    def load_state(self, state: dict) -> None:
        for name, p in self.student.items():
            p.values[...] = np.asarray(state["student"][name])
        for name, p in self.teacher.items():
            p.values[...] = np.asarray(state["teacher"][name])
        self.center = np.asarray(state["center"], dtype=np.float64).copy()


def _check_views(head: ConsensusHead, views) -> None:
    arr = views.values if isinstance(views, Tensor) else np.asarray(views)
    if arr.shape[-1] != head.cfg.input_dim:
        raise AutodiffError(
            f"views have width {arr.shape[-1]}, head expects {head.cfg.input_dim}"
        )


def student_distribution(head: ConsensusHead, views) -> Tensor:
    """Sharpened student softmax; rows are distributions, on the tape."""
    _check_views(head, views)
    logits = mlp_forward(head.student, views, head.spec)
    return softmax(logits, temperature=head.cfg.student_temp)


def teacher_logits(head: ConsensusHead, views) -> np.ndarray:
    """Raw teacher outputs before centering (the quantity the center tracks)."""
    _check_views(head, views)
    with no_grad():
        return mlp_forward(head.teacher, views, head.spec).values


def teacher_distribution(head: ConsensusHead, views) -> np.ndarray:
    """Centered, hard-sharpened teacher softmax; constants (never on the tape)."""
    logits = teacher_logits(head, views)
    with no_grad():
        shifted = Tensor(logits - head.center)
        return softmax(shifted, temperature=head.cfg.teacher_temp).values


def pairwise_consensus_loss(teacher_probs, student_probs, include_self_pairs: bool = True) -> Tensor:
    """Sum of cross-entropies over ordered (teacher view, student view) pairs.

    teacher_probs is an [n, K] array of constants; student_probs an [n, K]
    tensor on the tape. With include_self_pairs=False the i == j pairs are
    dropped (needs n >= 2). Both routes go through cross_entropy_soft, so
    vanishing student entries stay finite.
    """
    t = np.asarray(teacher_probs, dtype=np.float64)
    s = student_probs if isinstance(student_probs, Tensor) else Tensor(student_probs)
    if t.ndim != 2 or s.ndim != 2 or t.shape != s.shape:
        raise AutodiffError(
            f"pairwise loss needs matching [n, K] inputs, got {t.shape} and {s.shape}"
        )
    n = t.shape[0]
    if n < 1:
        raise AutodiffError("pairwise loss needs at least one view")
    if not include_self_pairs and n < 2:
        raise AutodiffError("excluding self-pairs needs at least 2 views")
    # sum_i sum_j CE(t_j, s_i) == n * CE(mean_j t_j broadcast to every row, s)
    mean_target = np.broadcast_to(t.mean(axis=0), t.shape)
    total = cross_entropy_soft(mean_target, s) * float(n)
    if not include_self_pairs:
        total = total - cross_entropy_soft(t, s)
    return total


def consensus_loss(head: ConsensusHead, views) -> Tensor:
    """Pairwise distillation loss for one group of same-timestep views [n, d]."""
    arr = np.asarray(views.values if isinstance(views, Tensor) else views)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise AutodiffError(f"consensus_loss needs a non-empty [n, d] batch, got {arr.shape}")
    return pairwise_consensus_loss(
        teacher_distribution(head, views),
        student_distribution(head, views),
        include_self_pairs=head.cfg.include_self_pairs,
    )


def consensus_category(head: ConsensusHead, view) -> int:
    """Argmax category of the student distribution for one view row."""
    with no_grad():
        probs = student_distribution(head, np.asarray(view).reshape(1, -1)).values
    return int(np.argmax(probs[0]))


def consensus_categories(head: ConsensusHead, views) -> np.ndarray:
    """Vectorized consensus_category over an [n, d] batch."""
    with no_grad():
        probs = student_distribution(head, views).values
    return np.argmax(probs, axis=-1)


def update_teacher(head: ConsensusHead, batch_teacher_logits, momentum: float | None = None) -> None:
    """EMA-blend the teacher toward the student, then refresh the logit center.

    `batch_teacher_logits` are raw teacher outputs for the training batch
    (typically computed via `teacher_logits` before this call). The center
    tracks their running mean, which is what keeps the sharpened teacher from
    collapsing onto a single category.
    """
    m = head.cfg.teacher_momentum if momentum is None else momentum
    ema_blend(head.teacher, head.student, m)
    logits = np.asarray(batch_teacher_logits, dtype=np.float64).reshape(-1, head.cfg.categories)
    if logits.shape[0] < 1:
        raise AutodiffError("update_teacher needs at least one row of teacher logits")
    cm = head.cfg.center_momentum
    head.center = cm * head.center + (1.0 - cm) * logits.mean(axis=0)


# ---------------------------------------------------------------------------
# summary statistics


def agreement_rate(categories) -> float:
    """Fraction of ordered pairs (i != j) of views that share a category."""
    c = np.asarray(categories).reshape(-1)
    n = c.size
    if n < 2:
        return 1.0
    same = (c[:, None] == c[None, :]).sum() - n
    return float(same) / (n * (n - 1))


def category_usage_entropy(categories, n_categories: int) -> float:
    """Shannon entropy (nats) of the empirical category histogram.

    Zero exactly when every view lands in one category — the collapse case.
    """
    c = np.asarray(categories).reshape(-1)
    counts = np.bincount(c, minlength=n_categories).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def distribution_entropy(probs) -> float:
    """Mean Shannon entropy (nats) of probability rows."""
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.maximum(p, 1e-12))
    return float(-(p * logp).sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# synthetic fixture


class SyntheticViewTask:
    """Per-slot transformed views of a shared discrete latent.

    Each group draws one latent class; view slot v observes its own fixed
    random linear transform of that class's anchor plus Gaussian noise —
    the slots see the same situation through systematically different eyes,
    the way agents at different positions would. An untrained head therefore
    assigns near-uniform categories across slots (pairwise agreement around
    1/K), while a trained head maps all slots of one latent to one category.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        n_latents: int = 4,
        dim: int = 8,
        views_per_group: int = 4,
        noise: float = 0.25,
    ):
        self.rng = rng
        self.n_latents = n_latents
        self.dim = dim
        self.views_per_group = views_per_group
        self.noise = noise
        self.anchors = rng.normal(size=(n_latents, dim))
        self.slot_transforms = rng.normal(size=(views_per_group, dim, dim)) / np.sqrt(dim)

    def sample_group(self, latent: int | None = None) -> tuple[int, np.ndarray]:
        z = int(self.rng.integers(self.n_latents)) if latent is None else latent
        base = self.slot_transforms @ self.anchors[z]  # [views, dim]
        views = base + self.noise * self.rng.normal(size=(self.views_per_group, self.dim))
        return z, views
