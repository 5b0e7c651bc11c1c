"""Shared training-loop fixtures used by both unit tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from concordrl import consensus as cs
from concordrl.autodiff import AdamState, adam_step, backward
from concordrl.rng import stream


def run_emergence(
    seed: int,
    steps: int = 300,
    groups_per_step: int = 8,
    lr: float = 3e-3,
    n_latents: int = 4,
    categories: int = 4,
    views_per_group: int = 4,
    noise: float = 0.25,
    eval_groups_per_latent: int = 10,
):
    """Train one consensus head on the synthetic shared-latent task.

    Returns (init_metrics, final_metrics), each a (mean within-group
    agreement, category-usage entropy) pair measured on fresh groups.
    """
    task = cs.SyntheticViewTask(
        stream(seed, "emergence/task"),
        n_latents=n_latents,
        dim=8,
        views_per_group=views_per_group,
        noise=noise,
    )
    cfg = cs.ConsensusConfig(input_dim=8, categories=categories, teacher_momentum=0.9)
    head = cs.ConsensusHead(cfg, stream(seed, "emergence/head"))
    opt = AdamState.for_params(head.student, lr=lr)

    def eval_metrics():
        rates, cats = [], []
        for z in range(task.n_latents):
            for _ in range(eval_groups_per_latent):
                _, views = task.sample_group(latent=z)
                c = cs.consensus_categories(head, views)
                rates.append(cs.agreement_rate(c))
                cats.extend(c.tolist())
        return float(np.mean(rates)), cs.category_usage_entropy(cats, cfg.categories)

    init = eval_metrics()
    for _ in range(steps):
        batch, total = [], None
        for _ in range(groups_per_step):
            _, views = task.sample_group()
            loss = cs.consensus_loss(head, views)
            total = loss if total is None else total + loss
            batch.append(views)
        backward(total * (1.0 / groups_per_step))
        adam_step(opt, head.student)
        cs.update_teacher(head, cs.teacher_logits(head, np.concatenate(batch)))
    return init, eval_metrics()
