"""Experiment orchestration: seeded multi-run training, evaluation from
checkpoints, ablation sweeps, and checkpoint verification."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from pathlib import Path

import numpy as np

from ..hierarchy import LayerSpec
from ..marl import Trainer
from . import checkpoint as ckpt
from . import figures, metrics
from .config import (
    ConfigError,
    RunConfig,
    build_run_config,
    config_echo,
    render_config,
    trainer_identity_keys,
)

OUTPUT_ROOT_ENV = "CONCORDRL_OUT"
EVAL_FORMAT = "concordrl-eval"
EVAL_VERSION = 1
SUMMARY_CSV_VERSION_LINE = "# concordrl-ablation-csv 1"

ABLATION_AXES = {
    "k": (1, 4, 8, 16),   # consensus categories per layer
    "m": (1, 3, 5, 10),   # single-layer observation-window length
}
# m-axis runs replace the whole hierarchy with one layer of window m; the
# frame spacing stays at the default long-term spacing so only the window
# length varies along the axis.
M_AXIS_STRIDE = 3


def resolve_out_dir(cli_out: str | None, cfg_out: str | None, default_name: str) -> Path:
    if cli_out:
        return Path(cli_out)
    if cfg_out:
        return Path(cfg_out)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / default_name


def seed_dir_name(index: int, seed: int) -> str:
    return f"run{index:02d}_seed{seed}"


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass
class TrainOutcome:
    out_dir: Path
    metrics_paths: list[Path]
    checkpoint_paths: list[Path]
    aggregate_path: Path
    figure_path: Path | None


def _train_one_seed(cfg: RunConfig, seed: int, seed_dir: Path, echo: dict,
                    resume: bool) -> tuple[Path, Path]:
    seed_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = seed_dir / "metrics.jsonl"
    checkpoint_path = seed_dir / "checkpoint.json"

    trainer = Trainer(cfg.env, cfg.train, cfg.hierarchy, seed=seed)
    if resume and checkpoint_path.exists():
        loaded = ckpt.load_checkpoint(checkpoint_path)
        if trainer_identity_keys(loaded["config"]) != trainer_identity_keys(echo):
            raise ckpt.CheckpointError(
                f"'{checkpoint_path}' was produced under a different model/task "
                "configuration; refusing to resume from it"
            )
        if loaded["seed"] != seed:
            raise ckpt.CheckpointError(
                f"'{checkpoint_path}' holds seed {loaded['seed']}, expected {seed}"
            )
        trainer.load_state(loaded["state"])
        existing = metrics.read_records(metrics_path)
        if len(existing) != trainer.iteration:
            raise metrics.MetricsError(
                f"'{metrics_path}' has {len(existing)} records but the checkpoint "
                f"is at iteration {trainer.iteration}; the run directory is "
                "out of sync"
            )
    else:
        metrics.init_metrics_file(metrics_path)
        if cfg.train.consensus and cfg.train.consensus_pretrain_steps > 0:
            trainer.pretrain_consensus(cfg.train.consensus_pretrain_steps)

    for it in range(trainer.iteration, cfg.iterations):
        record = trainer.train_iteration()
        metrics.append_record(metrics_path, record)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            ckpt.save_checkpoint(
                checkpoint_path, trainer.state(), echo, seed, trainer.iteration
            )
    ckpt.save_checkpoint(
        checkpoint_path, trainer.state(), echo, seed, trainer.iteration
    )
    metrics.write_csv(seed_dir / "metrics.csv", metrics.read_records(metrics_path))
    return metrics_path, checkpoint_path


def run_train(cfg: RunConfig, out_dir: Path, resume: bool = False) -> TrainOutcome:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(render_config(cfg), encoding="utf-8")
    echo = config_echo(cfg)

    metrics_paths, checkpoint_paths = [], []
    for i, seed in enumerate(cfg.seeds):
        mpath, cpath = _train_one_seed(
            cfg, seed, out_dir / seed_dir_name(i, seed), echo, resume
        )
        metrics_paths.append(mpath)
        checkpoint_paths.append(cpath)

    per_seed = [metrics.read_records(p) for p in metrics_paths]
    aggregate = metrics.aggregate_records(per_seed)
    aggregate_path = out_dir / "aggregate.csv"
    metrics.write_csv(aggregate_path, aggregate)

    figure_path = None
    if aggregate:
        figure_path = out_dir / "learning_curve.png"
        figures.learning_curve_figure(
            {cfg.env.task: aggregate}, figure_path,
            title=f"{cfg.env.task} ({len(cfg.seeds)} seeds)",
        )
    return TrainOutcome(out_dir, metrics_paths, checkpoint_paths,
                        aggregate_path, figure_path)


# ---------------------------------------------------------------------------
# evaluation


def _mean_stderr(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def trainer_from_checkpoint(path) -> tuple[Trainer, dict]:
    loaded = ckpt.load_checkpoint(path)
    cfg = build_run_config(loaded["config"])
    trainer = Trainer(cfg.env, cfg.train, cfg.hierarchy, seed=loaded["seed"])
    trainer.load_state(loaded["state"])
    return trainer, loaded


def run_eval(checkpoint_path, episodes: int, greedy: bool = True,
             seed: int | None = None) -> dict:
    if episodes < 1:
        raise ValueError(f"evaluation needs at least one episode, got {episodes}")
    trainer, loaded = trainer_from_checkpoint(checkpoint_path)
    results = trainer.evaluate(episodes, seed=seed, greedy=greedy)
    steps = [r.steps_to_complete for r in results]
    success = [1.0 if r.success else 0.0 for r in results]
    rewards = [r.total_reward for r in results]
    steps_m, steps_se = _mean_stderr(steps)
    succ_m, succ_se = _mean_stderr(success)
    rew_m, rew_se = _mean_stderr(rewards)
    return {
        "format": EVAL_FORMAT,
        "version": EVAL_VERSION,
        "checkpoint": str(checkpoint_path),
        "checkpoint_iteration": loaded["iteration"],
        "task": loaded["config"]["run.task"],
        "episodes": episodes,
        "greedy": greedy,
        "mean_steps_to_complete": steps_m,
        "stderr_steps_to_complete": steps_se,
        "success_rate": succ_m,
        "stderr_success_rate": succ_se,
        "mean_total_reward": rew_m,
        "stderr_total_reward": rew_se,
    }


# ---------------------------------------------------------------------------
# ablation sweeps


def _config_for_value(cfg: RunConfig, axis: str, value: int) -> RunConfig:
    if axis == "k":
        hierarchy = dataclasses.replace(cfg.hierarchy, categories=value)
    else:
        hierarchy = dataclasses.replace(
            cfg.hierarchy, layers=(LayerSpec(value, M_AXIS_STRIDE),)
        )
    return dataclasses.replace(cfg, hierarchy=hierarchy)


def write_summary_csv(path, rows: list[dict]) -> None:
    cols = ["axis", "value", "seed", "final_reward", "final_steps_to_complete"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(SUMMARY_CSV_VERSION_LINE + "\n")
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_summary_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != SUMMARY_CSV_VERSION_LINE:
            raise metrics.MetricsError(
                f"'{path}' is missing the '{SUMMARY_CSV_VERSION_LINE}' header"
            )
        rows = list(csv.DictReader(fh))
    return [
        {
            "axis": row["axis"],
            "value": int(row["value"]),
            "seed": int(row["seed"]),
            "final_reward": float(row["final_reward"]),
            "final_steps_to_complete": float(row["final_steps_to_complete"]),
        }
        for row in rows
    ]


@dataclasses.dataclass
class AblationOutcome:
    out_dir: Path
    rows: list[dict]
    summary_path: Path
    figure_path: Path


def run_ablation(cfg: RunConfig, axis: str, values=None, out_dir=None) -> AblationOutcome:
    if axis not in ABLATION_AXES:
        raise ConfigError(
            f"ablation axis must be one of {sorted(ABLATION_AXES)}, got '{axis}'"
        )
    values = tuple(int(v) for v in (values or ABLATION_AXES[axis]))
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"ablation values must be positive integers, got {values}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        sub_cfg = _config_for_value(cfg, axis, value)
        outcome = run_train(sub_cfg, out_dir / f"{axis}{value}")
        for i, seed in enumerate(cfg.seeds):
            records = metrics.read_records(outcome.metrics_paths[i])
            rows.append({
                "axis": axis,
                "value": value,
                "seed": seed,
                "final_reward": metrics.final_window_mean(
                    records, "mean_episode_reward"
                ),
                "final_steps_to_complete": metrics.final_window_mean(
                    records, "mean_steps_to_complete"
                ),
            })

    summary_path = out_dir / "summary.csv"
    write_summary_csv(summary_path, rows)
    figure_path = out_dir / f"ablation_{axis}.png"
    figures.ablation_figure(rows, axis, figure_path)
    return AblationOutcome(out_dir, rows, summary_path, figure_path)


# ---------------------------------------------------------------------------
# checkpoint verification


def verify_checkpoint(path) -> dict:
    return ckpt.verify_roundtrip(path)
