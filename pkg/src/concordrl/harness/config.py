"""Flat dotted key=value run configuration.

The format is deliberately plain text — one `key = value` per line, `#`
comments, no nesting — so configs are trivially diffable and sweep scripts
can't hide typos: unknown keys are hard errors, and every file starts with a
`format_version` field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from ..envs import EnvConfig
from ..hierarchy import HierarchyConfig, LayerSpec
from ..marl import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """A config file problem; the message names the offending key."""


# ---------------------------------------------------------------------------
# scalar parsing / rendering


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError("expected 'true' or 'false'")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    if text == "":
        return ()
    return tuple(int(part.strip()) for part in text.split(","))


def _parse_layers(text: str) -> tuple[LayerSpec, ...]:
    specs = []
    for part in text.split(","):
        window, sep, stride = part.strip().partition(":")
        if not sep:
            raise ValueError("layers use 'window:stride' pairs, e.g. '1:1,5:3'")
        specs.append(LayerSpec(int(window), int(stride)))
    return tuple(specs)


def _parse_categories(text: str):
    values = _parse_int_tuple(text)
    return values[0] if len(values) == 1 else values


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], LayerSpec):
            return ",".join(f"{s.window}:{s.stride}" for s in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _parser_for(field) -> callable:
    special = {
        "layers": _parse_layers,
        "categories": _parse_categories,
    }
    if field.name in special:
        return special[field.name]
    if field.type in ("bool", bool):
        return _parse_bool
    if field.type in ("int", int):
        return int
    if field.type in ("float", float):
        return float
    if field.type in ("str", str):
        return str
    if "tuple" in str(field.type):
        return _parse_int_tuple
    raise AssertionError(f"no parser for config field {field.name}: {field.type}")


# ---------------------------------------------------------------------------
# key schema: run.* orchestration + env.* / train.* / hierarchy.* sections

_RUN_KEYS = {
    "run.task": str,
    "run.n_agents": int,
    "run.iterations": int,
    "run.seeds": _parse_int_tuple,
    "run.checkpoint_every": int,
    "run.out": str,
}

# env task/n_agents come from run.*; hierarchy obs_dim is derived from the env
_ENV_SKIP = {"task", "n_agents"}
_HIER_SKIP = {"obs_dim"}


def _section_keys(cls, section: str, skip: set[str]) -> dict:
    return {
        f"{section}.{f.name}": _parser_for(f)
        for f in fields(cls)
        if f.name not in skip
    }


_ENV_KEYS = _section_keys(EnvConfig, "env", _ENV_SKIP)
_TRAIN_KEYS = _section_keys(TrainConfig, "train", set())
_HIER_KEYS = _section_keys(HierarchyConfig, "hierarchy", _HIER_SKIP)
_ALL_KEYS = {**_RUN_KEYS, **_ENV_KEYS, **_TRAIN_KEYS, **_HIER_KEYS}


@dataclass(frozen=True)
class RunConfig:
    """A fully resolved experiment: what to train, how long, where to."""

    env: EnvConfig
    train: TrainConfig
    hierarchy: HierarchyConfig
    seeds: tuple[int, ...] = (0,)
    iterations: int = 100
    checkpoint_every: int = 0  # 0 = checkpoint only at the end of the run
    out: str | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError(f"run.iterations must be >= 0, got {self.iterations}")
        if self.checkpoint_every < 0:
            raise ConfigError(
                f"run.checkpoint_every must be >= 0, got {self.checkpoint_every}"
            )
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if self.hierarchy.obs_dim != self.env.obs_dim:
            raise ConfigError(
                "hierarchy.obs_dim is derived from the task; do not set it"
            )


# ---------------------------------------------------------------------------
# text <-> RunConfig


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings, validating shape, version, and key names."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{stripped}'")
        if key in raw:
            raise ConfigError(f"duplicate config key '{key}' (line {lineno})")
        raw[key] = value
    if not raw:
        raise ConfigError("config is empty")
    first = next(iter(raw))
    if first != "format_version":
        raise ConfigError(
            f"config must start with 'format_version = {CONFIG_VERSION}', found '{first}'"
        )
    if raw["format_version"] != str(CONFIG_VERSION):
        raise ConfigError(
            f"unsupported config format_version '{raw['format_version']}' "
            f"(this build reads version {CONFIG_VERSION})"
        )
    for key in raw:
        if key != "format_version" and key not in _ALL_KEYS:
            raise ConfigError(f"unknown config key '{key}'")
    return raw


def build_run_config(raw: dict[str, str]) -> RunConfig:
    """Typed RunConfig from raw key strings (as returned by parse_config_text)."""
    parsed = {}
    for key, value in raw.items():
        if key == "format_version":
            continue
        try:
            parsed[key] = _ALL_KEYS[key](value)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key '{key}': {exc} (value '{value}')") from exc

    for required in ("run.task", "run.n_agents", "run.iterations"):
        if required not in parsed:
            raise ConfigError(f"missing required config key '{required}'")

    def section(prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in parsed.items() if k.startswith(prefix + ".")}

    try:
        env = EnvConfig(
            task=parsed["run.task"], n_agents=parsed["run.n_agents"], **section("env")
        )
    except ValueError as exc:
        raise ConfigError(f"invalid env config: {exc}") from exc
    try:
        train = TrainConfig(**section("train"))
    except ValueError as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc
    try:
        hierarchy = HierarchyConfig(obs_dim=env.obs_dim, **section("hierarchy"))
    except Exception as exc:  # hierarchy raises its own graph-error type
        raise ConfigError(f"invalid hierarchy config: {exc}") from exc

    run_fields = {
        "seeds": parsed.get("run.seeds", (0,)),
        "iterations": parsed["run.iterations"],
        "checkpoint_every": parsed.get("run.checkpoint_every", 0),
        "out": parsed.get("run.out"),
    }
    return RunConfig(env=env, train=train, hierarchy=hierarchy, **run_fields)


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}") from exc
    return build_run_config(parse_config_text(text))


def render_config(cfg: RunConfig) -> str:
    """Canonical text for a RunConfig; parses back to an equal config."""
    lines = [f"format_version = {CONFIG_VERSION}"]
    lines.append(f"run.task = {cfg.env.task}")
    lines.append(f"run.n_agents = {cfg.env.n_agents}")
    lines.append(f"run.iterations = {cfg.iterations}")
    lines.append(f"run.seeds = {_render_value(cfg.seeds)}")
    lines.append(f"run.checkpoint_every = {cfg.checkpoint_every}")
    if cfg.out is not None:
        lines.append(f"run.out = {cfg.out}")
    for source, keys in ((cfg.env, _ENV_KEYS), (cfg.train, _TRAIN_KEYS),
                         (cfg.hierarchy, _HIER_KEYS)):
        for key in sorted(keys):
            field = key.split(".", 1)[1]
            lines.append(f"{key} = {_render_value(getattr(source, field))}")
    return "\n".join(lines) + "\n"


def config_echo(cfg: RunConfig) -> dict[str, str]:
    """The raw-dict form of the canonical rendering (stored in checkpoints)."""
    return parse_config_text(render_config(cfg))


def replace_run(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)


def trainer_identity_keys(echo: dict[str, str]) -> dict[str, str]:
    """The subset of config keys that determine trainer construction (used to
    refuse resuming from a checkpoint built under a different model/task)."""
    keep_prefixes = ("env.", "train.", "hierarchy.")
    keep_exact = {"run.task", "run.n_agents"}
    return {
        k: v
        for k, v in echo.items()
        if k in keep_exact or k.startswith(keep_prefixes)
    }
