"""Versioned, integrity-checked checkpoints.

A checkpoint is two lines of text: a header carrying the format name, version,
and the SHA-256 of the body; then the body, a canonical JSON encoding (sorted
keys, fixed separators) of the trainer state plus a config echo. Canonical
encoding makes save -> load -> save byte-identical, which `verify_roundtrip`
checks directly.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

CHECKPOINT_FORMAT = "concordrl-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file problem (format, version, or content)."""


class CheckpointIntegrityError(CheckpointError):
    """The file's contents do not match its integrity hash."""


class CheckpointVersionError(CheckpointError):
    """The file is a checkpoint, but from an incompatible format version."""


# ---------------------------------------------------------------------------
# JSON-safe encoding of numpy-bearing state dicts


def _encode(obj):
    if isinstance(obj, np.ndarray):
        return {
            "__ndarray__": True,
            "dtype": obj.dtype.name,
            "shape": list(obj.shape),
            "data": obj.ravel().tolist(),
        }
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if obj is None or isinstance(obj, (int, float, str)):
        return obj
    raise CheckpointError(f"cannot serialize {type(obj).__name__} into a checkpoint")


def _decode(obj):
    if isinstance(obj, dict):
        if obj.get("__ndarray__") is True:
            arr = np.asarray(obj["data"], dtype=obj["dtype"])
            return arr.reshape(obj["shape"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _serialize(state: dict, echo: dict, seed: int, iteration: int) -> str:
    body = _dumps({
        "config": echo,
        "iteration": int(iteration),
        "seed": int(seed),
        "state": _encode(state),
    })
    header = _dumps({
        "format": CHECKPOINT_FORMAT,
        "sha256": hashlib.sha256(body.encode("utf-8")).hexdigest(),
        "version": CHECKPOINT_VERSION,
    })
    return header + "\n" + body + "\n"


# ---------------------------------------------------------------------------
# save / load / verify


def save_checkpoint(path, state: dict, echo: dict, seed: int, iteration: int) -> None:
    text = _serialize(state, echo, seed, iteration)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)  # atomic: an interrupted save never corrupts the old file


def load_checkpoint(path) -> dict:
    """Returns {'state', 'config', 'seed', 'iteration'} after verifying the hash."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc
    parts = text.split("\n")
    if len(parts) < 2:
        raise CheckpointIntegrityError(f"'{path}' is too short to be a checkpoint")
    try:
        header = json.loads(parts[0])
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"'{path}' has an unreadable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"'{path}' is not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"'{path}' has format version {header.get('version')}; "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    body = parts[1]
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if digest != header.get("sha256"):
        raise CheckpointIntegrityError(
            f"'{path}' failed its integrity check (stored hash does not match "
            "the body; the file is truncated or was modified)"
        )
    try:
        payload = json.loads(body)
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"'{path}' has an unreadable body: {exc}") from exc
    return {
        "state": _decode(payload["state"]),
        "config": payload["config"],
        "seed": payload["seed"],
        "iteration": payload["iteration"],
    }


def verify_roundtrip(path) -> dict:
    """Load, re-serialize, and byte-compare against the file on disk."""
    loaded = load_checkpoint(path)
    regenerated = _serialize(
        loaded["state"], loaded["config"], loaded["seed"], loaded["iteration"]
    )
    with open(path, "r", encoding="utf-8") as fh:
        original = fh.read()
    if regenerated != original:
        raise CheckpointIntegrityError(
            f"'{path}' did not survive a load/save byte comparison"
        )
    return {
        "verified": True,
        "path": str(path),
        "iteration": loaded["iteration"],
        "seed": loaded["seed"],
        "bytes": len(original.encode("utf-8")),
    }
