"""Named, splittable random streams.

Every stochastic subsystem (parameter init, environments, action sampling)
pulls its own generator, keyed by a path-like name and derived from one
root seed. Because the derivation hashes the name instead of relying on
call order, adding or reordering subsystems cannot shift anyone else's
stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Return the generator for `name` under `root_seed`.

    Same (root_seed, name) pair always yields a bitwise-identical stream.
    """
    if not isinstance(root_seed, int) or root_seed < 0:
        raise ValueError(f"root seed must be a non-negative int, got {root_seed!r}")
    seq = np.random.SeedSequence([root_seed, _name_key(name)])
    return np.random.Generator(np.random.PCG64(seq))


class SeedTree:
    """Hierarchical view over `stream`: children prefix their parent's path."""

    def __init__(self, root_seed: int, prefix: str = ""):
        self.root_seed = root_seed
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}/{name}" if self.prefix else name

    def stream(self, name: str) -> np.random.Generator:
        return stream(self.root_seed, self._full(name))

    def child(self, name: str) -> "SeedTree":
        return SeedTree(self.root_seed, self._full(name))
