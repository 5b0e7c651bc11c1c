"""Parameter containers and network building blocks.

Everything here is built from the primitives in `tensor.py`: dense stacks,
soft-target cross-entropy, and multi-head self-attention. Parameters live in
a `ParameterSet`, a name -> Tensor mapping with deterministic (sorted)
iteration order so optimizer updates and checkpoints are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    AutodiffError,
    Tensor,
    _as_tensor,
    matmul,
    relu,
    reshape,
    safe_log,
    softmax,
    tanh,
    transpose,
    tsum,
)


class ParameterSet:
    """Named trainable tensors with stable iteration order.

    Every tensor added here has requires_grad=True and a zeroed grad buffer.
    Names are unique; lookups by unknown name raise with the name included.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"parameter '{name}' already exists")
        t = values if isinstance(values, Tensor) else Tensor(values)
        t.requires_grad = True
        if t.grad is None:
            t.grad = np.zeros_like(t.values)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise AutodiffError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in sorted(self._params):
            yield name, self._params[name]

    def zero_grads(self) -> None:
        for _, p in self.items():
            p.zero_grad()

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, p in self.items():
            out.add(name, p.values.copy())
        return out

    def load_values(self, other: "ParameterSet") -> None:
        """Overwrite values in place from another set with identical names/shapes."""
        if self.names() != other.names():
            raise AutodiffError(
                f"parameter names differ: {self.names()} vs {other.names()}"
            )
        for name, p in self.items():
            src = other[name]
            if src.values.shape != p.values.shape:
                raise AutodiffError(
                    f"parameter '{name}' shape differs: {p.values.shape} vs {src.values.shape}"
                )
            p.values[...] = src.values


# ---------------------------------------------------------------------------
# dense stacks


_ACTIVATIONS = {"tanh": tanh, "relu": relu, "linear": lambda t: t}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths and hidden activation for a dense stack.

    sizes[0] is the input width, sizes[-1] the output width; the activation
    applies to every layer except the last (the output is linear).
    """

    sizes: tuple[int, ...]
    activation: str = "tanh"
    prefix: str = "mlp"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise AutodiffError(f"MlpSpec needs >= 2 sizes, got {self.sizes}")
        if any(int(s) <= 0 for s in self.sizes):
            raise AutodiffError(f"MlpSpec sizes must be positive, got {self.sizes}")
        if self.activation not in _ACTIVATIONS:
            raise AutodiffError(
                f"unknown activation '{self.activation}', choose from {sorted(_ACTIVATIONS)}"
            )

    def layer_names(self) -> list[tuple[str, str]]:
        return [
            (f"{self.prefix}/w{i}", f"{self.prefix}/b{i}")
            for i in range(len(self.sizes) - 1)
        ]


def init_mlp(params: ParameterSet, spec: MlpSpec, rng: np.random.Generator) -> None:
    """Add the weights for `spec` to `params` (normal init scaled by 1/sqrt(fan_in))."""
    for i, (w_name, b_name) in enumerate(spec.layer_names()):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        w = rng.standard_normal((fan_in, fan_out)) * math.sqrt(1.0 / fan_in)
        params.add(w_name, w)
        params.add(b_name, np.zeros(fan_out))


def mlp_forward(params: ParameterSet, x, spec: MlpSpec) -> Tensor:
    """Run the dense stack on inputs of shape [..., sizes[0]]."""
    x = _as_tensor(x)
    if x.shape[-1] != spec.sizes[0]:
        raise AutodiffError(
            f"'{spec.prefix}' expects inputs of width {spec.sizes[0]}, got {x.shape}"
        )
    act = _ACTIVATIONS[spec.activation]
    n_layers = len(spec.sizes) - 1
    for i, (w_name, b_name) in enumerate(spec.layer_names()):
        w, b = params[w_name], params[b_name]
        if w.shape != (spec.sizes[i], spec.sizes[i + 1]):
            raise AutodiffError(
                f"layer '{w_name}' has shape {w.shape}, spec says "
                f"{(spec.sizes[i], spec.sizes[i + 1])}"
            )
        x = matmul(x, w) + b
        if i < n_layers - 1:
            x = act(x)
    return x


# ---------------------------------------------------------------------------
# losses


def cross_entropy_soft(target_probs, pred_probs, floor: float = 1e-12) -> Tensor:
    """Cross-entropy -sum(t * log p) between rows of probability vectors.

    Targets are treated as constants (no gradient flows into them);
    predictions pass through a floored log so vanishing entries cannot
    produce non-finite values. Returns the sum over all rows.
    """
    t = _as_tensor(target_probs)
    p = _as_tensor(pred_probs)
    if t.shape != p.shape:
        raise AutodiffError(
            f"cross_entropy_soft shapes differ: targets {t.shape}, predictions {p.shape}"
        )
    row_sums = t.values.sum(axis=-1)
    if not np.allclose(row_sums, 1.0, atol=1e-6):
        raise AutodiffError("cross_entropy_soft targets must sum to 1 along the last axis")
    t_const = t.detach()
    return tsum(t_const * safe_log(p, floor=floor)) * (-1.0)


# ---------------------------------------------------------------------------
# multi-head attention


def attention_param_names(prefix: str = "attn") -> list[str]:
    return [f"{prefix}/wq", f"{prefix}/wk", f"{prefix}/wv"]


def init_attention(
    params: ParameterSet, dim: int, heads: int, rng: np.random.Generator,
    prefix: str = "attn",
) -> None:
    """Add query/key/value projections for `heads`-way attention over width `dim`."""
    if dim % heads != 0:
        raise AutodiffError(f"attention width {dim} not divisible by {heads} heads")
    scale = math.sqrt(1.0 / dim)
    for name in attention_param_names(prefix):
        params.add(name, rng.standard_normal((dim, dim)) * scale)


def multi_head_attention(
    params: ParameterSet,
    tokens,
    heads: int,
    prefix: str = "attn",
    return_weights: bool = False,
):
    """Self-attention over a token sequence; heads are concatenated, nothing more.

    `tokens` is [L, dim] or [B, L, dim]. There is deliberately no output
    projection: with a single token the result is exactly that token's value
    projection, and per-head weights are plain softmax rows (sum to 1).

    When return_weights is True also returns the detached weights as an
    ndarray of shape [B, heads, L, L] (B=1 for unbatched input).
    """
    x = _as_tensor(tokens)
    squeeze = False
    if x.ndim == 2:
        x = reshape(x, (1,) + x.shape)
        squeeze = True
    if x.ndim != 3:
        raise AutodiffError(f"attention tokens must be [L, d] or [B, L, d], got {x.shape}")
    batch, length, dim = x.shape
    if dim % heads != 0:
        raise AutodiffError(f"attention width {dim} not divisible by {heads} heads")
    head_dim = dim // heads

    wq, wk, wv = (params[name] for name in attention_param_names(prefix))
    for name in attention_param_names(prefix):
        if params[name].shape != (dim, dim):
            raise AutodiffError(
                f"projection '{name}' has shape {params[name].shape}, expected {(dim, dim)}"
            )

    def split_heads(t: Tensor) -> Tensor:
        t = reshape(t, (batch, length, heads, head_dim))
        return transpose(t, (0, 2, 1, 3))  # [B, H, L, hd]

    q = split_heads(matmul(x, wq))
    k = split_heads(matmul(x, wk))
    v = split_heads(matmul(x, wv))

    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores)  # [B, H, L, L]
    mixed = matmul(weights, v)  # [B, H, L, hd]
    out = reshape(transpose(mixed, (0, 2, 1, 3)), (batch, length, dim))
    if squeeze:
        out = reshape(out, (length, dim))
    if return_weights:
        return out, weights.values.copy()
    return out
