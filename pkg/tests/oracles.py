"""Independent reference implementations and frozen expected values.

Everything in this module is deliberately written the slow, obvious way
(explicit loops, textbook formulas) so the library code is checked against a
second route, not against itself.
"""

from __future__ import annotations

import math

import numpy as np

from concordrl.autodiff import backward

# ln 2: cross-entropy of (.5,.5) against itself.
LN2 = 0.6931471805599453

# softmax of logits (1,2,3) at temperature 0.5, i.e. softmax of (2,4,6).
SOFTMAX_123_T05 = np.array(
    [0.015876239976466765, 0.11731042782619838, 0.8668133321973349]
)


def numeric_grad(loss_fn, leaf, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. one leaf."""
    grad = np.zeros_like(leaf.values)
    it = np.nditer(leaf.values, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        old = leaf.values[ix]
        leaf.values[ix] = old + h
        f_plus = loss_fn().item()
        leaf.values[ix] = old - h
        f_minus = loss_fn().item()
        leaf.values[ix] = old
        grad[ix] = (f_plus - f_minus) / (2.0 * h)
        it.iternext()
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(loss_fn, leaves, h: float = 1e-5, rtol: float = 1e-4) -> float:
    """Backprop once, then compare every leaf's grad to finite differences.

    Returns the worst relative error seen (asserts it is below rtol).
    """
    for leaf in leaves:
        leaf.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(loss_fn, leaf, h=h)
        worst = max(worst, max_rel_err(leaf.grad, num))
    assert worst < rtol, f"gradient relative error {worst:.3e} >= {rtol}"
    return worst


def softmax_ref(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def adam_first_step_delta(g: np.ndarray, lr: float, eps: float = 1e-8) -> np.ndarray:
    """Closed form for Adam's very first update: -lr * g / (|g| + eps)."""
    g = np.asarray(g, dtype=np.float64)
    return -lr * g / (np.abs(g) + eps)


def consensus_loss_ref(
    teacher_probs: np.ndarray,
    student_probs: np.ndarray,
    include_self_pairs: bool = True,
    floor: float = 1e-12,
) -> float:
    """Brute-force double sum over ordered view pairs, term by term."""
    n = teacher_probs.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if not include_self_pairs and i == j:
                continue
            for k in range(teacher_probs.shape[1]):
                total -= teacher_probs[j, k] * math.log(max(student_probs[i, k], floor))
    return total


def gae_ref(
    rewards: np.ndarray,
    values: np.ndarray,
    terminal: np.ndarray,
    bootstrap: float,
    gamma: float,
    lam: float,
) -> np.ndarray:
    """Advantages as the explicit truncated double sum (no recursion).

    A_t = sum_{l>=0} (gamma*lam)^l * delta_{t+l}, where the sum stops after
    the first terminal step at or beyond t. delta_t uses V(s_{t+1}) = 0 when
    step t is terminal, and the bootstrap value at the truncation boundary.
    """
    n = len(rewards)
    next_values = np.empty(n)
    next_values[:-1] = values[1:]
    next_values[-1] = bootstrap
    next_values[terminal.astype(bool)] = 0.0
    deltas = rewards + gamma * next_values - values
    adv = np.zeros(n)
    for t in range(n):
        factor = 1.0
        for l in range(t, n):
            adv[t] += factor * deltas[l]
            if terminal[l]:
                break
            factor *= gamma * lam
    return adv
