"""Adam with bias correction, and exponential-moving-average blending."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ParameterSet
from .tensor import AutodiffError


@dataclass
class AdamState:
    """First/second-moment buffers keyed by parameter name, plus step count."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, lr: float, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        return state

    def state(self) -> dict:
        """Moment buffers and step count (hyperparameters are config, not state)."""
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k][...] = np.asarray(state["m"][k])
            self.v[k][...] = np.asarray(state["v"][k])


def adam_step(state: AdamState, params: ParameterSet) -> None:
    """Apply one Adam update in place and clear the gradients.

    Every parameter must have moment buffers in `state` and a grad buffer of
    matching shape; a parameter that is missing either is reported by name.
    With all-zero gradients the bias-corrected update is exactly zero, so a
    fresh state plus zero grads leaves the values untouched.
    """
    names = params.names()
    missing = [n for n in names if n not in state.m or n not in state.v]
    if missing:
        raise AutodiffError(f"optimizer state missing for parameter '{missing[0]}'")
    stale = [n for n in state.m if n not in params._params]
    if stale:
        raise AutodiffError(f"optimizer state for unknown parameter '{stale[0]}'")

    state.step_count += 1
    t = state.step_count
    corr1 = 1.0 - state.beta1 ** t
    corr2 = 1.0 - state.beta2 ** t
    for name in names:
        p = params[name]
        g = p.grad
        if g is None or g.shape != p.values.shape:
            raise AutodiffError(f"parameter '{name}' has no gradient of shape {p.values.shape}")
        if not np.isfinite(g).all():
            raise AutodiffError(f"parameter '{name}' has a non-finite gradient")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad[...] = 0.0


def ema_blend(teacher: ParameterSet, student: ParameterSet, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, in place.

    momentum=1 freezes the teacher; momentum=0 copies the student. The two
    sets must have identical names and shapes.
    """
    if not 0.0 <= momentum <= 1.0:
        raise AutodiffError(f"EMA momentum must be in [0, 1], got {momentum}")
    if teacher.names() != student.names():
        raise AutodiffError(
            f"EMA parameter names differ: {teacher.names()} vs {student.names()}"
        )
    for name, t in teacher.items():
        s = student[name]
        if s.values.shape != t.values.shape:
            raise AutodiffError(
                f"EMA parameter '{name}' shape differs: {t.values.shape} vs {s.values.shape}"
            )
        # full right-hand side before assignment, so teacher-is-student
        # aliasing still satisfies the documented formula
        t.values[...] = momentum * t.values + (1.0 - momentum) * s.values
