"""Adam with decoupled weight decay (AdamW)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node

__all__ = ["AdamW", "AdamState", "DivergenceError", "optimizer_step"]


class DivergenceError(FloatingPointError):
    """A non-finite gradient or loss was produced during training."""


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _check(grads, names):
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            label = names[i] if names else f"param[{i}]"
            raise DivergenceError(f"non-finite gradient in {label}")


def _update(params, grads, state, lr, betas, eps, weight_decay, names=None):
    """In-place AdamW update of ``params`` (arrays) and ``state``."""
    _check(grads, names)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def optimizer_step(params, grads, state: AdamState | None = None, *, lr: float = 2e-4,
                   betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
                   names=None):
    """Functional AdamW step; returns ``(new_params, new_state)``.

    Inputs are left untouched.  A ``None`` gradient means the parameter only
    decays.  Raises :class:`DivergenceError` on a non-finite gradient.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and np.shape(g) != np.shape(p):
            raise ValueError(f"gradient {i} has shape {np.shape(g)}, param has {np.shape(p)}")
    state = AdamState() if state is None else state
    new_state = AdamState(state.step, [m.copy() for m in state.m], [v.copy() for v in state.v])
    new_params = [np.array(p, copy=True) for p in params]
    _update(new_params, grads, new_state, lr, betas, eps, weight_decay, names)
    return new_params, new_state


@dataclass
class AdamW:
    """Stateful optimizer over autodiff parameter nodes."""

    params: list[Node]
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        self.params = list(self.params)

    @property
    def step_count(self) -> int:
        return self.state.step

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, names=None) -> None:
        """Apply one update in place; params with no gradient only decay."""
        names = names or [p.name or f"param[{i}]" for i, p in enumerate(self.params)]
        _update([p.value for p in self.params], [p.grad for p in self.params], self.state,
                self.lr, self.betas, self.eps, self.weight_decay, names)
