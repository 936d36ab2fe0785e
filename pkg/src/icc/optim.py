"""AdamW with decoupled weight decay and per-step exponential learning-rate decay."""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError


class AdamW:
    """Decoupled-weight-decay Adam over a name -> array parameter map.

    Parameter arrays are updated in place. The learning rate used at step t
    is ``base_lr * lr_decay ** t`` (t counts completed steps, so the first
    step runs at ``base_lr``). ``lr_decay=1`` keeps it constant; the trainer
    drives epoch-level decay by moving ``base_lr`` between epochs instead.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
        lr_decay: float = 1.0,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 < lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {lr_decay}")
        self.params = params
        self.base_lr = float(lr)
        self.betas = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.lr_decay = float(lr_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    @property
    def lr(self) -> float:
        """Effective learning rate for the next step: base * decay**t."""
        return self.base_lr * self.lr_decay**self.step_count

    def set_base_lr(self, lr: float) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.base_lr = float(lr)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """Apply one update. Parameters absent from ``grads`` are skipped.

        A non-finite gradient rejects the whole step before any state is
        touched.
        """
        live = []
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"adamw: gradient for unknown parameter {name!r}")
            p = self.params[name]
            if g.shape != p.shape:
                raise ShapeError(
                    f"adamw: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}"
                )
            if not np.all(np.isfinite(g)):
                raise NumericError(f"adamw: non-finite gradient for {name!r}; step rejected")
            live.append((name, p, g))

        lr = self.lr
        b1, b2 = self.betas
        t = self.step_count + 1
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p, g in live:
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay != 0.0:
                p -= lr * self.weight_decay * p
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)
        self.step_count = t
