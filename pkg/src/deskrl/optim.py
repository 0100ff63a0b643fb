"""AdamW with decoupled weight decay, global gradient clipping, and linear warmup."""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import NonFiniteError, Tensor

__all__ = ["OptimState", "adamw_step", "global_grad_norm"]


@dataclass
class OptimState:
    """Optimizer hyperparameters plus per-parameter moment buffers.

    ``step`` increases by exactly one per update. ``grad_clip`` is a global
    threshold over the concatenated gradient vector; ``None`` disables
    clipping. ``warmup_steps`` scales the learning rate by
    ``min(step / warmup_steps, 1)``.
    """

    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 0.25
    warmup_steps: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self) -> float:
        """Learning rate applied at the current (post-increment) step."""
        if self.warmup_steps > 0:
            return self.lr * min(self.step / self.warmup_steps, 1.0)
        return self.lr

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "grad_clip": self.grad_clip,
            "warmup_steps": self.warmup_steps,
            "step": self.step,
            "m": {k: _encode(a) for k, a in self.m.items()},
            "v": {k: _encode(a) for k, a in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimState":
        return cls(
            lr=d["lr"],
            betas=tuple(d["betas"]),
            eps=d["eps"],
            weight_decay=d["weight_decay"],
            grad_clip=d["grad_clip"],
            warmup_steps=d["warmup_steps"],
            step=d["step"],
            m={k: _decode(s) for k, s in d["m"].items()},
            v={k: _decode(s) for k, s in d["v"].items()},
        )


def _encode(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": base64.b64encode(a.astype("<f8").tobytes()).decode()}


def _decode(d: dict) -> np.ndarray:
    buf = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").astype(np.float64)
    return buf.reshape(d["shape"]).copy()


def global_grad_norm(params: Mapping[str, Tensor]) -> float:
    """L2 norm of all gradients concatenated; missing gradients count as zero."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    return float(np.sqrt(sq))


def adamw_step(params: Mapping[str, Tensor], state: OptimState) -> float:
    """Apply one AdamW update in place; returns the pre-clip global grad norm.

    Gradients are rescaled by ``grad_clip / norm`` when the global norm
    exceeds the threshold, before the moment updates. Weight decay is
    decoupled (applied directly to the parameters). Any non-finite
    gradient rejects the whole update.
    """
    grads: dict[str, np.ndarray] = {}
    sq = 0.0
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter '{name}'; update rejected")
        grads[name] = g
        sq += float((g * g).sum())
    norm = float(np.sqrt(sq))

    if state.grad_clip is not None and norm > state.grad_clip:
        rescale = state.grad_clip / norm
        grads = {name: g * rescale for name, g in grads.items()}

    state.step += 1
    lr_t = state.effective_lr()
    b1, b2 = state.betas
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step

    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / corr2) + state.eps
        p.data -= lr_t * (m / corr1) / denom
        if state.weight_decay != 0.0:
            p.data -= lr_t * state.weight_decay * p.data
    return norm
