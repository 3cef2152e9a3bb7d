"""AdamW with decoupled weight decay, written out so each update is inspectable."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

# Production token batch per optimizer step.
PRODUCTION_BATCH_TOKENS = 2_300_000


@dataclass(frozen=True)
class AdamWConfig:
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def state_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_state_dict(cls, d: dict) -> "AdamWState":
        return cls(d["step"], dict(d["m"]), dict(d["v"]))


def decays(name: str, p: torch.Tensor) -> bool:
    """Weight decay applies to matrices and embeddings, not to biases or norm gains."""
    return p.ndim >= 2


@torch.no_grad()
def opt_step(params: dict, grads: dict, state: AdamWState, lr: float, config: AdamWConfig = AdamWConfig()) -> AdamWState:
    """One in-place update of ``params``; returns the advanced state."""
    b1, b2 = config.betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if config.weight_decay and decays(name, p):
            p.mul_(1 - lr * config.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.addcdiv_(m / c1, (v / c2).sqrt().add_(config.eps), value=-lr)
    return state
