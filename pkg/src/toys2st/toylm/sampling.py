"""Seeded autoregressive sampling.

Per step the logits go through, in this order: temperature, repetition penalty
(positive logits divided by the penalty, negative ones multiplied), top-k when
enabled, nucleus truncation, then a categorical draw. Tokens count as already
emitted if they appear in the prompt or in the emission so far.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from ..errors import ConfigError


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.7
    top_p: float = 0.8
    top_k: int = -1
    repetition_penalty: float = 1.1
    max_new_tokens: int = 256
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.top_k == 0 or self.top_k < -1:
            raise ConfigError("top_k must be -1 (disabled) or positive")
        if self.repetition_penalty <= 0:
            raise ConfigError("repetition penalty must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def penalize(logits: torch.Tensor, seen: torch.Tensor, penalty: float) -> torch.Tensor:
    if penalty == 1.0:
        return logits
    scaled = torch.where(logits > 0, logits / penalty, logits * penalty)
    return torch.where(seen, scaled, logits)


def step_distribution(logits: torch.Tensor, seen: torch.Tensor, cfg: SamplerConfig) -> torch.Tensor:
    """Sampling probabilities (B, V) for one step."""
    x = penalize(logits / cfg.temperature, seen, cfg.repetition_penalty)
    if cfg.top_k > 0 and cfg.top_k < x.shape[-1]:
        kth = x.topk(cfg.top_k, dim=-1).values[..., -1:]
        x = x.masked_fill(x < kth, float("-inf"))
    probs = x.softmax(dim=-1)
    if cfg.top_p < 1.0:
        sorted_p, order = probs.sort(dim=-1, descending=True)
        before = sorted_p.cumsum(dim=-1) - sorted_p
        drop_sorted = before >= cfg.top_p
        drop_sorted[..., 0] = False
        drop = torch.zeros_like(drop_sorted).scatter(-1, order, drop_sorted)
        probs = probs.masked_fill(drop, 0.0)
        probs = probs / probs.sum(dim=-1, keepdim=True)
    return probs


def next_tokens(logits: torch.Tensor, seen: torch.Tensor, cfg: SamplerConfig, gen: torch.Generator) -> torch.Tensor:
    if cfg.greedy:
        return penalize(logits, seen, cfg.repetition_penalty).argmax(dim=-1)
    probs = step_distribution(logits, seen, cfg)
    return torch.multinomial(probs.to(torch.float64), 1, generator=gen)[:, 0]


@torch.no_grad()
def generate(model, prompts, cfg: SamplerConfig, eod: int, batch_size: int = 64) -> list[list[int]]:
    """Sample one emission per prompt; each stops at EOD or ``max_new_tokens``."""
    out: list[list[int]] = []
    gen = torch.Generator().manual_seed(cfg.seed)
    vocab = model.config.vocab_size
    for b0 in range(0, len(prompts), batch_size):
        chunk = [list(p) for p in prompts[b0 : b0 + batch_size]]
        width = max(len(p) for p in chunk)
        tokens = torch.full((len(chunk), width), eod, dtype=torch.long)
        valid = torch.zeros((len(chunk), width), dtype=torch.bool)
        for i, p in enumerate(chunk):
            tokens[i, width - len(p) :] = torch.tensor(p)
            valid[i, width - len(p) :] = True
        seen = torch.zeros((len(chunk), vocab), dtype=torch.bool)
        for i, p in enumerate(chunk):
            seen[i, p] = True
        logits, cache = model.start_cache(tokens, valid)
        emitted = [[] for _ in chunk]
        done = torch.zeros(len(chunk), dtype=torch.bool)
        for _ in range(cfg.max_new_tokens):
            nxt = next_tokens(logits.to(torch.float64), seen, cfg, gen)
            for i in (~done).nonzero()[:, 0].tolist():
                emitted[i].append(int(nxt[i]))
            done |= nxt == eod
            if bool(done.all()):
                break
            seen[torch.arange(len(chunk)), nxt] = True
            logits = model.step(nxt, cache)
        out.extend(emitted)
    return out
