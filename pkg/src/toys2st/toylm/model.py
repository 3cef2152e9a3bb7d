"""Small decoder-only transformer over packed, segment-isolated sequences.

Architecture (fixed by ModelConfig):

* token embedding + learned position embedding (position within segment)
  + learned run-position embedding (offset since the last change of token
  class, e.g. linguistic -> text; computed causally from the ids),
* pre-norm blocks: LayerNorm -> multi-head causal attention -> residual,
  LayerNorm -> GELU MLP -> residual,
* final LayerNorm and an untied output projection.

Attention is restricted to earlier positions of the same segment. Padding
positions (segment id -1) contribute nothing to any other position.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, DegenerateBatch


@dataclass
class ModelConfig:
    vocab_size: int
    token_classes: tuple = field(default=(), repr=False)
    layers: int = 2
    width: int = 128
    heads: int = 4
    ffn: int = 512
    max_positions: int = 512
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if self.token_classes and len(self.token_classes) != self.vocab_size:
            raise ConfigError("token_classes must cover the vocabulary")
        self.token_classes = tuple(self.token_classes)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["token_classes"] = list(self.token_classes)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**{**doc, "token_classes": tuple(doc.get("token_classes", ()))})

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def parameter_count(c: ModelConfig) -> int:
    d, v, p, f = c.width, c.vocab_size, c.max_positions, c.ffn
    per_layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d)
    return v * d + 2 * p * d + c.layers * per_layer + 2 * d + d * v + v


class Block(nn.Module):
    def __init__(self, c: ModelConfig):
        super().__init__()
        self.heads = c.heads
        self.ln1 = nn.LayerNorm(c.width)
        self.qkv = nn.Linear(c.width, 3 * c.width)
        self.proj = nn.Linear(c.width, c.width)
        self.ln2 = nn.LayerNorm(c.width)
        self.fc1 = nn.Linear(c.width, c.ffn)
        self.fc2 = nn.Linear(c.ffn, c.width)

    def _split(self, x):
        b, t, d = x.shape
        return x.view(b, t, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, allowed, row_valid, cache=None):
        """``allowed``: (B, 1, Tq, Tk) bool; ``row_valid``: (B, Tq, 1)."""
        b, t, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y) * row_valid
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


def _run_starts(change: torch.Tensor) -> torch.Tensor:
    idx = torch.arange(change.shape[-1], device=change.device).expand_as(change)
    return torch.where(change, idx, torch.zeros_like(idx)).cummax(dim=-1).values


def positions(tokens: torch.Tensor, segments: torch.Tensor, classes: torch.Tensor):
    """(position within segment, run position) for every slot."""
    first = torch.ones_like(segments[:, :1], dtype=torch.bool)
    seg_change = torch.cat([first, segments[:, 1:] != segments[:, :-1]], dim=1)
    cls = classes[tokens]
    cls_change = seg_change | torch.cat([first, cls[:, 1:] != cls[:, :-1]], dim=1)
    idx = torch.arange(tokens.shape[1], device=tokens.device).expand_as(tokens)
    return idx - _run_starts(seg_change), idx - _run_starts(cls_change)


class ToyLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.tok = nn.Embedding(c.vocab_size, c.width)
        self.pos = nn.Embedding(c.max_positions, c.width)
        self.run = nn.Embedding(c.max_positions, c.width)
        self.blocks = nn.ModuleList(Block(c) for _ in range(c.layers))
        self.ln_f = nn.LayerNorm(c.width)
        self.head = nn.Linear(c.width, c.vocab_size)
        classes = c.token_classes or (0,) * c.vocab_size
        self.register_buffer("classes", torch.tensor(classes, dtype=torch.long), persistent=False)
        self.to(c.torch_dtype)

    def reset_parameters(self, seed: int) -> None:
        """Scaled-normal weights (std ``init_std``), zero biases, unit LayerNorm gains."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters()):
                if ".ln" in name or name.startswith("ln_f"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * self.config.init_std)

    def _embed(self, tokens, pos, run):
        cap = self.config.max_positions - 1
        return self.tok(tokens) + self.pos(pos.clamp(max=cap)) + self.run(run.clamp(max=cap))

    def forward(self, tokens: torch.Tensor, segments: torch.Tensor) -> torch.Tensor:
        """Logits (B, T, V). ``segments`` holds a segment index per slot, -1 for padding."""
        pos, run = positions(tokens, segments, self.classes)
        x = self._embed(tokens, pos, run)
        t = tokens.shape[1]
        causal = torch.ones(t, t, dtype=torch.bool, device=tokens.device).tril()
        valid = segments >= 0
        allowed = (segments[:, :, None] == segments[:, None, :]) & causal & valid[:, :, None]
        # Padding rows see only themselves so the softmax stays finite; their output is dropped.
        allowed = allowed | (torch.eye(t, dtype=torch.bool, device=tokens.device) & ~valid[:, :, None])
        allowed = allowed[:, None]
        row_valid = valid[:, :, None].to(x.dtype)
        for block in self.blocks:
            x = block(x, allowed, row_valid)
        return self.head(self.ln_f(x))

    # incremental decoding ---------------------------------------------------
    def start_cache(self, tokens: torch.Tensor, valid: torch.Tensor):
        """Run left-padded prompts (one segment per row) and return (last logits, cache)."""
        segments = torch.where(valid, torch.zeros_like(tokens), torch.full_like(tokens, -1))
        pos, run = positions(tokens, segments, self.classes)
        x = self._embed(tokens, pos, run)
        t = tokens.shape[1]
        causal = torch.ones(t, t, dtype=torch.bool, device=tokens.device).tril()
        allowed = causal & valid[:, None, :] & valid[:, :, None]
        allowed = (allowed | (torch.eye(t, dtype=torch.bool) & ~valid[:, :, None]))[:, None]
        row_valid = valid[:, :, None].to(x.dtype)
        layers = [{} for _ in self.blocks]
        for block, lc in zip(self.blocks, layers):
            x = block(x, allowed, row_valid, cache=lc)
        cache = {
            "layers": layers,
            "key_valid": valid.clone(),
            "pos": pos[:, -1].clone(),
            "run": run[:, -1].clone(),
            "cls": self.classes[tokens[:, -1]].clone(),
        }
        return self.head(self.ln_f(x[:, -1])), cache

    def step(self, token: torch.Tensor, cache: dict) -> torch.Tensor:
        """Append one token per row; returns next-token logits (B, V)."""
        cls = self.classes[token]
        pos = cache["pos"] + 1
        run = torch.where(cls == cache["cls"], cache["run"] + 1, torch.zeros_like(cache["run"]))
        x = self._embed(token[:, None], pos[:, None], run[:, None])
        key_valid = torch.cat([cache["key_valid"], torch.ones_like(token[:, None], dtype=torch.bool)], dim=1)
        allowed = key_valid[:, None, None, :]
        row_valid = torch.ones(token.shape[0], 1, 1, dtype=x.dtype)
        for block, lc in zip(self.blocks, cache["layers"]):
            x = block(x, allowed, row_valid, cache=lc)
        cache.update(key_valid=key_valid, pos=pos, run=run, cls=cls)
        return self.head(self.ln_f(x[:, 0]))


def init_model(config: ModelConfig, seed: int) -> ToyLM:
    model = ToyLM(config)
    model.reset_parameters(seed)
    return model


def batch_tensors(packs, device="cpu"):
    tokens = torch.tensor([p.tokens for p in packs], dtype=torch.long, device=device)
    segments = torch.tensor([p.segment_ids() for p in packs], dtype=torch.long, device=device)
    mask = torch.tensor([p.loss_mask for p in packs], dtype=torch.bool, device=device)
    return tokens, segments, mask


def forward_loss(model: ToyLM, packs) -> torch.Tensor:
    """Mean next-token NLL over loss-masked (target) positions."""
    tokens, segments, mask = batch_tensors(packs) if not isinstance(packs, tuple) else packs
    target_mask = mask[:, 1:]
    if not target_mask.any():
        raise DegenerateBatch("no loss-masked positions in batch")
    logits = model(tokens, segments)[:, :-1]
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1), reduction="none")
    nll = nll.view_as(target_mask)
    return (nll * target_mask).sum() / target_mask.sum()


def grad(model: ToyLM, packs) -> dict:
    """Gradients of forward_loss with respect to every named parameter."""
    params = dict(model.named_parameters())
    loss = forward_loss(model, packs)
    grads = torch.autograd.grad(loss, list(params.values()))
    return dict(zip(params, grads))
