"""First-fit sequence packing with per-segment attention isolation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import TrainingExample

DEFAULT_CAPACITY = 512
# Production packs are ~18k tokens long.
PRODUCTION_CAPACITY = 18_000


@dataclass(frozen=True)
class Segment:
    example_id: str
    start: int
    length: int
    prompt_length: int


@dataclass(frozen=True)
class PackedSequence:
    capacity: int
    segments: tuple
    tokens: tuple  # length == capacity, pad positions filled with pad_id
    loss_mask: tuple
    pad_id: int = 0

    @property
    def used(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def pad_length(self) -> int:
        return self.capacity - self.used

    def segment_ids(self) -> list[int]:
        """Segment index per position; -1 on padding."""
        out = [-1] * self.capacity
        for k, s in enumerate(self.segments):
            out[s.start : s.start + s.length] = [k] * s.length
        return out

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "pad_id": self.pad_id,
            "tokens": list(self.tokens),
            "segments": [[s.example_id, s.start, s.length, s.prompt_length] for s in self.segments],
            "loss_mask": [int(b) for b in self.loss_mask],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PackedSequence":
        return cls(
            doc["capacity"],
            tuple(Segment(*s) for s in doc["segments"]),
            tuple(doc["tokens"]),
            tuple(bool(b) for b in doc["loss_mask"]),
            doc.get("pad_id", 0),
        )


def _finish(capacity: int, members: list[TrainingExample], pad_id: int) -> PackedSequence:
    tokens, mask, segments = [], [], []
    for ex in members:
        segments.append(Segment(ex.id, len(tokens), len(ex), len(ex.prompt)))
        tokens.extend(ex.tokens)
        mask.extend(ex.loss_mask)
    pad = capacity - len(tokens)
    return PackedSequence(capacity, tuple(segments), tuple(tokens) + (pad_id,) * pad, tuple(mask) + (False,) * pad, pad_id)


def pack(examples: Sequence[TrainingExample], capacity: int = DEFAULT_CAPACITY, pad_id: int = 0):
    """First-fit in input order; examples are never split.

    Returns ``(packs, overflow)`` where overflow holds examples longer than
    ``capacity``.
    """
    fitting = [ex for ex in examples if len(ex) <= capacity]
    overflow = [ex for ex in examples if len(ex) > capacity]
    if not fitting:
        return [], overflow
    shortest = min(len(ex) for ex in fitting)
    bins: list[list[TrainingExample]] = []
    free: list[int] = []
    open_bins: list[int] = []  # bins that can still take the shortest example, in creation order
    for ex in fitting:
        n = len(ex)
        for pos, b in enumerate(open_bins):
            if free[b] >= n:
                break
        else:
            bins.append([])
            free.append(capacity)
            b = len(bins) - 1
            open_bins.append(b)
            pos = len(open_bins) - 1
        bins[b].append(ex)
        free[b] -= n
        if free[b] < shortest:
            del open_bins[pos]
    return [_finish(capacity, members, pad_id) for members in bins], overflow


def boundary_mask(p: PackedSequence) -> list[tuple[int, int]]:
    """Allowed attention span ``[lo, hi)`` per position; padding gets an empty span."""
    spans = [(i, i) for i in range(p.capacity)]
    for s in p.segments:
        for i in range(s.start, s.start + s.length):
            spans[i] = (s.start, i + 1)
    return spans


def attention_matrix(p: PackedSequence) -> list[list[bool]]:
    return [[lo <= j < hi for j in range(p.capacity)] for lo, hi in boundary_mask(p)]


def unpack(p: PackedSequence) -> list[TrainingExample]:
    out = []
    for s in p.segments:
        toks = p.tokens[s.start : s.start + s.length]
        out.append(TrainingExample(s.example_id, tuple(toks[: s.prompt_length]), tuple(toks[s.prompt_length :])))
    return out


def write_shards(packs: Sequence[PackedSequence], directory, shard_size: int = 1000) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(0, max(len(packs), 1), shard_size):
        path = directory / f"shard-{i // shard_size:05d}.jsonl"
        with path.open("w") as fh:
            for p in packs[i : i + shard_size]:
                fh.write(json.dumps(p.to_dict()) + "\n")
        paths.append(path)
    return paths


def read_shard(path) -> list[PackedSequence]:
    with Path(path).open() as fh:
        return [PackedSequence.from_dict(json.loads(line)) for line in fh if line.strip()]
