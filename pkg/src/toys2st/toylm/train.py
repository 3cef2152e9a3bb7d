"""Three-phase curriculum training loop with resumable phase checkpoints."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from ..corpus import TrainingExample
from ..errors import CheckpointError, ScheduleError
from ..packing import pack
from ..pipeline import _rng
from .model import ModelConfig, ToyLM, batch_tensors, forward_loss
from .optim import AdamWConfig, AdamWState, opt_step

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "toys2st-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PhaseConfig:
    name: str
    data: str
    required_tasks: tuple
    epochs: float
    lr: float
    curve: str = "constant"  # "constant" | "cosine"
    lr_end: float | None = None
    warmup: float = 0.0  # fraction of the phase's steps
    mix_from: str | None = None
    new_per_old: float = 2.0
    select_best: bool = False

    def lr_at(self, step: int, total: int) -> float:
        warm = round(self.warmup * total)
        if step < warm:
            return self.lr * (step + 1) / warm
        if self.curve == "constant":
            return self.lr
        if self.curve == "cosine":
            span = max(total - warm - 1, 1)
            frac = (step - warm) / span
            return self.lr_end + 0.5 * (self.lr - self.lr_end) * (1 + math.cos(math.pi * frac))
        raise ScheduleError(f"unknown learning-rate curve {self.curve!r}")


PHASE1_TASKS = ("asr", "s2tt", "tts", "mt")
S2ST_TASKS = ("s2st_quality", "s2st_performance", "s2st_direct")


@dataclass(frozen=True)
class PhaseSchedule:
    phases: tuple
    packs_per_batch: int = 8
    capacity: int = 512
    optimizer: AdamWConfig = AdamWConfig()
    smoothing_window: int = 50

    def phase(self, name: str) -> PhaseConfig:
        for p in self.phases:
            if p.name == name:
                return p
        raise ScheduleError(f"no phase named {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PhaseSchedule":
        doc = dict(doc)
        phases = tuple(PhaseConfig(**{**p, "required_tasks": tuple(p["required_tasks"])}) for p in doc.pop("phases"))
        opt = doc.pop("optimizer", {})
        opt = AdamWConfig(**{**opt, "betas": tuple(opt.get("betas", (0.9, 0.95)))})
        return cls(phases=phases, optimizer=opt, **doc)


def default_schedule(epoch_scale: float = 1.0) -> PhaseSchedule:
    """Phase 1: alignment tasks, constant LR with a one-epoch warm-up.
    Phase 2: S2ST modes mixed with phase-1 data at 2:1. Phase 3: HQ S2ST, cosine anneal.
    """
    return PhaseSchedule(
        phases=(
            PhaseConfig("phase1", "phase1", PHASE1_TASKS, epochs=3 * epoch_scale, lr=8e-4, warmup=1 / 3),
            PhaseConfig("phase2", "phase2", S2ST_TASKS, epochs=1 * epoch_scale, lr=2e-4, warmup=0.05, mix_from="phase1", new_per_old=2.0),
            PhaseConfig(
                "phase3", "phase3", ("s2st_quality", "s2st_performance"), epochs=1 * epoch_scale,
                lr=5e-5, curve="cosine", lr_end=5e-6, select_best=True,
            ),
        )
    )


@dataclass
class Batch:
    packs: list
    n_new: int
    n_old: int

    @property
    def tokens(self) -> int:
        return sum(p.used for p in self.packs)


def _check_phase_data(phase: PhaseConfig, datasets: dict) -> None:
    for key in (phase.data, phase.mix_from):
        if key is None:
            continue
        if not datasets.get(key):
            raise ScheduleError(f"{phase.name}: dataset {key!r} missing or empty")
    tasks = {ex.task for ex in datasets[phase.data]}
    missing = set(phase.required_tasks) - tasks
    if missing:
        raise ScheduleError(f"{phase.name}: dataset lacks required tasks {sorted(missing)}")


def phase_stream(phase: PhaseConfig, datasets: dict, seed: int, epoch: int) -> list[tuple[TrainingExample, bool]]:
    """Seeded example order for one epoch; old data interleaved at ``new_per_old``:1."""
    rng = _rng(seed, phase.name, epoch)
    new = list(datasets[phase.data])
    rng.shuffle(new)
    stream = [(ex, True) for ex in new]
    if phase.mix_from:
        pool = datasets[phase.mix_from]
        n_old = round(len(new) / phase.new_per_old)
        old = []
        while len(old) < n_old:
            old += rng.sample(pool, min(len(pool), n_old - len(old)))
        stream += [(ex, False) for ex in old]
        rng.shuffle(stream)
    return stream


def phase_batches(phase: PhaseConfig, datasets: dict, seed: int, schedule: PhaseSchedule, pad_id: int = 0) -> list[Batch]:
    _check_phase_data(phase, datasets)
    batches: list[Batch] = []
    whole = math.ceil(phase.epochs)
    for epoch in range(whole):
        stream = phase_stream(phase, datasets, seed, epoch)
        is_new = {ex.id: flag for ex, flag in stream}
        packs, overflow = pack([ex for ex, _ in stream], schedule.capacity, pad_id)
        if overflow:
            log.warning("%s: %d examples longer than capacity %d skipped", phase.name, len(overflow), schedule.capacity)
        epoch_batches = []
        for i in range(0, len(packs), schedule.packs_per_batch):
            group = packs[i : i + schedule.packs_per_batch]
            ids = [s.example_id for p in group for s in p.segments]
            n_new = sum(is_new[x] for x in ids)
            epoch_batches.append(Batch(group, n_new, len(ids) - n_new))
        fraction = phase.epochs - epoch
        if fraction < 1:
            epoch_batches = epoch_batches[: max(1, round(fraction * len(epoch_batches)))]
        batches += epoch_batches
    return batches


def mixing_audit(batches: list[Batch]) -> dict:
    new = sum(b.n_new for b in batches)
    old = sum(b.n_old for b in batches)
    return {"batches": len(batches), "new": new, "old": old, "ratio": new / old if old else math.inf}


# checkpoints -------------------------------------------------------------------


def save_checkpoint(path, model: ToyLM, opt: AdamWState, completed: list[str], seed: int, loss_rows: list, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "optimizer": opt.state_dict(),
            "completed_phases": list(completed),
            "seed": seed,
            "loss_rows": loss_rows,
            **(extra or {}),
        },
        path,
    )


def load_checkpoint(path) -> dict:
    try:
        doc = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    return doc


def model_from_checkpoint(doc: dict) -> ToyLM:
    model = ToyLM(ModelConfig.from_dict(doc["model_config"]))
    try:
        model.load_state_dict(doc["state_dict"])
    except Exception as exc:
        raise CheckpointError(f"checkpoint weights do not match its config: {exc}") from None
    return model


# training ------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ToyLM
    loss_rows: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    audits: dict = field(default_factory=dict)
    selected: dict | None = None  # {"phase", "step", "smoothed_loss", "state_dict"}

    def selected_model(self) -> ToyLM:
        if self.selected is None:
            return self.model
        model = copy.deepcopy(self.model)
        model.load_state_dict(self.selected["state_dict"])
        return model


def train(
    model: ToyLM,
    schedule: PhaseSchedule,
    datasets: dict,
    seed: int,
    phases: list[str] | None = None,
    checkpoint_dir=None,
    resume: dict | None = None,
    pad_id: int = 0,
) -> TrainResult:
    """Run the requested phases in schedule order.

    Each phase's data order depends only on (seed, phase, epoch), so resuming
    from a phase-boundary checkpoint reproduces the uninterrupted run.
    """
    opt = AdamWState()
    completed: list[str] = []
    rows: list[dict] = []
    if resume is not None:
        model.load_state_dict(resume["state_dict"])
        opt = AdamWState.from_state_dict(resume["optimizer"])
        completed = list(resume["completed_phases"])
        rows = list(resume["loss_rows"])
    wanted = [p for p in schedule.phases if (phases is None or p.name in phases) and p.name not in completed]
    for p in wanted:
        _check_phase_data(p, datasets)
    result = TrainResult(model, rows)
    params = dict(model.named_parameters())
    global_step = rows[-1]["global_step"] + 1 if rows else 0
    window = schedule.smoothing_window
    for phase in wanted:
        batches = phase_batches(phase, datasets, seed, schedule, pad_id)
        result.audits[phase.name] = mixing_audit(batches)
        log.info("%s: %d batches, audit %s", phase.name, len(batches), result.audits[phase.name])
        recent: list[float] = []
        best = None
        t0 = time.perf_counter()
        for step, batch in enumerate(batches):
            lr = phase.lr_at(step, len(batches))
            loss = forward_loss(model, batch_tensors(batch.packs))
            grads = torch.autograd.grad(loss, list(params.values()))
            opt_step(params, dict(zip(params, grads)), opt, lr, schedule.optimizer)
            value = loss.item()
            recent = (recent + [value])[-window:]
            smoothed = sum(recent) / len(recent)
            rows.append(
                {
                    "phase": phase.name,
                    "step": step,
                    "global_step": global_step,
                    "lr": lr,
                    "loss": value,
                    "smoothed_loss": smoothed,
                    "tokens": batch.tokens,
                    "n_new": batch.n_new,
                    "n_old": batch.n_old,
                }
            )
            global_step += 1
            if phase.select_best and len(recent) == min(window, len(batches)) and (best is None or smoothed < best["smoothed_loss"]):
                best = {"phase": phase.name, "step": step, "smoothed_loss": smoothed, "state_dict": copy.deepcopy(model.state_dict())}
            if step % 100 == 0:
                log.info("%s step %d/%d loss %.4f lr %.2e (%.1fs)", phase.name, step, len(batches), value, lr, time.perf_counter() - t0)
        completed.append(phase.name)
        if best is not None:
            result.selected = best
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"{phase.name}.ckpt"
            save_checkpoint(path, model, opt, completed, seed, rows)
            result.checkpoints[phase.name] = path
    return result
