"""Stage drivers shared by the command line and the acceptance tests."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .corpus import generate_mt_pairs, generate_sources, phase_datasets
from .pipeline import (
    Oracles,
    PipelineResult,
    SourceRecord,
    build_general,
    build_hq,
    clean_source,
)
from .protocol import TaskMode
from .synthspeech import SyntheticCodec
from .toylm.model import init_model
from .toylm.train import PhaseSchedule, TrainResult, load_checkpoint, train

log = logging.getLogger(__name__)


@dataclass
class ToyData:
    sources: list
    test_sources: list
    mt_pairs: list
    clean: list
    general: PipelineResult
    hq: PipelineResult
    test: list  # held-out pairs built with exact oracles, HQ-processed

    def datasets(self, codec: SyntheticCodec, phase2_modes=None, phase3_modes=None) -> dict:
        kw = {}
        if phase2_modes is not None:
            kw["phase2_modes"] = phase2_modes
        if phase3_modes is not None:
            kw["phase3_modes"] = phase3_modes
        return phase_datasets(codec, self.clean, self.general.samples, self.hq.samples, self.mt_pairs, **kw)


def build_test_set(test_sources, codec: SyntheticCodec, config: RunConfig) -> list:
    general = build_general(test_sources, codec, Oracles.exact(codec), config.pipeline)
    return build_hq(general.samples, codec, config.pipeline).samples


def build_toy_data(config: RunConfig, codec: SyntheticCodec, sources: list[SourceRecord] | None = None) -> ToyData:
    seed, cc = config.seed, config.corpus
    sources = sources if sources is not None else generate_sources(codec, cc, seed)
    test_sources = generate_sources(codec, cc, seed, split="test", exclude=[r.transcript for r in sources])
    mt = generate_mt_pairs(codec, cc, seed, exclude=[r.transcript for r in sources + test_sources])
    oracles = config.oracles.build(codec, seed)
    clean, _ = clean_source(sources, oracles.source_asr, config.pipeline)
    general = build_general(sources, codec, oracles, config.pipeline)
    hq = build_hq(general.samples, codec, config.pipeline)
    test = build_test_set(test_sources, codec, config)
    log.info("data: %d sources, %d general, %d hq, %d test pairs", len(sources), len(general.samples), len(hq.samples), len(test))
    return ToyData(sources, test_sources, mt, clean, general, hq, test)


def direct_only_schedule(base: PhaseSchedule) -> PhaseSchedule:
    """The same curriculum with every S2ST phase restricted to Direct mode."""
    phases = []
    for p in base.phases:
        if p.data in ("phase2", "phase3"):
            p = dataclasses.replace(p, required_tasks=(TaskMode.S2ST_DIRECT.value,))
        phases.append(p)
    return dataclasses.replace(base, phases=tuple(phases))


def train_model(
    config: RunConfig,
    codec: SyntheticCodec,
    datasets: dict,
    schedule: PhaseSchedule | None = None,
    phases=None,
    checkpoint_dir=None,
    resume=None,
) -> TrainResult:
    model = init_model(config.model_config(codec), config.seed)
    return train(
        model,
        schedule or config.schedule,
        datasets,
        config.seed,
        phases=phases,
        checkpoint_dir=checkpoint_dir,
        resume=load_checkpoint(resume) if isinstance(resume, (str, Path)) else resume,
        pad_id=codec.layout.eod,
    )
