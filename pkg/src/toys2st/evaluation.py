"""End-to-end scoring: prompt, emit, parse, decode, then BLEU / SLC / speaker checks.

An emission counts as valid when it parses into the mode's full segment shape,
ends with EOD, and its semantic segment decodes to a waveform. Invalid
emissions lower the validity rate and are left out of every other metric.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Sequence

from .corpus import s2st_example
from .errors import ToyS2STError
from .metrics import corpus_bleu, slc
from .pipeline import ParallelSample
from .protocol import TaskMode, parse_output
from .synthspeech import SyntheticCodec

REPORT_SCHEMA = "toys2st.report/1"


@dataclass
class Emission:
    id: str
    mode: str
    tokens: list
    valid: bool
    error: str | None = None
    source_text: str | None = None
    target_text: str | None = None
    speech_text: str | None = None
    speaker_id: int | None = None
    duration: float | None = None
    # exact duration kept as "n/d" so scoring needs no float round-trip
    duration_exact: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "Emission":
        return cls(**doc)


def decode_emission(sample: ParallelSample, mode: TaskMode, tokens: Sequence[int], codec: SyntheticCodec) -> Emission:
    """Parse raw tokens and resynthesize the speech segment in the source voice."""
    tokens = list(tokens)
    base = dict(id=sample.id, mode=mode.value, tokens=tokens)
    try:
        parse = parse_output(mode, tokens, codec.layout, lang=sample.target_lang, require_terminated=True)
        src = codec.text_from_tokens(parse.source_text) if parse.source_text else None
        tgt = codec.text_from_tokens(parse.target_text) if parse.target_text else None
        wave = codec.detokenize(codec.speaker_tokens(sample.source.waveform.speaker_id), parse.semantic)
    except ToyS2STError as exc:  # malformed, unterminated, or undecodable
        return Emission(**base, valid=False, error=f"{type(exc).__name__}: {exc}")
    d = wave.duration
    return Emission(
        **base,
        valid=True,
        source_text=src,
        target_text=tgt,
        speech_text=codec.strip_silence(wave.text),
        speaker_id=wave.speaker_id,
        duration=float(d),
        duration_exact=f"{d.numerator}/{d.denominator}",
    )


# emitters ----------------------------------------------------------------------


class GoldModel:
    """Emits the training target of each sample: the reference upper bound."""

    def __init__(self, codec: SyntheticCodec):
        self.codec = codec

    def emit(self, samples: Sequence[ParallelSample], mode: TaskMode) -> list[list[int]]:
        return [list(s2st_example(s, mode, self.codec).target) for s in samples]


class LMEmitter:
    def __init__(self, model, sampler, codec: SyntheticCodec, batch_size: int = 64):
        self.model, self.sampler, self.codec, self.batch_size = model, sampler, codec, batch_size

    def emit(self, samples: Sequence[ParallelSample], mode: TaskMode) -> list[list[int]]:
        from .toylm.sampling import generate

        prompts = [list(s2st_example(s, mode, self.codec).prompt) for s in samples]
        return generate(self.model, prompts, self.sampler, self.codec.layout.eod, self.batch_size)


# report ------------------------------------------------------------------------


@dataclass
class Scores:
    count: int
    valid: int
    text_bleu: float | None
    speech_bleu: float | None
    slc_02: float | None
    slc_04: float | None
    mean_duration_ratio: float | None
    parse_validity: float
    speaker_preservation: float | None
    mean_emitted_tokens: float
    slc: dict = field(default_factory=dict)  # tolerance -> rate, for every requested tolerance


@dataclass
class EvalReport:
    mode: str
    overall: Scores
    directions: dict
    rows: list = field(default_factory=list)
    timing: dict | None = None

    def to_dict(self, rows: bool = True) -> dict:
        doc = {
            "schema": REPORT_SCHEMA,
            "mode": self.mode,
            "overall": _scores_dict(self.overall, self.mode),
            "directions": {k: _scores_dict(v, self.mode) for k, v in sorted(self.directions.items())},
        }
        if rows:
            doc["rows"] = self.rows
        if self.timing is not None:
            doc["timing"] = self.timing
        return doc

    def rows_csv(self) -> str:
        buf = io.StringIO()
        cols = ["id", "direction", "valid", "error", "emitted_tokens", "reference", "text_hyp", "speech_hyp", "ratio", "speaker_ok"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({c: r.get(c) for c in cols})
        return buf.getvalue()


def _scores_dict(s: Scores, mode: str) -> dict:
    doc = asdict(s)
    if mode == TaskMode.S2ST_DIRECT.value:
        del doc["text_bleu"]
    return doc


def _bleu(hyps, refs, langs):
    return corpus_bleu(hyps, refs, langs) if hyps else None


def _score(mode: TaskMode, pairs: list[tuple[ParallelSample, Emission]], tolerances=(0.2, 0.4)) -> Scores:
    good = [(s, e) for s, e in pairs if e.valid]
    refs = [s.target_text for s, _ in good]
    langs = [s.target_lang for s, _ in good]
    src_d = [s.source.waveform.duration for s, _ in good]
    tgt_d = [Fraction(e.duration_exact) for _, e in good]
    with_text = mode in (TaskMode.S2ST_QUALITY, TaskMode.S2ST_PERFORMANCE)
    return Scores(
        count=len(pairs),
        valid=len(good),
        text_bleu=_bleu([e.target_text for _, e in good], refs, langs) if with_text else None,
        speech_bleu=_bleu([e.speech_text for _, e in good], refs, langs),
        slc_02=slc(src_d, tgt_d, 0.2) if good else None,
        slc_04=slc(src_d, tgt_d, 0.4) if good else None,
        mean_duration_ratio=float(sum(t / s for s, t in zip(src_d, tgt_d)) / len(good)) if good else None,
        parse_validity=len(good) / len(pairs) if pairs else 0.0,
        speaker_preservation=sum(e.speaker_id == s.source.waveform.speaker_id for s, e in good) / len(good) if good else None,
        mean_emitted_tokens=sum(len(e.tokens) for _, e in pairs) / len(pairs) if pairs else 0.0,
        slc={f"{t:g}": slc(src_d, tgt_d, t) for t in tolerances} if good else {},
    )


def score_emissions(
    samples: Sequence[ParallelSample],
    emissions: Sequence[Emission],
    mode: TaskMode,
    timing: dict | None = None,
    tolerances=(0.2, 0.4),
) -> EvalReport:
    mode = TaskMode.parse(mode)
    by_id = {e.id: e for e in emissions}
    missing = [s.id for s in samples if s.id not in by_id]
    if missing:
        raise ToyS2STError(f"no emission for {len(missing)} samples, e.g. {missing[0]}")
    pairs = [(s, by_id[s.id]) for s in samples]
    rows = []
    for s, e in pairs:
        ratio = float(Fraction(e.duration_exact) / s.source.waveform.duration) if e.valid else None
        rows.append(
            {
                "id": s.id,
                "direction": s.direction,
                "valid": e.valid,
                "error": e.error,
                "emitted_tokens": len(e.tokens),
                "reference": s.target_text,
                "text_hyp": e.target_text,
                "speech_hyp": e.speech_text,
                "ratio": ratio,
                "speaker_ok": e.valid and e.speaker_id == s.source.waveform.speaker_id,
            }
        )
    directions = {}
    for d in sorted({s.direction for s in samples}):
        directions[d] = _score(mode, [(s, e) for s, e in pairs if s.direction == d], tolerances)
    return EvalReport(mode.value, _score(mode, pairs, tolerances), directions, rows, timing)


def run_emitter(emitter, samples: Sequence[ParallelSample], mode: TaskMode, codec: SyntheticCodec) -> tuple[list[Emission], float]:
    t0 = time.perf_counter()
    raw = emitter.emit(samples, mode)
    seconds = time.perf_counter() - t0
    return [decode_emission(s, mode, toks, codec) for s, toks in zip(samples, raw)], seconds


def evaluate(emitter, samples: Sequence[ParallelSample], mode, codec: SyntheticCodec, timing: bool = False, tolerances=(0.2, 0.4)) -> EvalReport:
    mode = TaskMode.parse(mode)
    emissions, seconds = run_emitter(emitter, samples, mode, codec)
    t = None
    if timing:
        tokens = sum(len(e.tokens) for e in emissions)
        t = {"mode": mode.value, "utterances": len(samples), "seconds": seconds, "emitted_tokens": tokens, "tokens_per_second": tokens / seconds if seconds else None}
    return score_emissions(samples, emissions, mode, t, tolerances)


def report_schema() -> dict:
    return json.loads(resources.files("toys2st").joinpath("schemas/report.schema.json").read_text())


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, report_schema())
