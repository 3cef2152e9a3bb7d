"""Parallel-corpus construction: source cleaning, translation, synthesis, filtering.

Stages run per record and are pure given the oracles, so a corpus can be
processed record-parallel; outputs are sorted by id.

General variant::

    clean_source -> translate + sanitize -> synthesize_and_rate -> verify_target

High-quality variant (from General)::

    vad_trim -> hq_ratio
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import random
import re
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import (
    AlphabetError,
    AllSilence,
    ConfigError,
    EmptyReject,
    MixedLanguageReject,
    OutOfRange,
    ToyS2STError,
)
from .metrics import CHARACTER_LANGUAGES, wer
from .protocol import discretize_speed
from .synthspeech import SyntheticCodec, SyntheticWaveform

SOURCE_SCHEMA = "toys2st.source/1"
SAMPLE_SCHEMA = "toys2st.sample/1"
DISCARD_SCHEMA = "toys2st.discard/1"

GENERAL_STAGES = ("clean_source", "translate", "synthesize_and_rate", "verify_target")
HQ_STAGES = ("vad_trim", "hq_ratio")


def _rng(seed, *parts) -> random.Random:
    digest = hashlib.sha256(":".join(map(str, (seed, *parts))).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _exact(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x).limit_denominator(10**6)


# records ---------------------------------------------------------------------


@dataclass(frozen=True)
class SourceRecord:
    id: str
    waveform: SyntheticWaveform
    transcript: str
    lang: str

    def __post_init__(self):
        if not self.transcript:
            raise ConfigError(f"record {self.id}: empty transcript")

    def to_dict(self) -> dict:
        return {
            "schema": SOURCE_SCHEMA,
            "id": self.id,
            "lang": self.lang,
            "transcript": self.transcript,
            "waveform": self.waveform.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SourceRecord":
        if doc.get("schema") != SOURCE_SCHEMA:
            raise ConfigError(f"unexpected source schema {doc.get('schema')!r}")
        return cls(doc["id"], SyntheticWaveform.from_dict(doc["waveform"]), doc["transcript"], doc["lang"])


@dataclass(frozen=True)
class AuditEntry:
    stage: str
    decision: str
    value: object = None


@dataclass(frozen=True)
class ParallelSample:
    id: str
    source: SourceRecord
    target_lang: str
    target_text: str
    target_waveform: SyntheticWaveform
    ratio: Fraction
    speed_bucket: float
    audit: tuple = ()

    @property
    def direction(self) -> str:
        return f"{self.source.lang}-{self.target_lang}"

    def to_dict(self) -> dict:
        return {
            "schema": SAMPLE_SCHEMA,
            "id": self.id,
            "source_lang": self.source.lang,
            "target_lang": self.target_lang,
            "source": self.source.waveform.to_dict(self.id),
            "source_text": self.source.transcript,
            "target_text": self.target_text,
            "target": self.target_waveform.to_dict(self.id),
            "ratio": float(self.ratio),
            "ratio_exact": f"{self.ratio.numerator}/{self.ratio.denominator}",
            "speed_bucket": self.speed_bucket,
            "audit": [[a.stage, a.decision, a.value] for a in self.audit],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParallelSample":
        if doc.get("schema") != SAMPLE_SCHEMA:
            raise ConfigError(f"unexpected sample schema {doc.get('schema')!r}")
        src = SourceRecord(doc["id"], SyntheticWaveform.from_dict(doc["source"]), doc["source_text"], doc["source_lang"])
        return cls(
            id=doc["id"],
            source=src,
            target_lang=doc["target_lang"],
            target_text=doc["target_text"],
            target_waveform=SyntheticWaveform.from_dict(doc["target"]),
            ratio=Fraction(doc["ratio_exact"]),
            speed_bucket=float(doc["speed_bucket"]),
            audit=tuple(AuditEntry(*a) for a in doc.get("audit", [])),
        )


@dataclass(frozen=True)
class Discard:
    id: str
    stage: str
    reason: str
    value: object = None
    audit: tuple = ()

    def to_dict(self) -> dict:
        return {
            "schema": DISCARD_SCHEMA,
            "id": self.id,
            "stage": self.stage,
            "reason": self.reason,
            "value": self.value,
            "audit": [[a.stage, a.decision, a.value] for a in self.audit],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Discard":
        if doc.get("schema") != DISCARD_SCHEMA:
            raise ConfigError(f"unexpected discard schema {doc.get('schema')!r}")
        return cls(doc["id"], doc["stage"], doc["reason"], doc.get("value"), tuple(AuditEntry(*a) for a in doc.get("audit", [])))


class _Drop(Exception):
    def __init__(self, stage, reason, value=None):
        super().__init__(reason)
        self.stage, self.reason, self.value = stage, reason, value


# oracles ---------------------------------------------------------------------


@dataclass
class ExactASR:
    """Recognizes a synthetic waveform perfectly (edge silence removed)."""

    codec: SyntheticCodec

    def __call__(self, waveform: SyntheticWaveform, key=None) -> str:
        return self.codec.strip_silence(waveform.text)


def _random_unit(codec: SyntheticCodec, lang: str, length: int, rng: random.Random, avoid: str) -> str:
    alphabet = codec.config.alphabets[lang]
    while True:
        cand = "".join(rng.choice(alphabet) for _ in range(length))
        if cand != avoid or len(alphabet) ** length == 1:
            return cand


def corrupt_text(codec: SyntheticCodec, text: str, rate: float, rng: random.Random, unit: str = "word") -> str:
    """Replace each word (or character) with probability ``rate``."""
    lang = codec.language_of(text)
    if lang is None:
        return text
    if unit == "char":
        return "".join(
            _random_unit(codec, lang, 1, rng, ch) if ch in codec.lang_of_char and rng.random() < rate else ch for ch in text
        )
    words = text.split(codec.config.space)
    return codec.config.space.join(
        _random_unit(codec, lang, len(w), rng, w) if w and rng.random() < rate else w for w in words
    )


@dataclass
class CorruptingASR:
    """Seeded recognition errors: a fraction of utterances get unit substitutions."""

    codec: SyntheticCodec
    rate: float = 0.0
    utterance_rate: float = 1.0
    unit: str = "word"
    seed: int = 0

    def __call__(self, waveform: SyntheticWaveform, key=None) -> str:
        text = self.codec.strip_silence(waveform.text)
        rng = _rng(self.seed, "asr", key if key is not None else text, waveform.speaker_id)
        if rng.random() >= self.utterance_rate:
            return text
        return corrupt_text(self.codec, text, self.rate, rng, self.unit)


PREFIXES = {
    "en": ("Sure, here is the translation:", "Here is the translation:", "Translation:"),
    "zh": ("好的，以下是翻译：", "以下是翻译：", "翻译："),
}
NOTES = {
    "en": ("Note: the translation keeps the original tone.", "Note: literal rendering."),
    "zh": ("注：译文保留了原文语气。", "注意：此为直译。"),
}


@dataclass
class ToyLLMTranslator:
    """Cipher translation wrapped in the reply habits of a chat model.

    With the given probabilities it adds a chatty prefix, a trailing note,
    stray line breaks, or leaks a source-language word; ``extra_word_rate``
    appends hallucinated words. All choices are seeded per record key.
    """

    codec: SyntheticCodec
    prefix_rate: float = 0.0
    note_rate: float = 0.0
    linebreak_rate: float = 0.0
    mixed_rate: float = 0.0
    extra_word_rate: float = 0.0
    seed: int = 0

    def __call__(self, text: str, src: str, tgt: str, key=None) -> str:
        out = self.codec.translate(text, src, tgt)
        rng = _rng(self.seed, "mt", key if key is not None else text)
        space = self.codec.config.space
        words = out.split(space)
        if rng.random() < self.extra_word_rate:
            words += [_random_unit(self.codec, tgt, 3, rng, "") for _ in range(rng.randint(1, 3))]
        if rng.random() < self.mixed_rate:
            i = rng.randrange(len(words))
            words[i] = text.split(space)[min(i, len(text.split(space)) - 1)]
        if rng.random() < self.linebreak_rate:
            out = "".join(w + rng.choice([" ", "\n", "  ", " \n "]) for w in words).rstrip()
        else:
            out = space.join(words)
        key_lang = tgt if tgt in PREFIXES else "en"
        if rng.random() < self.prefix_rate:
            out = rng.choice(PREFIXES[key_lang]) + rng.choice([" ", "\n"]) + out
        if rng.random() < self.note_rate:
            out = out + "\n\n" + rng.choice(NOTES[key_lang])
        return out


@dataclass
class ToyTTS:
    """Voice-conditioned synthesis with seeded edge silence and mispronunciations."""

    codec: SyntheticCodec
    max_lead: int = 0
    max_trail: int = 0
    mispronounce_rate: float = 0.0
    seed: int = 0

    def __call__(self, text: str, reference: SyntheticWaveform, key=None) -> SyntheticWaveform:
        rng = _rng(self.seed, "tts", key if key is not None else text, reference.speaker_id)
        lead = rng.randint(0, self.max_lead)
        trail = rng.randint(0, self.max_trail)
        spoken = text
        if self.mispronounce_rate and rng.random() < self.mispronounce_rate:
            spoken = corrupt_text(self.codec, text, 1.0, rng, "char" if self.codec.language_of(text) in CHARACTER_LANGUAGES else "word")
        return self.codec.synthesize(spoken, reference, lead, trail)


@dataclass
class Oracles:
    source_asr: Callable
    translator: Callable
    tts: Callable
    target_asr: Callable

    @classmethod
    def exact(cls, codec: SyntheticCodec) -> "Oracles":
        return cls(ExactASR(codec), ToyLLMTranslator(codec), ToyTTS(codec), ExactASR(codec))


# sanitization ------------------------------------------------------------------


DEFAULT_PREFIX_PATTERNS = (
    r"sure[,!.]?\s*here(?:\s+is|'s)\s+the\s+translation\s*[:：]",
    r"here(?:\s+is|'s)\s+the\s+translation\s*[:：]",
    r"translation\s*[:：]",
    r"好的[，,]?\s*以下是翻译\s*[:：]",
    r"以下是翻译\s*[:：]",
    r"翻译\s*[:：]",
)
DEFAULT_NOTE_MARKERS = ("note:", "notes:", "note that", "(note", "注：", "注:", "注意：", "注意:", "备注：")


@dataclass(frozen=True)
class SanitizeConfig:
    prefixes: tuple = DEFAULT_PREFIX_PATTERNS
    note_markers: tuple = DEFAULT_NOTE_MARKERS


def sanitize_translation(raw: str, codec: SyntheticCodec, config: SanitizeConfig = SanitizeConfig()) -> str:
    """Strip chat-model reply artifacts from a raw translation.

    Raises MixedLanguageReject when letters of two languages co-occur and
    EmptyReject when nothing is left.
    """
    text = raw
    patterns = [re.compile(r"^\s*" + p + r"\s*", re.IGNORECASE) for p in config.prefixes]
    changed = True
    while changed:
        changed = False
        for pat in patterns:
            stripped = pat.sub("", text, count=1)
            if stripped != text:
                text, changed = stripped, True
    lowered = text.lower()
    cut = min((i for i in (lowered.find(m.lower()) for m in config.note_markers) if i >= 0), default=-1)
    if cut >= 0:
        text = text[:cut]
    text = re.sub(r"\s+", " ", text).strip()
    if not text:
        raise EmptyReject("translation empty after cleaning")
    langs = {codec.lang_of_char[ch] for ch in text if ch in codec.lang_of_char}
    if len(langs) > 1:
        raise MixedLanguageReject(f"translation mixes {sorted(langs)}")
    return text


# stages ------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    source_wer_max: float = 0.05
    target_wer_max: float = 0.01
    ratio_range: tuple = (0.5, 2.0)
    hq_ratio_range: tuple = (0.7, 1.5)
    duration_bin: float = 0.5
    workers: int = 1
    sanitize: SanitizeConfig = SanitizeConfig()


def _target_lang(codec: SyntheticCodec, src: str) -> str:
    others = [l for l in codec.languages if l != src]
    if len(others) != 1:
        raise ConfigError("target language is ambiguous")
    return others[0]


def _clean_one(record: SourceRecord, asr, config: PipelineConfig) -> AuditEntry:
    try:
        hyp = asr(record.waveform, key=record.id)
        value = wer(hyp, record.transcript, record.lang)
    except Exception as exc:  # oracle failures discard the record, never the run
        raise _Drop("clean_source", "OracleError", repr(exc)) from None
    if value > config.source_wer_max:
        raise _Drop("clean_source", "SourceWER", value)
    return AuditEntry("clean_source", "keep", value)


def clean_source(records: Iterable[SourceRecord], asr, config: PipelineConfig = PipelineConfig()):
    """Keep records whose re-recognized transcript has WER <= threshold."""
    kept, discarded = [], []
    for rec in records:
        try:
            _clean_one(rec, asr, config)
            kept.append(rec)
        except _Drop as d:
            discarded.append(Discard(rec.id, d.stage, d.reason, d.value))
    return kept, discarded


def synthesize_and_rate(
    record: SourceRecord,
    target_text: str,
    target_lang: str,
    tts,
    config: PipelineConfig = PipelineConfig(),
    audit: tuple = (),
) -> ParallelSample:
    """Synthesize the target in the source voice and assign its speed bucket.

    Raises OutOfRange when the duration ratio leaves the accepted range.
    """
    target = tts(target_text, record.waveform, key=record.id)
    ratio = Fraction(len(target.text), len(record.waveform.text))
    try:
        bucket = discretize_speed(ratio, *config.ratio_range)
    except OutOfRange as exc:
        exc.ratio = ratio
        raise
    audit = audit + (AuditEntry("synthesize_and_rate", "keep", float(ratio)),)
    return ParallelSample(record.id, record, target_lang, target_text, target, ratio, bucket, audit)


def verify_target(sample: ParallelSample, asr, config: PipelineConfig = PipelineConfig()) -> tuple[bool, float]:
    value = wer(asr(sample.target_waveform, key=sample.id), sample.target_text, sample.target_lang)
    return value <= config.target_wer_max, value


def process_record(record: SourceRecord, codec: SyntheticCodec, oracles: Oracles, config: PipelineConfig):
    """Run every General stage on one record; returns a ParallelSample or a Discard."""
    audit: tuple = ()
    try:
        audit += (_clean_one(record, oracles.source_asr, config),)
        tgt = _target_lang(codec, record.lang)
        try:
            raw = oracles.translator(record.transcript, record.lang, tgt, key=record.id)
        except Exception as exc:
            raise _Drop("translate", "OracleError", repr(exc)) from None
        try:
            target_text = sanitize_translation(raw, codec, config.sanitize)
        except (MixedLanguageReject, EmptyReject) as exc:
            raise _Drop("translate", type(exc).__name__, raw) from None
        audit += (AuditEntry("translate", "keep", target_text),)
        try:
            sample = synthesize_and_rate(record, target_text, tgt, oracles.tts, config, audit)
        except OutOfRange as exc:
            raise _Drop("synthesize_and_rate", "RatioFilter", float(exc.ratio)) from None
        except AlphabetError as exc:
            raise _Drop("synthesize_and_rate", "AlphabetError", str(exc)) from None
        try:
            ok, value = verify_target(sample, oracles.target_asr, config)
        except ToyS2STError as exc:
            raise _Drop("verify_target", "OracleError", repr(exc)) from None
        if not ok:
            raise _Drop("verify_target", "TargetWER", value)
        return replace(sample, audit=sample.audit + (AuditEntry("verify_target", "keep", value),))
    except _Drop as d:
        audit += (AuditEntry(d.stage, f"discard:{d.reason}", d.value),)
        return Discard(record.id, d.stage, d.reason, d.value, audit)


def _process_chunk(args):
    chunk, codec, oracles, config = args
    return [process_record(r, codec, oracles, config) for r in chunk]


# statistics --------------------------------------------------------------------


def _histogram(values: Sequence[Fraction], width: Fraction) -> dict:
    if not values:
        return {}
    bins = Counter(math.floor(v / width) for v in values)
    lo, hi = min(bins), max(bins)
    return {k * width: bins.get(k, 0) for k in range(lo, hi + 1)}


@dataclass
class PipelineStats:
    stages: dict = field(default_factory=dict)  # stage -> {"in", "kept", "discarded", "reasons"}
    ratios: list = field(default_factory=list)
    durations: list = field(default_factory=list)
    ratio_bin: Fraction = Fraction(1, 10)
    duration_bin: Fraction = Fraction(1, 2)

    @classmethod
    def from_results(cls, stages: Sequence[str], samples, discards, duration_bin=0.5) -> "PipelineStats":
        stats = cls(duration_bin=_exact(duration_bin))
        failed_at = Counter(d.stage for d in discards)
        reasons = {s: Counter() for s in stages}
        for d in discards:
            reasons[d.stage][d.reason] += 1
        remaining = len(samples) + len(discards)
        for s in stages:
            stats.stages[s] = {"in": remaining, "kept": remaining - failed_at[s], "discarded": failed_at[s], "reasons": dict(reasons[s])}
            remaining -= failed_at[s]
        stats.ratios = sorted(s.ratio for s in samples)
        stats.durations = sorted(s.source.waveform.duration for s in samples)
        return stats

    def merge(self, other: "PipelineStats") -> "PipelineStats":
        out = PipelineStats(ratio_bin=self.ratio_bin, duration_bin=self.duration_bin)
        for s in list(self.stages) + [s for s in other.stages if s not in self.stages]:
            a = self.stages.get(s, {"in": 0, "kept": 0, "discarded": 0, "reasons": {}})
            b = other.stages.get(s, {"in": 0, "kept": 0, "discarded": 0, "reasons": {}})
            out.stages[s] = {
                "in": a["in"] + b["in"],
                "kept": a["kept"] + b["kept"],
                "discarded": a["discarded"] + b["discarded"],
                "reasons": dict(Counter(a["reasons"]) + Counter(b["reasons"])),
            }
        out.ratios = sorted(self.ratios + other.ratios)
        out.durations = sorted(self.durations + other.durations)
        return out

    @property
    def ratio_histogram(self) -> dict:
        return _histogram(self.ratios, self.ratio_bin)

    @property
    def duration_histogram(self) -> dict:
        return _histogram(self.durations, self.duration_bin)

    def to_dict(self) -> dict:
        fmt = lambda h: {f"{float(k):g}": v for k, v in h.items()}
        return {
            "stages": self.stages,
            "ratio_bin": float(self.ratio_bin),
            "duration_bin": float(self.duration_bin),
            "ratio_histogram": fmt(self.ratio_histogram),
            "duration_histogram": fmt(self.duration_histogram),
            "kept": len(self.ratios),
        }

    def histogram_csv(self, which: str) -> str:
        hist = self.ratio_histogram if which == "ratio" else self.duration_histogram
        width = self.ratio_bin if which == "ratio" else self.duration_bin
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lower", "bin_upper", "count"])
        for edge, count in hist.items():
            w.writerow([f"{float(edge):g}", f"{float(edge + width):g}", count])
        return buf.getvalue()


# dataset variants ---------------------------------------------------------------


@dataclass
class PipelineResult:
    samples: list
    discards: list
    stats: PipelineStats

    @property
    def ids(self) -> set:
        return {s.id for s in self.samples}


def build_general(
    records: Sequence[SourceRecord],
    codec: SyntheticCodec,
    oracles: Oracles,
    config: PipelineConfig = PipelineConfig(),
) -> PipelineResult:
    records = list(records)
    if len({r.id for r in records}) != len(records):
        raise ConfigError("duplicate record ids")
    if config.workers > 1 and len(records) > 1:
        n = config.workers
        chunks = [records[i::n] for i in range(n)]
        with ProcessPoolExecutor(n) as pool:
            results = [r for part in pool.map(_process_chunk, [(c, codec, oracles, config) for c in chunks]) for r in part]
    else:
        results = [process_record(r, codec, oracles, config) for r in records]
    samples = sorted((r for r in results if isinstance(r, ParallelSample)), key=lambda s: s.id)
    discards = sorted((r for r in results if isinstance(r, Discard)), key=lambda d: d.id)
    return PipelineResult(samples, discards, PipelineStats.from_results(GENERAL_STAGES, samples, discards, config.duration_bin))


def vad_trim(w: SyntheticWaveform, codec: SyntheticCodec) -> SyntheticWaveform:
    text = codec.strip_silence(w.text)
    if not text:
        raise AllSilence("waveform is all silence")
    return SyntheticWaveform(text, w.speaker_id)


def build_hq(general: Sequence[ParallelSample], codec: SyntheticCodec, config: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Trim edge silence from both sides, recompute the ratio, apply the stricter bound."""
    lo, hi = (_exact(b) for b in config.hq_ratio_range)
    samples, discards = [], []
    for s in general:
        try:
            src = vad_trim(s.source.waveform, codec)
            tgt = vad_trim(s.target_waveform, codec)
        except AllSilence:
            discards.append(Discard(s.id, "vad_trim", "AllSilence", None, s.audit + (AuditEntry("vad_trim", "discard:AllSilence"),)))
            continue
        ratio = Fraction(len(tgt.text), len(src.text))
        audit = s.audit + (AuditEntry("vad_trim", "keep", float(ratio)),)
        if not lo <= ratio <= hi:
            discards.append(Discard(s.id, "hq_ratio", "HQRatioFilter", float(ratio), audit + (AuditEntry("hq_ratio", "discard:HQRatioFilter", float(ratio)),)))
            continue
        samples.append(
            replace(
                s,
                source=replace(s.source, waveform=src),
                target_waveform=tgt,
                ratio=ratio,
                speed_bucket=discretize_speed(ratio, *config.ratio_range),
                audit=audit + (AuditEntry("hq_ratio", "keep", float(ratio)),),
            )
        )
    samples.sort(key=lambda s: s.id)
    discards.sort(key=lambda d: d.id)
    return PipelineResult(samples, discards, PipelineStats.from_results(HQ_STAGES, samples, discards, config.duration_bin))


# manifests ---------------------------------------------------------------------


def write_jsonl(path, records: Iterable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            doc = r.to_dict() if hasattr(r, "to_dict") else r
            fh.write(json.dumps(doc, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_sources(path) -> list[SourceRecord]:
    return [SourceRecord.from_dict(d) for d in read_jsonl(path)]


def read_samples(path) -> list[ParallelSample]:
    return [ParallelSample.from_dict(d) for d in read_jsonl(path)]


def read_discards(path) -> list[Discard]:
    return [Discard.from_dict(d) for d in read_jsonl(path)]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
