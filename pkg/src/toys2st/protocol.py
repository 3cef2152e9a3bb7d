"""Unified token vocabulary, prompt assembly and emission parsing.

Every token id belongs to exactly one named sub-range of the vocabulary:

    control | text:<lang> ... | linguistic | semantic | speaker

Control tokens are single reserved ids: seven task markers, one tag per
language, sixteen speed buckets (0.5 .. 2.0 in steps of 0.1), BOT and EOD.
Text is split into one sub-range per language, which is how the parser finds
the boundary between a source transcript and its translation.
"""

from __future__ import annotations

import bisect
import enum
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import (
    ConfigError,
    IncompleteOutput,
    MalformedOutput,
    OutOfRange,
    PromptShapeError,
)

# Vocabulary size of the production system; the toy layout is much smaller.
PRODUCTION_VOCAB_SIZE = 180_407

SPEAKER_TOKEN_COUNT = 32
SPEED_TENTHS = tuple(range(5, 21))
VOCAB_FORMAT = "toys2st-vocab"
VOCAB_VERSION = 1


class TaskMode(str, enum.Enum):
    ASR = "asr"
    S2TT = "s2tt"
    TTS = "tts"
    MT = "mt"
    S2ST_QUALITY = "s2st_quality"
    S2ST_PERFORMANCE = "s2st_performance"
    S2ST_DIRECT = "s2st_direct"

    @property
    def is_s2st(self) -> bool:
        return self in S2ST_MODES

    @property
    def has_speaker(self) -> bool:
        return self is not TaskMode.MT

    @classmethod
    def parse(cls, name: str) -> "TaskMode":
        if isinstance(name, cls):
            return name
        aliases = {"quality": cls.S2ST_QUALITY, "performance": cls.S2ST_PERFORMANCE, "direct": cls.S2ST_DIRECT}
        if name in aliases:
            return aliases[name]
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(f"unknown task mode {name!r}") from None


S2ST_MODES = frozenset({TaskMode.S2ST_QUALITY, TaskMode.S2ST_PERFORMANCE, TaskMode.S2ST_DIRECT})
PHASE1_TASKS = frozenset({TaskMode.ASR, TaskMode.S2TT, TaskMode.TTS, TaskMode.MT})

# Output segment shape per mode. "src"/"tgt" are text segments, "sem" semantic.
OUTPUT_SHAPES = {
    TaskMode.ASR: ("src",),
    TaskMode.S2TT: ("tgt",),
    TaskMode.MT: ("tgt",),
    TaskMode.TTS: ("sem",),
    TaskMode.S2ST_DIRECT: ("sem",),
    TaskMode.S2ST_PERFORMANCE: ("tgt", "sem"),
    TaskMode.S2ST_QUALITY: ("src", "tgt", "sem"),
}


def speed_name(tenths: int) -> str:
    return f"speed:{tenths / 10:.1f}"


def _control_names(languages: Sequence[str]) -> list[str]:
    names = [f"task:{m.value}" for m in TaskMode]
    names += [f"lang:{lang}" for lang in languages]
    names += [speed_name(t) for t in SPEED_TENTHS]
    names += ["BOT", "EOD"]
    return names


@dataclass(frozen=True)
class VocabConfig:
    """Sub-range sizes. ``text`` is either a total split evenly or a per-language dict."""

    text: int | dict = 64
    linguistic: int = 32
    semantic: int = 32
    speaker: int = 16
    languages: tuple[str, ...] = ("en", "zh")


@dataclass(frozen=True)
class VocabLayout:
    languages: tuple[str, ...]
    controls: tuple[str, ...]
    ranges: dict = field(hash=False)  # name -> (start, size), in id order

    def __post_init__(self):
        _validate_ranges(self.ranges)
        if self.ranges["control"][1] != len(self.controls):
            raise ConfigError("control range size does not match control token list")
        for lang in self.languages:
            if f"text:{lang}" not in self.ranges:
                raise ConfigError(f"missing text range for language {lang!r}")
        object.__setattr__(self, "_starts", [s for s, _ in self.ranges.values()])
        object.__setattr__(self, "_names", list(self.ranges))
        object.__setattr__(self, "_control_ids", {n: self.ranges["control"][0] + i for i, n in enumerate(self.controls)})

    # sizes -----------------------------------------------------------------
    @property
    def total_size(self) -> int:
        return sum(size for _, size in self.ranges.values())

    @property
    def text_vocab_size(self) -> int:
        return sum(self.ranges[f"text:{lang}"][1] for lang in self.languages)

    @property
    def linguistic_vocab_size(self) -> int:
        return self.ranges["linguistic"][1]

    @property
    def semantic_vocab_size(self) -> int:
        return self.ranges["semantic"][1]

    @property
    def speaker_vocab_size(self) -> int:
        return self.ranges["speaker"][1]

    # id mapping ------------------------------------------------------------
    def encode(self, kind: str, index: int) -> int:
        try:
            start, size = self.ranges[kind]
        except KeyError:
            raise ConfigError(f"unknown sub-range {kind!r}") from None
        if not 0 <= index < size:
            raise ConfigError(f"index {index} outside {kind} range of size {size}")
        return start + index

    def decode(self, token: int) -> tuple[str, int]:
        if not 0 <= token < self.total_size:
            raise ConfigError(f"token id {token} outside vocabulary")
        i = bisect.bisect_right(self._starts, token) - 1
        name = self._names[i]
        return name, token - self._starts[i]

    def kind(self, token: int) -> str:
        return self.decode(token)[0]

    def in_range(self, token: int, kind: str) -> bool:
        start, size = self.ranges[kind]
        return start <= token < start + size

    def control(self, name: str) -> int:
        try:
            return self._control_ids[name]
        except KeyError:
            raise ConfigError(f"unknown control token {name!r}") from None

    def control_name(self, token: int) -> str:
        kind, index = self.decode(token)
        if kind != "control":
            raise ConfigError(f"token {token} is not a control token")
        return self.controls[index]

    def task_token(self, mode: TaskMode) -> int:
        return self.control(f"task:{mode.value}")

    def lang_token(self, lang: str) -> int:
        return self.control(f"lang:{lang}")

    def speed_token(self, bucket: float) -> int:
        return self.control(speed_name(round(bucket * 10)))

    @property
    def bot(self) -> int:
        return self.control("BOT")

    @property
    def eod(self) -> int:
        return self.control("EOD")

    @property
    def speed_tokens(self) -> list[int]:
        return [self.control(speed_name(t)) for t in SPEED_TENTHS]

    def text_lang(self, token: int) -> str | None:
        kind = self.kind(token)
        return kind[5:] if kind.startswith("text:") else None

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            "languages": list(self.languages),
            "controls": list(self.controls),
            "ranges": {k: [s, n] for k, (s, n) in self.ranges.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "VocabLayout":
        if doc.get("format") != VOCAB_FORMAT:
            raise ConfigError("not a vocabulary layout document")
        if doc.get("version") != VOCAB_VERSION:
            raise ConfigError(f"unsupported vocabulary layout version {doc.get('version')!r}")
        ranges = {k: (int(v[0]), int(v[1])) for k, v in doc["ranges"].items()}
        ranges = dict(sorted(ranges.items(), key=lambda kv: kv[1][0]))
        return cls(tuple(doc["languages"]), tuple(doc["controls"]), ranges)

    @classmethod
    def from_json(cls, text: str) -> "VocabLayout":
        return cls.from_dict(json.loads(text))


def _validate_ranges(ranges: dict) -> None:
    expected = 0
    for name, (start, size) in sorted(ranges.items(), key=lambda kv: kv[1][0]):
        if size <= 0:
            raise ConfigError(f"sub-range {name!r} has non-positive size {size}")
        if start < expected:
            raise ConfigError(f"sub-range {name!r} overlaps its predecessor")
        if start > expected:
            raise ConfigError(f"gap before sub-range {name!r}")
        expected = start + size
    for required in ("control", "linguistic", "semantic", "speaker"):
        if required not in ranges:
            raise ConfigError(f"missing sub-range {required!r}")


def build_vocab(config: VocabConfig) -> VocabLayout:
    languages = tuple(config.languages)
    if len(set(languages)) != len(languages) or len(languages) < 2:
        raise ConfigError("need at least two distinct languages")
    if isinstance(config.text, dict):
        text_sizes = {lang: int(config.text[lang]) for lang in languages}
    else:
        if config.text % len(languages):
            raise ConfigError("text vocabulary must split evenly across languages")
        text_sizes = {lang: config.text // len(languages) for lang in languages}
    controls = _control_names(languages)
    sizes = [("control", len(controls))]
    sizes += [(f"text:{lang}", text_sizes[lang]) for lang in languages]
    sizes += [
        ("linguistic", config.linguistic),
        ("semantic", config.semantic),
        ("speaker", config.speaker),
    ]
    ranges = {}
    start = 0
    for name, size in sizes:
        if size <= 0:
            raise ConfigError(f"sub-range {name!r} must have positive size, got {size}")
        ranges[name] = (start, size)
        start += size
    return VocabLayout(languages, tuple(controls), ranges)


# speed buckets ---------------------------------------------------------------


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    # Recovers short decimals such as 1.05 exactly so ties are detectable.
    return Fraction(x).limit_denominator(10**6)


def discretize_speed(ratio, lo: float = 0.5, hi: float = 2.0) -> float:
    """Nearest 0.1 bucket for a target/source duration ratio.

    Ties round toward 1.0. Ratios outside ``[lo, hi]`` raise OutOfRange.
    """
    r = _as_fraction(ratio)
    lo_t, hi_t = round(lo * 10), round(hi * 10)
    if not math.isclose(lo * 10, lo_t) or not math.isclose(hi * 10, hi_t) or lo_t not in SPEED_TENTHS or hi_t not in SPEED_TENTHS:
        raise ConfigError(f"bucket range [{lo}, {hi}] is not on the 0.1 grid")
    if r <= 0:
        raise OutOfRange(f"ratio must be positive, got {float(r)}")
    if r < Fraction(lo_t, 10) or r > Fraction(hi_t, 10):
        raise OutOfRange(f"ratio {float(r):.4f} outside [{lo}, {hi}]")
    scaled = r * 10
    below = math.floor(scaled)
    frac = scaled - below
    if frac < Fraction(1, 2):
        tenths = below
    elif frac > Fraction(1, 2):
        tenths = below + 1
    else:
        tenths = below if below >= 10 else below + 1
    return tenths / 10


# prompts ---------------------------------------------------------------------


@dataclass(frozen=True)
class Prompt:
    mode: TaskMode
    lang: str
    body: tuple[int, ...]
    speaker: tuple[int, ...] | None = None
    speed: float | None = None

    def header_length(self) -> int:
        return 3 if self.speed is not None else 2


def _check_prompt(p: Prompt, layout: VocabLayout) -> None:
    mode = p.mode
    if p.lang not in layout.languages:
        raise PromptShapeError(f"unknown language {p.lang!r}")
    if mode.is_s2st:
        if p.speed is None:
            raise PromptShapeError(f"{mode.value} prompt requires a speed token")
        if round(p.speed * 10) not in SPEED_TENTHS or not math.isclose(p.speed * 10, round(p.speed * 10)):
            raise PromptShapeError(f"speed {p.speed} is not a bucket value")
    elif p.speed is not None:
        raise PromptShapeError(f"{mode.value} prompt must not carry a speed token")
    if mode.has_speaker:
        if p.speaker is None or len(p.speaker) != SPEAKER_TOKEN_COUNT:
            raise PromptShapeError(f"{mode.value} prompt requires exactly {SPEAKER_TOKEN_COUNT} speaker tokens")
        if not all(layout.in_range(t, "speaker") for t in p.speaker):
            raise PromptShapeError("speaker tokens outside speaker sub-range")
    elif p.speaker is not None:
        raise PromptShapeError("MT prompt must not carry speaker tokens")
    if not p.body:
        raise PromptShapeError("empty prompt body")
    if mode in (TaskMode.TTS, TaskMode.MT):
        langs = {layout.text_lang(t) for t in p.body}
        if None in langs or len(langs) != 1:
            raise PromptShapeError(f"{mode.value} body must be text tokens of one language")
        (body_lang,) = langs
        if mode is TaskMode.TTS and body_lang != p.lang:
            raise PromptShapeError("TTS body language must match the prompt language")
        if mode is TaskMode.MT and body_lang == p.lang:
            raise PromptShapeError("MT body must be in a language other than the target")
    elif not all(layout.in_range(t, "linguistic") for t in p.body):
        raise PromptShapeError(f"{mode.value} body must be linguistic tokens")


def assemble_prompt(p: Prompt, layout: VocabLayout) -> list[int]:
    """[task, lang, (speed), (speaker x32), body..., BOT]"""
    _check_prompt(p, layout)
    out = [layout.task_token(p.mode), layout.lang_token(p.lang)]
    if p.speed is not None:
        out.append(layout.speed_token(p.speed))
    if p.speaker is not None:
        out.extend(p.speaker)
    out.extend(p.body)
    out.append(layout.bot)
    return out


def disassemble_prompt(tokens: Sequence[int], layout: VocabLayout) -> Prompt:
    if len(tokens) < 4 or tokens[-1] != layout.bot:
        raise PromptShapeError("prompt must end with BOT")
    name = layout.control_name(tokens[0])
    if not name.startswith("task:"):
        raise PromptShapeError("prompt must start with a task token")
    mode = TaskMode(name[5:])
    lang_name = layout.control_name(tokens[1])
    if not lang_name.startswith("lang:"):
        raise PromptShapeError("second prompt token must be a language tag")
    i = 2
    speed = None
    if mode.is_s2st:
        sname = layout.control_name(tokens[2])
        if not sname.startswith("speed:"):
            raise PromptShapeError("S2ST prompt must carry a speed token")
        speed = float(sname[6:])
        i = 3
    speaker = None
    if mode.has_speaker:
        speaker = tuple(tokens[i : i + SPEAKER_TOKEN_COUNT])
        i += SPEAKER_TOKEN_COUNT
    p = Prompt(mode, lang_name[5:], tuple(tokens[i:-1]), speaker, speed)
    _check_prompt(p, layout)
    return p


# targets and emissions -------------------------------------------------------


@dataclass(frozen=True)
class OutputParse:
    mode: TaskMode
    source_text: tuple[int, ...] | None = None
    target_text: tuple[int, ...] | None = None
    semantic: tuple[int, ...] | None = None
    terminated: bool = False
    source_lang: str | None = None
    target_lang: str | None = None


def _segment_lang(tokens: Iterable[int], layout: VocabLayout, what: str) -> str:
    langs = {layout.text_lang(t) for t in tokens}
    if not langs or None in langs or len(langs) != 1:
        raise PromptShapeError(f"{what} must be non-empty text of a single language")
    return langs.pop()


def assemble_target(
    mode: TaskMode,
    layout: VocabLayout,
    *,
    source_text: Sequence[int] | None = None,
    target_text: Sequence[int] | None = None,
    semantic: Sequence[int] | None = None,
) -> list[int]:
    """Training target for a mode: the required segments in order, then EOD."""
    given = {"src": source_text, "tgt": target_text, "sem": semantic}
    shape = OUTPUT_SHAPES[mode]
    for key, value in given.items():
        if (key in shape) != (value is not None):
            raise PromptShapeError(f"{mode.value} target {'needs' if key in shape else 'must not have'} segment {key}")
    out: list[int] = []
    langs = {}
    for key in shape:
        seg = list(given[key])
        if key == "sem":
            if not seg or not all(layout.in_range(t, "semantic") for t in seg):
                raise PromptShapeError("semantic segment must be non-empty semantic tokens")
        else:
            langs[key] = _segment_lang(seg, layout, f"{key} text segment")
        out.extend(seg)
    if "src" in langs and "tgt" in langs and langs["src"] == langs["tgt"]:
        raise PromptShapeError("source and target text must be in different languages")
    out.append(layout.eod)
    return out


def _runs(tokens: Sequence[int], layout: VocabLayout) -> list[tuple[str, list[int]]]:
    runs: list[tuple[str, list[int]]] = []
    for t in tokens:
        try:
            kind = layout.kind(t)
        except ConfigError:
            raise MalformedOutput(f"token {t} outside vocabulary") from None
        if kind != "semantic" and not kind.startswith("text:"):
            raise MalformedOutput(f"token {t} from forbidden sub-range {kind!r}")
        if runs and runs[-1][0] == kind:
            runs[-1][1].append(t)
        else:
            runs.append((kind, [t]))
    return runs


def parse_output(
    mode: TaskMode,
    tokens: Sequence[int],
    layout: VocabLayout,
    lang: str | None = None,
    require_terminated: bool = False,
) -> OutputParse:
    """Split an emission (tokens after BOT) into its segments.

    ``lang`` is the prompt language tag when known; it pins the language of
    the segment the prompt asked for. Unterminated emissions that form a prefix
    of a valid shape come back with ``terminated=False`` (or raise
    IncompleteOutput when ``require_terminated``).
    """
    tokens = list(tokens)
    eod = layout.eod
    terminated = False
    if eod in tokens:
        cut = tokens.index(eod)
        if cut != len(tokens) - 1:
            raise MalformedOutput("tokens after EOD")
        tokens = tokens[:cut]
        terminated = True
    runs = _runs(tokens, layout)
    shape = OUTPUT_SHAPES[mode]
    if len(runs) > len(shape) or (terminated and len(runs) != len(shape)):
        raise MalformedOutput(f"{mode.value} expects segments {shape}, got {[k for k, _ in runs]}")
    if not runs and terminated:
        raise MalformedOutput("empty emission")
    fields: dict = {}
    for (kind, seg), want in zip(runs, shape):
        if want == "sem":
            if kind != "semantic":
                raise MalformedOutput(f"expected semantic segment, got {kind}")
            fields["semantic"] = tuple(seg)
            continue
        if not kind.startswith("text:"):
            raise MalformedOutput(f"expected text segment, got {kind}")
        seg_lang = kind[5:]
        if want == "src":
            fields["source_text"] = tuple(seg)
            fields["source_lang"] = seg_lang
        else:
            fields["target_text"] = tuple(seg)
            fields["target_lang"] = seg_lang
    if fields.get("source_lang") and fields.get("target_lang") and fields["source_lang"] == fields["target_lang"]:
        raise MalformedOutput("source and target text segments share a language")
    if lang is not None:
        if mode is TaskMode.ASR:
            if fields.get("source_lang") not in (None, lang):
                raise MalformedOutput("ASR transcript not in the prompt language")
        else:
            if fields.get("target_lang") not in (None, lang):
                raise MalformedOutput("translation not in the prompt target language")
            if fields.get("source_lang") == lang:
                raise MalformedOutput("source transcript in the target language")
    parse = OutputParse(mode=mode, terminated=terminated, **fields)
    if require_terminated and not terminated:
        raise IncompleteOutput("emission ended without EOD", parse)
    return parse
