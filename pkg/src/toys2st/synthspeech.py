"""Deterministic synthetic speech codec.

A "waveform" is a string over a closed alphabet plus a speaker id; its
duration is ``len(text) / 12.5`` seconds. Tokenization yields

* 32 speaker tokens, a function of the speaker id alone,
* one linguistic token per character (content only),
* four semantic tokens per character, each depending on the character, its
  phase (position mod 4) and the speaker parity (speaker id mod K).

Decoding semantic tokens needs speaker tokens to produce a voice; swapping the
speaker tokens transfers the voice and keeps the text.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import AlphabetError, ConfigError, DecodeError
from .protocol import SPEAKER_TOKEN_COUNT, VocabConfig, VocabLayout, build_vocab

CHARS_PER_SECOND = Fraction(25, 2)
SEMANTIC_PER_CHAR = 4
# Words up to this length translate through an explicit codebook.
CODEBOOK_MAX_LENGTH = 4
CODEC_FORMAT = "toys2st-codec"


@dataclass(frozen=True)
class CodecConfig:
    alphabets: dict = field(default_factory=lambda: {"en": "abcdefghijklmnop", "zh": "日月山水火木金土天人石田禾竹米雨"}, hash=False)
    space: str = " "
    silence: str = "_"
    speaker_parity: int = 4
    num_speakers: int = 64
    cipher_seed: int = 7

    def to_dict(self) -> dict:
        return {
            "format": CODEC_FORMAT,
            "version": 1,
            "alphabets": dict(self.alphabets),
            "space": self.space,
            "silence": self.silence,
            "speaker_parity": self.speaker_parity,
            "num_speakers": self.num_speakers,
            "cipher_seed": self.cipher_seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CodecConfig":
        doc = dict(doc)
        doc.pop("format", None)
        doc.pop("version", None)
        return cls(**doc)


@dataclass(frozen=True)
class SyntheticWaveform:
    text: str
    speaker_id: int

    def __post_init__(self):
        if not self.text:
            raise AlphabetError("waveform text must be non-empty")

    @property
    def duration(self) -> Fraction:
        return len(self.text) / CHARS_PER_SECOND

    @property
    def duration_s(self) -> float:
        return float(self.duration)

    def to_dict(self, id: str | None = None) -> dict:
        doc = {"text": self.text, "speaker_id": self.speaker_id, "duration_s": self.duration_s}
        if id is not None:
            doc = {"id": id, **doc}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticWaveform":
        w = cls(doc["text"], int(doc["speaker_id"]))
        if "duration_s" in doc and abs(float(doc["duration_s"]) - w.duration_s) > 1e-9:
            raise ConfigError(f"duration_s {doc['duration_s']} inconsistent with text length")
        return w


def vocab_config_for(config: CodecConfig) -> VocabConfig:
    """Smallest vocabulary that holds every token the codec can emit."""
    langs = tuple(config.alphabets)
    n_chars = 2 + sum(len(a) for a in config.alphabets.values())
    return VocabConfig(
        text={lang: len(config.alphabets[lang]) + 1 for lang in langs},
        linguistic=n_chars,
        semantic=n_chars * SEMANTIC_PER_CHAR * config.speaker_parity,
        speaker=16,
        languages=langs,
    )


class SyntheticCodec:
    def __init__(self, config: CodecConfig | None = None, layout: VocabLayout | None = None):
        self.config = config = config or CodecConfig()
        self.layout = layout = layout or build_vocab(vocab_config_for(config))
        self.languages = tuple(config.alphabets)
        if tuple(layout.languages) != self.languages:
            raise ConfigError("codec languages do not match vocabulary languages")
        if len(config.space) != 1 or len(config.silence) != 1 or config.space == config.silence:
            raise ConfigError("space and silence must be distinct single characters")
        self.chars = [config.space, config.silence]
        self.lang_of_char: dict[str, str] = {}
        for lang, alphabet in config.alphabets.items():
            for ch in alphabet:
                if ch in self.lang_of_char or ch in self.chars:
                    raise ConfigError(f"character {ch!r} appears in more than one alphabet")
                self.lang_of_char[ch] = lang
                self.chars.append(ch)
        self.char_index = {ch: i for i, ch in enumerate(self.chars)}
        self.k = config.speaker_parity
        if self.k < 1:
            raise ConfigError("speaker parity must be >= 1")
        n = len(self.chars)
        for lang, alphabet in config.alphabets.items():
            if layout.ranges[f"text:{lang}"][1] < len(alphabet) + 1:
                raise ConfigError(f"text range for {lang} too small for its alphabet")
        if layout.linguistic_vocab_size < n:
            raise ConfigError("linguistic range too small for the codec alphabet")
        if layout.semantic_vocab_size < n * SEMANTIC_PER_CHAR * self.k:
            raise ConfigError("semantic range too small for the codec alphabet")
        self.spk_base = layout.speaker_vocab_size
        if self.spk_base < 2 or self.spk_base**SPEAKER_TOKEN_COUNT < config.num_speakers:
            raise ConfigError("speaker range cannot encode every speaker id")
        for lang, alphabet in config.alphabets.items():
            if len(alphabet) != len(next(iter(config.alphabets.values()))):
                raise ConfigError("all alphabets must have the same size")
        self._codebooks: dict = {}

    # alphabet helpers ------------------------------------------------------
    @property
    def silence(self) -> str:
        return self.config.silence

    def check_text(self, text: str, lang: str | None = None, allow_silence: bool = True) -> None:
        if not text:
            raise AlphabetError("empty text")
        for ch in text:
            if ch == self.config.space or (allow_silence and ch == self.config.silence):
                continue
            owner = self.lang_of_char.get(ch)
            if owner is None or (lang is not None and owner != lang):
                raise AlphabetError(f"character {ch!r} outside the {lang or 'codec'} alphabet")

    def strip_silence(self, text: str) -> str:
        return text.strip(self.config.silence)

    def language_of(self, text: str) -> str | None:
        langs = {self.lang_of_char[ch] for ch in text if ch in self.lang_of_char}
        return langs.pop() if len(langs) == 1 else None

    # speaker tokens --------------------------------------------------------
    def speaker_tokens(self, speaker_id: int) -> tuple[int, ...]:
        if not 0 <= speaker_id < self.config.num_speakers:
            raise AlphabetError(f"speaker id {speaker_id} outside [0, {self.config.num_speakers})")
        base, start = self.spk_base, self.layout.ranges["speaker"][0]
        out, rest = [], speaker_id
        for k in range(SPEAKER_TOKEN_COUNT):
            rest, digit = divmod(rest, base)
            out.append(start + (digit + 5 * k) % base)
        return tuple(out)

    def decode_speaker(self, tokens) -> int:
        if len(tokens) != SPEAKER_TOKEN_COUNT:
            raise DecodeError(f"expected {SPEAKER_TOKEN_COUNT} speaker tokens, got {len(tokens)}")
        base, start = self.spk_base, self.layout.ranges["speaker"][0]
        value = 0
        for k in reversed(range(SPEAKER_TOKEN_COUNT)):
            t = tokens[k]
            if not self.layout.in_range(t, "speaker"):
                raise DecodeError(f"token {t} is not a speaker token")
            value = value * base + (t - start - 5 * k) % base
        if value >= self.config.num_speakers:
            raise DecodeError(f"speaker tokens decode to unknown speaker {value}")
        return value

    # content tokens --------------------------------------------------------
    def linguistic_tokens(self, text: str) -> tuple[int, ...]:
        self.check_text(text)
        start = self.layout.ranges["linguistic"][0]
        return tuple(start + self.char_index[ch] for ch in text)

    def semantic_tokens(self, text: str, speaker_id: int) -> tuple[int, ...]:
        self.check_text(text)
        start = self.layout.ranges["semantic"][0]
        parity = speaker_id % self.k
        return tuple(
            start + (self.char_index[ch] * SEMANTIC_PER_CHAR + phase) * self.k + parity
            for ch in text
            for phase in range(SEMANTIC_PER_CHAR)
        )

    def text_tokens(self, text: str, lang: str) -> tuple[int, ...]:
        self.check_text(text, lang, allow_silence=False)
        start = self.layout.ranges[f"text:{lang}"][0]
        alphabet = self.config.alphabets[lang]
        return tuple(start if ch == self.config.space else start + 1 + alphabet.index(ch) for ch in text)

    def text_from_tokens(self, tokens) -> str:
        out = []
        for t in tokens:
            lang = self.layout.text_lang(t)
            if lang is None:
                raise DecodeError(f"token {t} is not a text token")
            index = t - self.layout.ranges[f"text:{lang}"][0]
            alphabet = self.config.alphabets[lang]
            if index == 0:
                out.append(self.config.space)
            elif index <= len(alphabet):
                out.append(alphabet[index - 1])
            else:
                raise DecodeError(f"unused text token {t}")
        return "".join(out)

    def tokenize(self, w: SyntheticWaveform):
        """(speaker, linguistic, semantic) token streams of a waveform."""
        self.check_text(w.text)
        return (
            self.speaker_tokens(w.speaker_id),
            self.linguistic_tokens(w.text),
            self.semantic_tokens(w.text, w.speaker_id),
        )

    def detokenize(self, speaker, semantic) -> SyntheticWaveform:
        speaker_id = self.decode_speaker(tuple(speaker))
        semantic = tuple(semantic)
        if not semantic or len(semantic) % SEMANTIC_PER_CHAR:
            raise DecodeError(f"semantic length {len(semantic)} not a positive multiple of {SEMANTIC_PER_CHAR}")
        start = self.layout.ranges["semantic"][0]
        n_chars = len(self.chars)
        chars = []
        for f in range(0, len(semantic), SEMANTIC_PER_CHAR):
            frame = semantic[f : f + SEMANTIC_PER_CHAR]
            decoded = set()
            for phase, t in enumerate(frame):
                idx = t - start
                if not self.layout.in_range(t, "semantic") or idx >= n_chars * SEMANTIC_PER_CHAR * self.k:
                    raise DecodeError(f"token {t} is not a codec semantic token")
                parity = idx % self.k
                char, got_phase = divmod(idx // self.k, SEMANTIC_PER_CHAR)
                if got_phase != phase:
                    raise DecodeError(f"semantic token {t} has phase {got_phase} at frame position {phase}")
                decoded.add((char, parity))
            if len(decoded) != 1:
                raise DecodeError(f"inconsistent semantic frame at {f}")
            chars.append(self.chars[decoded.pop()[0]])
        return SyntheticWaveform("".join(chars), speaker_id)

    def token_classes(self) -> tuple[int, ...]:
        """Class id per vocabulary token, used for run positions in the model.

        Every sub-range is its own class, and silence gets a class of its own
        inside the linguistic and semantic ranges so edge silence starts a new run.
        """
        kinds = list(self.layout.ranges)
        sil = self.char_index[self.config.silence]
        ling0 = self.layout.ranges["linguistic"][0]
        sem0 = self.layout.ranges["semantic"][0]
        sil_sem = range(sem0 + sil * SEMANTIC_PER_CHAR * self.k, sem0 + (sil + 1) * SEMANTIC_PER_CHAR * self.k)
        out = []
        for t in range(self.layout.total_size):
            c = kinds.index(self.layout.kind(t))
            if t == ling0 + sil or t in sil_sem:
                c += len(kinds)
            out.append(c)
        return tuple(out)

    # translation -----------------------------------------------------------
    def _codebook(self, a: str, b: str, length: int) -> tuple[list[int], list[int]]:
        """Seeded random bijection between all words of ``length`` letters of a and b."""
        key = (a, b, length)
        if key not in self._codebooks:
            n = len(self.config.alphabets[a])
            perm = list(range(n**length))
            random.Random(f"{self.config.cipher_seed}:{a}:{b}:{length}").shuffle(perm)
            inv = [0] * len(perm)
            for i, j in enumerate(perm):
                inv[j] = i
            self._codebooks[key] = (perm, inv)
        return self._codebooks[key]

    def _encode_word(self, word: str, a: str, b: str, inverse: bool) -> str:
        src, dst = self.config.alphabets[a], self.config.alphabets[b]
        if inverse:
            src, dst = dst, src
        n = len(src)
        digits = [src.index(ch) for ch in word]
        if len(word) <= CODEBOOK_MAX_LENGTH:
            perm, inv = self._codebook(a, b, len(word))
            value = 0
            for d in digits:
                value = value * n + d
            value = (inv if inverse else perm)[value]
            out = []
            for _ in digits:
                value, d = divmod(value, n)
                out.append(d)
            return "".join(dst[d] for d in reversed(out))
        # longer words: keyed letter chain, t_i = Q[(c_i + c_{i-1}) mod n]
        q, q_inv = self._letter_perm(a, b)
        out, prev = [], 0
        for d in digits:
            if inverse:
                c = (q_inv[d] - prev) % n
                out.append(c)
                prev = c
            else:
                out.append(q[(d + prev) % n])
                prev = d
        return "".join(dst[d] for d in out)

    def _letter_perm(self, a: str, b: str) -> tuple[list[int], list[int]]:
        perm = list(range(len(self.config.alphabets[a])))
        random.Random(f"{self.config.cipher_seed}:{a}:{b}").shuffle(perm)
        inv = [0] * len(perm)
        for i, j in enumerate(perm):
            inv[j] = i
        return perm, inv

    def translate(self, text: str, src: str, tgt: str) -> str:
        """Per-word codebook substitution, then each word's letters are reversed; spacing kept.

        The codebook is a seeded bijection over all words of a given length, so
        the mapping of one word says nothing about another.
        """
        if src == tgt or src not in self.languages or tgt not in self.languages:
            raise ConfigError(f"no translation direction {src}->{tgt}")
        self.check_text(text, src, allow_silence=False)
        forward = self.languages.index(src) < self.languages.index(tgt)
        a, b = (src, tgt) if forward else (tgt, src)
        out = []
        for word in text.split(self.config.space):
            if forward:
                out.append(self._encode_word(word, a, b, False)[::-1])
            else:
                out.append(self._encode_word(word[::-1], a, b, True))
        return self.config.space.join(out)

    # synthesis -------------------------------------------------------------
    def synthesize(self, text: str, reference: SyntheticWaveform, lead: int = 0, trail: int = 0) -> SyntheticWaveform:
        """Speech for ``text`` in the reference voice, with optional edge silence."""
        self.check_text(text, allow_silence=False)
        if lead < 0 or trail < 0:
            raise ConfigError("silence padding must be non-negative")
        sil = self.config.silence
        return SyntheticWaveform(sil * lead + text + sil * trail, reference.speaker_id)

    def to_json(self) -> str:
        return json.dumps({"codec": self.config.to_dict(), "vocab": self.layout.to_dict()}, indent=2, ensure_ascii=False)


_default_codec: SyntheticCodec | None = None


def default_codec() -> SyntheticCodec:
    global _default_codec
    if _default_codec is None:
        _default_codec = SyntheticCodec()
    return _default_codec


def toy_translate(text: str, direction: str, codec: SyntheticCodec | None = None) -> str:
    """``direction`` is ``"<src>-<tgt>"``, e.g. ``"en-zh"``."""
    src, _, tgt = direction.partition("-")
    return (codec or default_codec()).translate(text, src, tgt)
