"""Seeded toy corpora and the conversion of records into training examples."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .pipeline import (
    CorruptingASR,
    ExactASR,
    Oracles,
    ParallelSample,
    SourceRecord,
    ToyLLMTranslator,
    ToyTTS,
    _rng,
    corrupt_text,
)
from .protocol import Prompt, TaskMode, assemble_prompt, assemble_target
from .synthspeech import SyntheticCodec, SyntheticWaveform


@dataclass(frozen=True)
class CorpusConfig:
    records_per_lang: int = 1500
    test_per_lang: int = 320
    mt_pairs_per_lang: int = 1000
    words: tuple = (3, 5)
    word_length: tuple = (3, 3)
    max_source_silence: int = 2
    transcript_error_rate: float = 0.04
    # Sentences draw from a bilingual word list of this many entries (0: any letter string).
    vocabulary: int = 100
    # Share of the word list that appears in text-only data and test speech, never in training speech.
    text_only_fraction: float = 0.0


@dataclass(frozen=True)
class OracleConfig:
    """Noise rates of the default toy oracles."""

    asr_word_rate: float = 0.3
    asr_utterance_rate: float = 0.02
    prefix_rate: float = 0.3
    note_rate: float = 0.2
    linebreak_rate: float = 0.2
    mixed_rate: float = 0.03
    extra_word_rate: float = 0.02
    tts_max_lead: int = 3
    tts_max_trail: int = 3
    mispronounce_rate: float = 0.03

    def build(self, codec: SyntheticCodec, seed: int) -> Oracles:
        return Oracles(
            source_asr=CorruptingASR(codec, self.asr_word_rate, self.asr_utterance_rate, seed=seed),
            translator=ToyLLMTranslator(
                codec,
                prefix_rate=self.prefix_rate,
                note_rate=self.note_rate,
                linebreak_rate=self.linebreak_rate,
                mixed_rate=self.mixed_rate,
                extra_word_rate=self.extra_word_rate,
                seed=seed,
            ),
            tts=ToyTTS(codec, self.tts_max_lead, self.tts_max_trail, self.mispronounce_rate, seed=seed),
            target_asr=ExactASR(codec),
        )


def word_list(codec: SyntheticCodec, config: CorpusConfig, seed: int) -> dict:
    """Bilingual word list: entry i of every language is the translation of entry i of the first."""
    if not config.vocabulary:
        return {}
    first = codec.languages[0]
    rng = _rng(seed, "vocabulary")
    alphabet = codec.config.alphabets[first]
    words: list[str] = []
    seen = set()
    while len(words) < config.vocabulary:
        w = "".join(rng.choice(alphabet) for _ in range(rng.randint(*config.word_length)))
        if w not in seen:
            seen.add(w)
            words.append(w)
    out = {first: words}
    for lang in codec.languages[1:]:
        out[lang] = [codec.translate(w, first, lang) for w in words]
    return out


def speech_entries(config: CorpusConfig, seed: int) -> list[int]:
    """Word-list indices allowed in training speech."""
    n = config.vocabulary
    held = round(config.text_only_fraction * n)
    order = list(range(n))
    _rng(seed, "text-only").shuffle(order)
    return sorted(order[held:])


def random_sentence(
    codec: SyntheticCodec,
    lang: str,
    rng: random.Random,
    words=(3, 5),
    word_length=(3, 3),
    vocabulary: Sequence[str] | None = None,
) -> str:
    alphabet = codec.config.alphabets[lang]
    n = rng.randint(*words)
    if vocabulary:
        return codec.config.space.join(rng.choice(vocabulary) for _ in range(n))
    return codec.config.space.join(
        "".join(rng.choice(alphabet) for _ in range(rng.randint(*word_length))) for _ in range(n)
    )


def _vocab_for(codec, config, seed, lang, speech_only: bool):
    words = word_list(codec, config, seed)
    if not words:
        return None
    if speech_only:
        return [words[lang][i] for i in speech_entries(config, seed)]
    return words[lang]


def generate_sources(
    codec: SyntheticCodec,
    config: CorpusConfig,
    seed: int,
    split: str = "train",
    exclude: Iterable[str] = (),
) -> list[SourceRecord]:
    """Recorded source utterances with edge silence and occasional transcript errors.

    Training speech avoids the text-only part of the word list; test speech uses all of it.
    """
    count = config.records_per_lang if split == "train" else config.test_per_lang
    seen = set(exclude)
    sil = codec.silence
    records = []
    for lang in codec.languages:
        rng = _rng(seed, "corpus", split, lang)
        vocab = _vocab_for(codec, config, seed, lang, speech_only=split == "train")
        i = 0
        while i < count:
            text = random_sentence(codec, lang, rng, config.words, config.word_length, vocab)
            if text in seen:
                continue
            seen.add(text)
            speaker = rng.randrange(codec.config.num_speakers)
            lead = rng.randint(0, config.max_source_silence)
            trail = rng.randint(0, config.max_source_silence)
            wave = SyntheticWaveform(sil * lead + text + sil * trail, speaker)
            transcript = text
            if split == "train" and rng.random() < config.transcript_error_rate:
                transcript = corrupt_text(codec, text, 0.5, rng)
            records.append(SourceRecord(f"{split}-{lang}-{i:06d}", wave, transcript, lang))
            i += 1
    return records


def generate_mt_pairs(codec: SyntheticCodec, config: CorpusConfig, seed: int, exclude: Iterable[str] = ()) -> list[dict]:
    """Text-only parallel pairs for the machine-translation task, over the whole word list."""
    seen = set(exclude)
    pairs = []
    for src in codec.languages:
        tgt = next(l for l in codec.languages if l != src)
        rng = _rng(seed, "mt", src)
        vocab = _vocab_for(codec, config, seed, src, speech_only=False)
        i = 0
        while i < config.mt_pairs_per_lang:
            text = random_sentence(codec, src, rng, config.words, config.word_length, vocab)
            if text in seen:
                continue
            seen.add(text)
            pairs.append({"id": f"mt-{src}-{i:06d}", "source_lang": src, "source_text": text, "target_lang": tgt, "target_text": codec.translate(text, src, tgt)})
            i += 1
    return pairs


# training examples -------------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    id: str
    prompt: tuple
    target: tuple
    task: str | None = field(default=None, compare=False)

    @property
    def tokens(self) -> tuple:
        return self.prompt + self.target

    @property
    def loss_mask(self) -> tuple:
        return (False,) * len(self.prompt) + (True,) * len(self.target)

    def __len__(self) -> int:
        return len(self.prompt) + len(self.target)


def s2st_example(sample: ParallelSample, mode: TaskMode, codec: SyntheticCodec) -> TrainingExample:
    layout = codec.layout
    spk, ling, _ = codec.tokenize(sample.source.waveform)
    prompt = Prompt(mode, sample.target_lang, ling, spk, sample.speed_bucket)
    fields = {"semantic": codec.semantic_tokens(sample.target_waveform.text, sample.target_waveform.speaker_id)}
    if mode is not TaskMode.S2ST_DIRECT:
        fields["target_text"] = codec.text_tokens(sample.target_text, sample.target_lang)
    if mode is TaskMode.S2ST_QUALITY:
        fields["source_text"] = codec.text_tokens(sample.source.transcript, sample.source.lang)
    return TrainingExample(
        f"{sample.id}/{mode.value}",
        tuple(assemble_prompt(prompt, layout)),
        tuple(assemble_target(mode, layout, **fields)),
        mode.value,
    )


def asr_example(record: SourceRecord, codec: SyntheticCodec) -> TrainingExample:
    spk, ling, _ = codec.tokenize(record.waveform)
    prompt = Prompt(TaskMode.ASR, record.lang, ling, spk)
    target = assemble_target(TaskMode.ASR, codec.layout, source_text=codec.text_tokens(record.transcript, record.lang))
    return TrainingExample(f"{record.id}/asr", tuple(assemble_prompt(prompt, codec.layout)), tuple(target), "asr")


def tts_example(record: SourceRecord, codec: SyntheticCodec) -> TrainingExample:
    spk, _, sem = codec.tokenize(record.waveform)
    prompt = Prompt(TaskMode.TTS, record.lang, codec.text_tokens(record.transcript, record.lang), spk)
    target = assemble_target(TaskMode.TTS, codec.layout, semantic=sem)
    return TrainingExample(f"{record.id}/tts", tuple(assemble_prompt(prompt, codec.layout)), tuple(target), "tts")


def s2tt_example(sample: ParallelSample, codec: SyntheticCodec) -> TrainingExample:
    spk, ling, _ = codec.tokenize(sample.source.waveform)
    prompt = Prompt(TaskMode.S2TT, sample.target_lang, ling, spk)
    target = assemble_target(TaskMode.S2TT, codec.layout, target_text=codec.text_tokens(sample.target_text, sample.target_lang))
    return TrainingExample(f"{sample.id}/s2tt", tuple(assemble_prompt(prompt, codec.layout)), tuple(target), "s2tt")


def mt_example(id: str, src_lang: str, src_text: str, tgt_lang: str, tgt_text: str, codec: SyntheticCodec) -> TrainingExample:
    prompt = Prompt(TaskMode.MT, tgt_lang, codec.text_tokens(src_text, src_lang))
    target = assemble_target(TaskMode.MT, codec.layout, target_text=codec.text_tokens(tgt_text, tgt_lang))
    return TrainingExample(f"{id}/mt", tuple(assemble_prompt(prompt, codec.layout)), tuple(target), "mt")


def phase_datasets(
    codec: SyntheticCodec,
    clean_sources: Sequence[SourceRecord],
    general: Sequence[ParallelSample],
    hq: Sequence[ParallelSample],
    mt_pairs: Sequence[dict] = (),
    phase2_modes: Sequence[TaskMode] = (TaskMode.S2ST_QUALITY, TaskMode.S2ST_PERFORMANCE, TaskMode.S2ST_DIRECT),
    phase3_modes: Sequence[TaskMode] = (TaskMode.S2ST_QUALITY, TaskMode.S2ST_PERFORMANCE),
) -> dict:
    """Example pools for the three curriculum phases."""
    phase1 = [asr_example(r, codec) for r in clean_sources]
    phase1 += [tts_example(r, codec) for r in clean_sources]
    phase1 += [s2tt_example(s, codec) for s in general]
    phase1 += [mt_example(s.id, s.source.lang, s.source.transcript, s.target_lang, s.target_text, codec) for s in general]
    phase1 += [mt_example(p["id"], p["source_lang"], p["source_text"], p["target_lang"], p["target_text"], codec) for p in mt_pairs]
    phase2 = [s2st_example(s, m, codec) for s in general for m in phase2_modes]
    phase3 = [s2st_example(s, m, codec) for s in hq for m in phase3_modes]
    return {"phase1": phase1, "phase2": phase2, "phase3": phase3}
