import dataclasses
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from planted import REASONS, planted_corpus
from toys2st.errors import EmptyReject, MixedLanguageReject, OutOfRange
from toys2st.metrics import wer
from toys2st.pipeline import (
    GENERAL_STAGES,
    HQ_STAGES,
    CorruptingASR,
    Discard,
    ExactASR,
    Oracles,
    ParallelSample,
    PipelineConfig,
    PipelineStats,
    SourceRecord,
    ToyTTS,
    build_general,
    build_hq,
    clean_source,
    read_discards,
    read_samples,
    sanitize_translation,
    synthesize_and_rate,
    verify_target,
    write_jsonl,
)
from toys2st.synthspeech import SyntheticWaveform


def rec(id, text, lang="en", speaker=1, lead=0, trail=0, transcript=None):
    return SourceRecord(id, SyntheticWaveform("_" * lead + text + "_" * trail, speaker), transcript or text, lang)


def words(n, w="abc"):
    return " ".join([w] * n)


# cleaning ---------------------------------------------------------------------


def test_identity_hypothesis_kept(codec):
    kept, dropped = clean_source([rec("a", "abc def")], ExactASR(codec))
    assert [r.id for r in kept] == ["a"] and not dropped


def test_word_level_wer_example():
    assert wer("aa bc", "aa bb", "en") == 0.5


def test_corrupted_records_discarded(codec):
    records = [rec(f"r{i:03d}", "abc def ghi") for i in range(100)]
    bad = {f"r{i:03d}" for i in range(0, 100, 10)}

    class Oracle:
        def __call__(self, w, key=None):
            return "abc dee ghi" if key in bad else w.text

    kept, dropped = clean_source(records, Oracle())
    assert {d.id for d in dropped} == bad
    assert all(d.reason == "SourceWER" and d.value == pytest.approx(1 / 3) for d in dropped)
    assert len(kept) == 90


def test_oracle_failure_discards_only_that_record(codec):
    def oracle(w, key=None):
        if key == "b":
            raise RuntimeError("boom")
        return w.text

    kept, dropped = clean_source([rec("a", "abc"), rec("b", "abc"), rec("c", "abc")], oracle)
    assert [r.id for r in kept] == ["a", "c"]
    assert dropped[0].reason == "OracleError"


def test_boundary_wer_is_kept(codec):
    text = words(20)
    hyp = "abd " + words(19)
    kept, _ = clean_source([rec("a", text)], lambda w, key=None: hyp)
    assert wer(hyp, text, "en") == 0.05 and len(kept) == 1


# sanitization -----------------------------------------------------------------


def test_strip_prefix(codec):
    assert sanitize_translation("Sure, here is the translation: XYZ", codec) == "XYZ"


def test_strip_note(codec):
    assert sanitize_translation("XYZ\n\nNote: this is literal.", codec) == "XYZ"


def test_collapse_whitespace(codec):
    assert sanitize_translation("  日月\n山水   火 \n", codec) == "日月 山水 火"


def test_chinese_prefix_and_note(codec):
    assert sanitize_translation("好的，以下是翻译：日月 山\n\n注：直译。", codec) == "日月 山"


def test_mixed_language_rejected(codec):
    with pytest.raises(MixedLanguageReject):
        sanitize_translation("日月 abc", codec)


def test_empty_after_cleaning(codec):
    with pytest.raises(EmptyReject):
        sanitize_translation("Translation:\n\nNote: nothing", codec)


# synthesis and verification ------------------------------------------------------


def test_ratio_example(codec):
    s = synthesize_and_rate(rec("a", "ab"), "日月山", "zh", ToyTTS(codec))
    assert s.source.waveform.duration == Fraction(4, 25) and s.target_waveform.duration == Fraction(6, 25)
    assert s.ratio == Fraction(3, 2) and s.speed_bucket == 1.5


def test_equal_length_ratio(codec):
    s = synthesize_and_rate(rec("a", "abc"), "日月山", "zh", ToyTTS(codec))
    assert s.ratio == 1 and s.speed_bucket == 1.0


def test_five_times_longer_out_of_range(codec):
    with pytest.raises(OutOfRange):
        synthesize_and_rate(rec("a", "ab"), "日月山水火木金土天人", "zh", ToyTTS(codec))


def _sample(codec, n_words, spoken_error=False):
    # English target: word-level WER (Chinese is scored per character)
    text = words(n_words)
    s = synthesize_and_rate(rec("a", words(n_words, "日月山"), lang="zh"), text, "en", ToyTTS(codec))
    if spoken_error:
        s = dataclasses.replace(s, target_waveform=SyntheticWaveform("abd" + text[3:], 1))
    return s


def test_verify_clean_synthesis(codec):
    assert verify_target(_sample(codec, 5), ExactASR(codec)) == (True, 0.0)


def test_verify_one_error_in_fifty(codec):
    ok, value = verify_target(_sample(codec, 50, True), CorruptingASR(codec))
    assert not ok and value == pytest.approx(0.02)


def test_verify_one_error_in_two_hundred(codec):
    ok, value = verify_target(_sample(codec, 200, True), CorruptingASR(codec))
    assert ok and value == pytest.approx(0.005)


# General and HQ ---------------------------------------------------------------


def test_empty_input(codec):
    g = build_general([], codec, Oracles.exact(codec))
    assert g.samples == [] and g.discards == []
    assert g.stats.ratio_histogram == {} and g.stats.duration_histogram == {}
    assert build_hq([], codec).samples == []


def test_all_clean(codec):
    records = [rec(f"r{i}", "abc de", lang="en") for i in range(30)]
    g = build_general(records, codec, Oracles.exact(codec))
    assert len(g.samples) == 30
    assert all(s.ratio == 1 for s in g.samples)


def test_hq_trims_leading_silence(codec):
    s = synthesize_and_rate(rec("a", "abcdefgh"), "日月山水火木金土", "zh", ToyTTS(codec, max_lead=0))
    s = dataclasses.replace(s, target_waveform=SyntheticWaveform("___日月山水火木金土", 1), ratio=Fraction(11, 8), speed_bucket=1.4)
    hq = build_hq([s], codec).samples[0]
    assert hq.target_waveform.duration == Fraction(16, 25) < s.target_waveform.duration
    assert hq.ratio == 1 and hq.speed_bucket == 1.0


@pytest.mark.parametrize("tgt_len, kept", [(12, True), (13, False), (6, True), (5, False)])
def test_hq_bounds(codec, tgt_len, kept):
    # source has 8 letters: 12/8 = 1.5 and 6/8 = 0.75 kept; 13/8 = 1.625 and 5/8 = 0.625 dropped
    text = "日" * tgt_len
    g = build_general([rec("a", "abcdefgh")], codec, Oracles(ExactASR(codec), lambda *a, key=None: text, ToyTTS(codec), ExactASR(codec)))
    assert len(g.samples) == 1
    assert (len(build_hq(g.samples, codec).samples) == 1) == kept


def test_all_silence_target_discarded(codec):
    s = _sample(codec, 2)
    s = dataclasses.replace(s, target_waveform=SyntheticWaveform("____", 1))
    out = build_hq([s], codec)
    assert out.discards[0].reason == "AllSilence"


def _reconciles(stats, n):
    remaining = n
    for stage in stats.stages.values():
        assert stage["in"] == remaining
        assert stage["kept"] + stage["discarded"] == stage["in"]
        assert sum(stage["reasons"].values()) == stage["discarded"]
        remaining = stage["kept"]
    return remaining


def test_planted_corpus(codec):
    p = planted_corpus(codec, 240, seed=3)
    g = build_general(p.records, codec, p.oracles)
    h = build_hq(g.samples, codec)
    assert g.ids == p.expected_general()
    assert h.ids == p.expected_hq()
    assert h.ids <= g.ids
    for d in g.discards + h.discards:
        assert d.reason == REASONS[p.category[d.id]]
    for stage in GENERAL_STAGES:
        assert g.stats.stages[stage]["discarded"] == p.expected_discards(stage)
    assert _reconciles(g.stats, 240) == len(g.samples)
    assert _reconciles(h.stats, len(g.samples)) == len(h.samples)


def test_audit_has_one_terminal_reason(codec):
    p = planted_corpus(codec, 120, seed=5)
    g = build_general(p.records, codec, p.oracles)
    h = build_hq(g.samples, codec)
    for d in g.discards + h.discards:
        terminal = [a for a in d.audit if a.decision.startswith("discard:")]
        assert len(terminal) == 1 and terminal[0].stage == d.stage
    for s in h.samples:
        assert [a.stage for a in s.audit] == list(GENERAL_STAGES) + list(HQ_STAGES)
        assert all(a.decision == "keep" for a in s.audit)
        assert 0.7 <= s.ratio <= 1.5


def test_bytes_identical_and_parallel_equivalent(codec, tmp_path):
    p = planted_corpus(codec, 200, seed=1)
    paths = []
    for i, workers in enumerate([1, 1, 3]):
        g = build_general(list(reversed(p.records)) if i == 2 else p.records, codec, p.oracles, PipelineConfig(workers=workers))
        path = tmp_path / f"g{i}.jsonl"
        write_jsonl(path, g.samples + g.discards)
        paths.append(path.read_bytes())
    assert paths[0] == paths[1] == paths[2]


def test_manifest_round_trip(codec, tmp_path):
    p = planted_corpus(codec, 60, seed=2)
    g = build_general(p.records, codec, p.oracles)
    write_jsonl(tmp_path / "m.jsonl", g.samples)
    write_jsonl(tmp_path / "d.jsonl", g.discards)
    assert read_samples(tmp_path / "m.jsonl") == g.samples
    assert read_discards(tmp_path / "d.jsonl") == g.discards


def test_default_oracles_terminate(codec):
    from toys2st.corpus import CorpusConfig, OracleConfig, generate_sources

    records = generate_sources(codec, CorpusConfig(records_per_lang=100), 0)
    g = build_general(records, codec, OracleConfig().build(codec, 0))
    assert 0 < len(g.samples) < len(records)
    _reconciles(g.stats, len(records))


# statistics --------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(5, 20), min_size=1, max_size=40), st.integers(0, 1))
def test_stats_merge_is_associative(tgt_tenths, split):
    def sample(i, t):
        src = SourceRecord(f"s{i}", SyntheticWaveform("a" * 10, 0), "a" * 10, "en")
        return ParallelSample(f"s{i}", src, "zh", "日", SyntheticWaveform("日" * t, 0), Fraction(t, 10), t / 10)

    samples = [sample(i, t) for i, t in enumerate(tgt_tenths)]
    cut = len(samples) // 2 + split
    a = PipelineStats.from_results(GENERAL_STAGES, samples[:cut], [])
    b = PipelineStats.from_results(GENERAL_STAGES, samples[cut:], [Discard("x", "translate", "EmptyReject")])
    whole = PipelineStats.from_results(GENERAL_STAGES, samples, [Discard("x", "translate", "EmptyReject")])
    assert a.merge(b).to_dict() == whole.to_dict() == b.merge(a).to_dict()
    hist = whole.ratio_histogram
    assert sum(hist.values()) == len(samples)
    assert all(k * 10 == int(k * 10) for k in hist)


def test_histogram_csv_rows_match_bins(codec):
    p = planted_corpus(codec, 100)
    g = build_general(p.records, codec, p.oracles)
    for which, hist in (("ratio", g.stats.ratio_histogram), ("duration", g.stats.duration_histogram)):
        lines = g.stats.histogram_csv(which).strip().splitlines()
        assert len(lines) - 1 == len(hist)
